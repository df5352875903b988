"""Compiled inner loops for the mountain-car DQN.

Parameter layout matches :class:`kddg_lab.rl.QNetwork`: trunk weight
(2, H) and bias, mean-head weight (H, 1) and bias, centred-head weight
(H, 3) and bias, all in one flat float64 vector.  The numpy methods on
``QNetwork`` and :func:`kddg_lab.rl.dqn_loss` are the reference these
kernels are tested against.
"""
import math

import numba
import numpy as np

NUM_ACTIONS = 3
MIN_POSITION, MAX_POSITION, MAX_SPEED, GOAL = -1.2, 0.6, 0.07, 0.5

FILTER_NONE, FILTER_SMOOTH, FILTER_HARD = 0, 1, 2


@numba.njit(cache=True)
def step(p, v, a, gravity, force):
    v = v + (a - 1) * force - gravity * math.cos(3.0 * p)
    v = min(max(v, -MAX_SPEED), MAX_SPEED)
    p = p + v
    p = min(max(p, MIN_POSITION), MAX_POSITION)
    if p == MIN_POSITION and v < 0:
        v = 0.0
    return p, v


@numba.njit(cache=True)
def reward(p):
    if p >= GOAL:
        return 100.0
    if p > -0.4:
        return 10.0 * (0.4 + p) ** 3
    return -0.1


@numba.njit(cache=True)
def filter_weight(p, kind, eta):
    if kind == FILTER_NONE or p <= eta:
        return 1.0
    if kind == FILTER_HARD:
        return 0.0
    if p <= (1.0 + eta) / 2.0:
        r = (eta + 1.0 - 2.0 * p) / (1.0 - eta)
        return r * r
    return 0.0


@numba.njit(cache=True)
def q_values(params, hidden, p, v, h_out, z_out, q_out):
    """Q-values of one raw state; trunk activations are written to h_out / z_out."""
    x0 = (p + 0.3) / 0.9
    x1 = v / MAX_SPEED
    ob1 = 2 * hidden
    owm = ob1 + hidden
    obm = owm + hidden
    owc = obm + 1
    obc = owc + hidden * NUM_ACTIONS
    mean = params[obm]
    c0 = params[obc]
    c1 = params[obc + 1]
    c2 = params[obc + 2]
    for j in range(hidden):
        z = x0 * params[j] + x1 * params[hidden + j] + params[ob1 + j]
        z_out[j] = z
        h = z if z > 0.0 else 0.0
        h_out[j] = h
        if h != 0.0:
            mean += h * params[owm + j]
            base = owc + j * NUM_ACTIONS
            c0 += h * params[base]
            c1 += h * params[base + 1]
            c2 += h * params[base + 2]
    cm = (c0 + c1 + c2) / 3.0
    q_out[0] = mean + (c0 - cm)
    q_out[1] = mean + (c1 - cm)
    q_out[2] = mean + (c2 - cm)


@numba.njit(cache=True)
def greedy(q):
    best = 0
    for k in range(1, NUM_ACTIONS):
        if q[k] > q[best]:
            best = k
    return best


@numba.njit(cache=True)
def loss_grad(params, tparams, teacher, use_teacher, hidden, gamma,
              s_p, s_v, acts, rews, n_p, n_v, dones,
              tau, lambda_kd, fkind, eta, grad):
    """Bellman MSE (+ lambda_kd * filtered KD) over a batch; fills ``grad`` and returns
    (loss, bellman, kd)."""
    n = s_p.shape[0]
    grad[:] = 0.0
    h = np.empty(hidden)
    z = np.empty(hidden)
    q = np.empty(NUM_ACTIONS)
    hq = np.empty(hidden)
    zq = np.empty(hidden)
    qt = np.empty(NUM_ACTIONS)
    dq = np.empty(NUM_ACTIONS)
    ob1 = 2 * hidden
    owm = ob1 + hidden
    obm = owm + hidden
    owc = obm + 1
    obc = owc + hidden * NUM_ACTIONS
    bellman = 0.0
    kd = 0.0
    for i in range(n):
        y = rews[i]
        if not dones[i]:
            q_values(tparams, hidden, n_p[i], n_v[i], hq, zq, qt)
            y += gamma * max(qt[0], max(qt[1], qt[2]))
        q_values(params, hidden, s_p[i], s_v[i], h, z, q)
        err = q[acts[i]] - y
        bellman += err * err / n
        for k in range(NUM_ACTIONS):
            dq[k] = 0.0
        dq[acts[i]] = 2.0 * err / n
        if use_teacher:
            q_values(teacher, hidden, s_p[i], s_v[i], hq, zq, qt)
            # student top-action probability at temperature 1
            qmax = max(q[0], max(q[1], q[2]))
            den = 0.0
            for k in range(NUM_ACTIONS):
                den += math.exp(q[k] - qmax)
            w = filter_weight(1.0 / den, fkind, eta)
            smax = qmax / tau
            tmax = max(qt[0], max(qt[1], qt[2])) / tau
            sden = 0.0
            tden = 0.0
            for k in range(NUM_ACTIONS):
                sden += math.exp(q[k] / tau - smax)
                tden += math.exp(qt[k] / tau - tmax)
            lse = smax + math.log(sden)
            ce = 0.0
            for k in range(NUM_ACTIONS):
                pt = math.exp(qt[k] / tau - tmax) / tden
                ps = math.exp(q[k] / tau - smax) / sden
                ce -= pt * (q[k] / tau - lse)
                dq[k] += lambda_kd * tau * (ps - pt) * w / n
            kd += w * tau * tau * ce / n
        # backprop through the duelling combination
        d_mean = dq[0] + dq[1] + dq[2]
        dm = d_mean / 3.0
        dc0 = dq[0] - dm
        dc1 = dq[1] - dm
        dc2 = dq[2] - dm
        x0 = (s_p[i] + 0.3) / 0.9
        x1 = s_v[i] / MAX_SPEED
        grad[obm] += d_mean
        grad[obc] += dc0
        grad[obc + 1] += dc1
        grad[obc + 2] += dc2
        for j in range(hidden):
            hj = h[j]
            base = owc + j * NUM_ACTIONS
            grad[owm + j] += hj * d_mean
            grad[base] += hj * dc0
            grad[base + 1] += hj * dc1
            grad[base + 2] += hj * dc2
            if z[j] > 0.0:
                dz = (d_mean * params[owm + j] + dc0 * params[base]
                      + dc1 * params[base + 1] + dc2 * params[base + 2])
                grad[j] += x0 * dz
                grad[hidden + j] += x1 * dz
                grad[ob1 + j] += dz
    return bellman + lambda_kd * kd, bellman, kd


@numba.njit(cache=True)
def adam_update(params, grad, m, v, t, lr, b1, b2, eps):
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for i in range(params.shape[0]):
        g = grad[i]
        m[i] = b1 * m[i] + (1.0 - b1) * g
        v[i] = b2 * v[i] + (1.0 - b2) * g * g
        params[i] -= lr * (m[i] / c1) / (math.sqrt(v[i] / c2) + eps)


@numba.njit(cache=True)
def train_loop(params, tparams, teacher, use_teacher, hidden, seed,
               episodes, train_max_steps, batch, lr, gamma, epsilon, sync_every, capacity,
               gravity, force, tau, lambda_kd, fkind, eta,
               ep_steps, ep_fuel, ep_return, ep_reached, ep_loss, act_counts):
    """Full DQN training run; updates ``params`` (online) and ``tparams`` (target)
    in place and fills the per-episode arrays and the per-action tally.

    Returns the number of gradient steps taken.
    """
    np.random.seed(seed)
    npar = params.shape[0]
    m = np.zeros(npar)
    v = np.zeros(npar)
    grad = np.empty(npar)
    bs_p = np.empty(capacity)
    bs_v = np.empty(capacity)
    ba = np.empty(capacity, dtype=np.int64)
    br = np.empty(capacity)
    bn_p = np.empty(capacity)
    bn_v = np.empty(capacity)
    bd = np.empty(capacity, dtype=np.bool_)
    perm = np.arange(capacity)
    size = 0
    head = 0
    s_p = np.empty(batch)
    s_v = np.empty(batch)
    acts = np.empty(batch, dtype=np.int64)
    rews = np.empty(batch)
    n_p = np.empty(batch)
    n_v = np.empty(batch)
    dns = np.empty(batch, dtype=np.bool_)
    h = np.empty(hidden)
    z = np.empty(hidden)
    q = np.empty(NUM_ACTIONS)
    updates = 0
    for ep in range(episodes):
        p = np.random.uniform(-0.6, -0.4)
        vel = 0.0
        ret = 0.0
        fuel = 0
        steps = 0
        reached = False
        loss_sum = 0.0
        for _ in range(train_max_steps):
            if epsilon > 0.0 and np.random.random() < epsilon:
                a = np.random.randint(0, NUM_ACTIONS)
            else:
                q_values(params, hidden, p, vel, h, z, q)
                a = greedy(q)
            act_counts[a] += 1
            p2, v2 = step(p, vel, a, gravity, force)
            r = reward(p2)
            done = p2 >= GOAL
            bs_p[head] = p
            bs_v[head] = vel
            ba[head] = a
            br[head] = r
            bn_p[head] = p2
            bn_v[head] = v2
            bd[head] = done
            head = (head + 1) % capacity
            if size < capacity:
                perm[size] = size
                size += 1
            ret += r
            if a != 1:
                fuel += 1
            steps += 1
            if size >= batch:
                # partial Fisher-Yates: distinct indices without replacement
                for i in range(batch):
                    j = i + np.random.randint(0, size - i)
                    tmp = perm[i]
                    perm[i] = perm[j]
                    perm[j] = tmp
                    k = perm[i]
                    s_p[i] = bs_p[k]
                    s_v[i] = bs_v[k]
                    acts[i] = ba[k]
                    rews[i] = br[k]
                    n_p[i] = bn_p[k]
                    n_v[i] = bn_v[k]
                    dns[i] = bd[k]
                loss, _, _ = loss_grad(params, tparams, teacher, use_teacher, hidden, gamma,
                                       s_p, s_v, acts, rews, n_p, n_v, dns,
                                       tau, lambda_kd, fkind, eta, grad)
                updates += 1
                adam_update(params, grad, m, v, updates, lr, 0.9, 0.999, 1e-8)
                loss_sum += loss
            p = p2
            vel = v2
            if done:
                reached = True
                break
        if (ep + 1) % sync_every == 0:
            tparams[:] = params
        ep_steps[ep] = steps
        ep_fuel[ep] = fuel
        ep_return[ep] = ret
        ep_reached[ep] = reached
        ep_loss[ep] = loss_sum / steps
    return updates


@numba.njit(cache=True)
def rollout(params, hidden, p, vel, gravity, force, max_steps):
    """Greedy episode from (p, vel); returns (steps, fuel, return, reached)."""
    h = np.empty(hidden)
    z = np.empty(hidden)
    q = np.empty(NUM_ACTIONS)
    fuel = 0
    ret = 0.0
    for t in range(1, max_steps + 1):
        q_values(params, hidden, p, vel, h, z, q)
        a = greedy(q)
        p, vel = step(p, vel, a, gravity, force)
        if a != 1:
            fuel += 1
        ret += reward(p)
        if p >= GOAL:
            return t, fuel, ret, True
    return max_steps, fuel, ret, False
