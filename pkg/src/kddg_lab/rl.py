"""Mountain car with a configurable gravity coefficient, a dueling DQN agent
and its policy-distillation variant.

The network input is the (position, velocity) pair rescaled to roughly
[-1, 1] by :func:`state_features`; everything else follows the classic
mountain-car dynamics with ``gravity`` in place of the 0.0025 coefficient.
"""
from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _rlkernels as _k
from . import nn
from .distill import DistillConfig, grad_filter_weight
from .errors import RejectedInputError, RejectedParameterError
from .records import MetricsLog

MIN_POSITION, MAX_POSITION = -1.2, 0.6
MAX_SPEED = 0.07
GOAL_POSITION = 0.5
PUSH_LEFT, NO_PUSH, PUSH_RIGHT = 0, 1, 2
NUM_ACTIONS = 3
PAPER_GRAVITIES = (0.0019, 0.0022, 0.0025, 0.0028, 0.0031)
SOURCE_GRAVITY = 0.0025


@dataclass(frozen=True)
class CarState:
    position: float
    velocity: float

    def in_bounds(self) -> bool:
        return (MIN_POSITION <= self.position <= MAX_POSITION
                and -MAX_SPEED <= self.velocity <= MAX_SPEED)


@dataclass(frozen=True)
class EnvConfig:
    gravity: float = SOURCE_GRAVITY
    force: float = 0.001
    max_steps: int = 1000

    def __post_init__(self):
        if not self.gravity > 0 or not self.force > 0:
            raise RejectedParameterError("gravity and force must be positive")
        if self.max_steps < 1:
            raise RejectedParameterError("max_steps must be at least 1")


@dataclass(frozen=True)
class Transition:
    state: CarState
    action: int
    reward: float
    next_state: CarState
    done: bool


def reward(position: float) -> float:
    """Shaped reward of the position the car reached."""
    if position >= GOAL_POSITION:
        return 100.0
    if position > -0.4:
        return 10.0 * (0.4 + position) ** 3
    return -0.1


def _step(p, v, a, gravity, force):
    v = v + (a - 1) * force - gravity * math.cos(3.0 * p)
    v = min(max(v, -MAX_SPEED), MAX_SPEED)
    p = p + v
    p = min(max(p, MIN_POSITION), MAX_POSITION)
    if p == MIN_POSITION and v < 0:
        v = 0.0
    return p, v


def env_step(s: CarState, action: int, cfg: EnvConfig):
    """Advance one tick; returns ``(next_state, reward, done)``."""
    if not s.in_bounds():
        raise RejectedInputError(f"state {s} is outside the track bounds")
    if action not in (PUSH_LEFT, NO_PUSH, PUSH_RIGHT):
        raise RejectedInputError(f"unknown action {action!r}")
    p, v = _step(s.position, s.velocity, action, cfg.gravity, cfg.force)
    return CarState(p, v), reward(p), p >= GOAL_POSITION


def reset_state(rng: np.random.Generator) -> CarState:
    return CarState(float(rng.uniform(-0.6, -0.4)), 0.0)


def state_features(position, velocity) -> np.ndarray:
    return np.array([(position + 0.3) / 0.9, velocity / MAX_SPEED])


class ReplayBuffer:
    """Fixed-capacity FIFO ring of transitions, stored column-wise."""

    def __init__(self, capacity: int = 500):
        if capacity < 1:
            raise RejectedParameterError("capacity must be positive")
        self.capacity = capacity
        self.states = np.zeros((capacity, 2))
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.rewards = np.zeros(capacity)
        self.next_states = np.zeros((capacity, 2))
        self.dones = np.zeros(capacity, dtype=bool)
        self._next = 0
        self.size = 0
        self.pushes = 0

    def __len__(self):
        return self.size

    def push(self, state, action, reward_value, next_state, done):
        i = self._next
        self.states[i] = state
        self.actions[i] = action
        self.rewards[i] = reward_value
        self.next_states[i] = next_state
        self.dones[i] = done
        self._next = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)
        self.pushes += 1

    def push_transition(self, tr: Transition):
        self.push((tr.state.position, tr.state.velocity), tr.action, tr.reward,
                  (tr.next_state.position, tr.next_state.velocity), tr.done)

    def oldest(self):
        """Raw (position, velocity) of the oldest stored transition's state."""
        if self.size == 0:
            raise RejectedInputError("empty buffer")
        i = self._next if self.size == self.capacity else 0
        return tuple(self.states[i])

    def sample(self, batch: int, rng: np.random.Generator):
        if batch > self.size:
            raise RejectedInputError(f"cannot draw {batch} from {self.size} transitions")
        idx = rng.choice(self.size, size=batch, replace=False)
        return (self.states[idx], self.actions[idx], self.rewards[idx],
                self.next_states[idx], self.dones[idx])


class QNetwork:
    """Shared ReLU trunk feeding a scalar mean head and a zero-centred action head.

    All parameters live in one flat vector (trunk, mean head, centred head;
    weights before biases) and the weight matrices are views into it.
    """

    def __init__(self, params, in_dim: int = 2, hidden: int = 64, actions: int = NUM_ACTIONS):
        self.in_dim, self.hidden, self.actions = in_dim, hidden, actions
        self.params = np.array(params, dtype=np.float64)
        if self.params.shape != (self.count(in_dim, hidden, actions),):
            raise RejectedInputError("parameter vector has the wrong length")
        self._bind()

    @staticmethod
    def count(in_dim, hidden, actions):
        return in_dim * hidden + hidden + hidden + 1 + hidden * actions + actions

    def _bind(self):
        p, d, h, a = self.params, self.in_dim, self.hidden, self.actions
        pos = 0

        def take(shape):
            nonlocal pos
            size = int(np.prod(shape))
            view = p[pos:pos + size].reshape(shape)
            pos += size
            return view

        self.w1, self.b1 = take((d, h)), take((h,))
        self.wm, self.bm = take((h, 1)), take((1,))
        self.wc, self.bc = take((h, a)), take((a,))

    @classmethod
    def init(cls, seed=None, rng=None, in_dim=2, hidden=64, actions=NUM_ACTIONS):
        if rng is None:
            rng = np.random.default_rng(seed)
        layers = [nn.glorot_layer(in_dim, hidden, rng, "relu"),
                  nn.glorot_layer(hidden, 1, rng, "identity"),
                  nn.glorot_layer(hidden, actions, rng, "identity")]
        return cls(nn.flatten_layers(layers), in_dim, hidden, actions)

    @classmethod
    def from_layers(cls, layers):
        trunk, mean, centred = layers
        return cls(nn.flatten_layers(layers), trunk.in_dim, trunk.out_dim, centred.out_dim)

    @property
    def layers(self):
        return [nn.Layer(self.w1.copy(), self.b1.copy(), "relu"),
                nn.Layer(self.wm.copy(), self.bm.copy(), "identity"),
                nn.Layer(self.wc.copy(), self.bc.copy(), "identity")]

    def copy(self) -> "QNetwork":
        return QNetwork(self.params, self.in_dim, self.hidden, self.actions)

    def load(self, params):
        self.params[:] = params

    def forward(self, x, keep=False):
        z = x @ self.w1 + self.b1
        h = np.maximum(z, 0.0)
        mean = h @ self.wm + self.bm
        c = h @ self.wc + self.bc
        q = mean + (c - c.mean(axis=1, keepdims=True))
        return (q, (x, z, h)) if keep else q

    def centred(self, x):
        h = np.maximum(x @ self.w1 + self.b1, 0.0)
        c = h @ self.wc + self.bc
        return c - c.mean(axis=1, keepdims=True)

    def backward(self, cache, dq):
        x, z, h = cache
        d_mean = dq.sum(axis=1, keepdims=True)
        d_c = dq - dq.mean(axis=1, keepdims=True)
        dh = d_mean @ self.wm.T + d_c @ self.wc.T
        dz = dh * (z > 0.0)
        return np.concatenate([
            (x.T @ dz).ravel(), dz.sum(axis=0),
            (h.T @ d_mean).ravel(), d_mean.sum(axis=0),
            (h.T @ d_c).ravel(), d_c.sum(axis=0),
        ])


def q_forward(qnet: QNetwork, s: CarState) -> np.ndarray:
    if not s.in_bounds():
        raise RejectedInputError(f"state {s} is outside the track bounds")
    return qnet.forward(state_features(s.position, s.velocity)[None, :])[0]


def bellman_target(tr: Transition, target_net: QNetwork, gamma: float) -> float:
    if not 0.0 <= gamma <= 1.0:
        raise RejectedParameterError("gamma must lie in [0, 1]")
    if tr.done:
        return float(tr.reward)
    return float(tr.reward + gamma * q_forward(target_net, tr.next_state).max())


def save_qnetwork(path, qnet: QNetwork):
    nn.write_checkpoint(path, qnet.layers, arch="dueling")


def load_qnetwork(path) -> QNetwork:
    arch, layers, _ = nn.read_checkpoint(path)
    if arch != "dueling":
        raise RejectedInputError(f"{path} holds a {arch!r} network, not a dueling Q-network")
    return QNetwork.from_layers(layers)


# ----------------------------------------------------------------------------
# training

@dataclass
class DQNHyper:
    episodes: int = 2000
    batch: int = 10
    lr: float = 1e-4
    gamma: float = 0.9
    epsilon: float = 0.05
    sync_every: int = 10
    capacity: int = 500
    hidden: int = 64
    # step cap for training episodes; evaluation uses EnvConfig.max_steps
    train_max_steps: int = 1000

    def __post_init__(self):
        for name in ("episodes", "batch", "sync_every", "capacity", "hidden", "train_max_steps"):
            if getattr(self, name) < 1:
                raise RejectedParameterError(f"{name} must be positive")
        if not self.lr > 0:
            raise RejectedParameterError("lr must be positive")
        if not 0.0 <= self.gamma <= 1.0 or not 0.0 <= self.epsilon <= 1.0:
            raise RejectedParameterError("gamma and epsilon must lie in [0, 1]")
        if self.batch > self.capacity:
            raise RejectedParameterError("batch larger than the replay capacity")


def dqn_loss(online: QNetwork, target: QNetwork, batch, gamma: float,
             teacher: QNetwork | None = None, distill_cfg: DistillConfig | None = None):
    """Bellman MSE plus, when a teacher is given, ``lambda_kd`` times the filtered KD term.

    Returns ``(loss, bellman, kd, flat_gradient)``.
    """
    s, a, r, s2, done = batch
    n = s.shape[0]
    xs = np.column_stack([(s[:, 0] + 0.3) / 0.9, s[:, 1] / MAX_SPEED])
    xs2 = np.column_stack([(s2[:, 0] + 0.3) / 0.9, s2[:, 1] / MAX_SPEED])
    q, cache = online.forward(xs, keep=True)
    y = r + gamma * target.forward(xs2).max(axis=1) * (~done)
    rows = np.arange(n)
    err = q[rows, a] - y
    bellman = float((err ** 2).mean())
    dq = np.zeros_like(q)
    dq[rows, a] = 2.0 * err / n
    kd = 0.0
    if teacher is not None:
        tau = distill_cfg.tau
        q_t = teacher.forward(xs)
        p_s = nn.softmax_temp(q, tau)
        p_t = nn.softmax_temp(q_t, tau)
        # filter on the student's own (temperature 1) top-action probability
        weight = grad_filter_weight(nn.softmax_temp(q, 1.0).max(axis=1), distill_cfg.filter)
        per = -(tau ** 2) * (p_t * nn.log_softmax_temp(q, tau)).sum(axis=1)
        kd = float((weight * per).mean())
        dq = dq + distill_cfg.lambda_kd * (tau * (p_s - p_t) * (weight / n)[:, None])
        loss = bellman + distill_cfg.lambda_kd * kd
    else:
        loss = bellman
    return loss, bellman, kd, online.backward(cache, dq)


_FILTER_CODES = {"none": _k.FILTER_NONE, "smooth": _k.FILTER_SMOOTH, "hard": _k.FILTER_HARD}


def _kernel_seed(seed) -> int:
    return (int(seed) * 1_000_003 + 4242) % (2 ** 32)


def _run_dqn(cfg: EnvConfig, hyper: DQNHyper, seed, teacher=None, distill_cfg=None):
    online = QNetwork.init(seed=[int(seed), 1], hidden=hyper.hidden)
    target = online.copy()
    if distill_cfg is None:
        distill_cfg = DistillConfig(lambda_kd=0.0, lambda_ce=1.0)
    use_teacher = teacher is not None
    teacher_params = teacher.params if use_teacher else np.zeros(1)
    n = hyper.episodes
    steps = np.zeros(n, dtype=np.int64)
    fuel = np.zeros(n, dtype=np.int64)
    ret = np.zeros(n)
    reached = np.zeros(n, dtype=np.bool_)
    loss = np.zeros(n)
    counts = np.zeros(NUM_ACTIONS, dtype=np.int64)
    start = time.perf_counter()
    updates = _k.train_loop(
        online.params, target.params, teacher_params, use_teacher, hyper.hidden, _kernel_seed(seed),
        n, hyper.train_max_steps, hyper.batch, hyper.lr, hyper.gamma, hyper.epsilon,
        hyper.sync_every, hyper.capacity, cfg.gravity, cfg.force,
        float(distill_cfg.tau), float(distill_cfg.lambda_kd),
        _FILTER_CODES[distill_cfg.filter.kind], float(distill_cfg.filter.eta),
        steps, fuel, ret, reached, loss, counts)
    log = MetricsLog(iterations=int(updates), seconds=time.perf_counter() - start)
    log.action_counts = counts.tolist()
    log.loss = loss.tolist()
    log.episodes = [
        {"episode": i, "steps": int(steps[i]), "fuel": int(fuel[i]), "return": float(ret[i]),
         "reached_goal": bool(reached[i])}
        for i in range(n)
    ]
    log.target = target
    return online, log


def dqn_train(cfg: EnvConfig, hyper: DQNHyper | None = None, seed=0):
    """Train the baseline dueling DQN; returns ``(online_network, log)``."""
    return _run_dqn(cfg, hyper or DQNHyper(), seed)


def policy_distill_train(teacher_q: QNetwork, cfg: EnvConfig, hyper: DQNHyper | None = None,
                         distill_cfg: DistillConfig | None = None, seed=0):
    """DQN training with the teacher's softened Q-values as an extra distillation target.

    The loss is the Bellman MSE plus ``lambda_kd`` times the gradient-filtered
    distillation term; there is no teacher gate since no ground-truth action
    exists.  ``lambda_ce`` is not used.
    """
    if distill_cfg is None:
        distill_cfg = DistillConfig()
    hyper = hyper or DQNHyper()
    if teacher_q.hidden != hyper.hidden:
        raise RejectedInputError("teacher and student Q-networks differ in width")
    return _run_dqn(cfg, hyper, seed, teacher=teacher_q.copy(), distill_cfg=distill_cfg)


def run_episode(qnet: QNetwork, cfg: EnvConfig, start: CarState, policy=None):
    """Greedy (or ``policy(state) -> action``) rollout; returns (steps, fuel, return, reached)."""
    p, v = start.position, start.velocity
    if policy is None:
        steps, fuel, ret, reached = _k.rollout(qnet.params, qnet.hidden, p, v,
                                               cfg.gravity, cfg.force, cfg.max_steps)
        return int(steps), int(fuel), float(ret), bool(reached)
    fuel, ret = 0, 0.0
    for step in range(1, cfg.max_steps + 1):
        a = policy(CarState(p, v))
        p, v = _step(p, v, a, cfg.gravity, cfg.force)
        fuel += a != NO_PUSH
        ret += reward(p)
        if p >= GOAL_POSITION:
            return step, int(fuel), ret, True
    return cfg.max_steps, int(fuel), ret, False


def evaluate_episodes(qnet, cfg: EnvConfig, episodes: int, seed=0, policy=None):
    if episodes < 1:
        raise RejectedParameterError("need at least one episode")
    rng = np.random.default_rng([int(seed), 777])
    return [run_episode(qnet, cfg, reset_state(rng), policy) for _ in range(episodes)]


def evaluate_fuel(qnet, cfg: EnvConfig, episodes: int = 10, seed=0, policy=None):
    """Mean and (population) standard deviation of per-episode fuel under the greedy policy."""
    fuel = np.array([ep[1] for ep in evaluate_episodes(qnet, cfg, episodes, seed, policy)], dtype=float)
    return float(fuel.mean()), float(fuel.std())


def write_episode_log(path, episodes):
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["episode", "steps", "fuel", "return", "reached_goal"])
        for ep in episodes:
            writer.writerow([ep["episode"], ep["steps"], ep["fuel"], repr(float(ep["return"])),
                             int(bool(ep["reached_goal"]))])
