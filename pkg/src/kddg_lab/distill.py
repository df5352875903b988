"""Distillation losses, the gradient filter and the student training loop.

Losses here work on logits and return their gradient with respect to those
logits, which is what :func:`kddg_lab.nn.grad` consumes.  The gradient
filter is realised as a per-sample loss weight computed from the student's
(temperature 1) probability on the ground-truth class and held constant
during backpropagation, so a sample's gradient is scaled by exactly the
filter value.
"""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from .errors import RejectedInputError, RejectedParameterError
from .records import MetricsLog
from .synthdata import stack

FILTER_KINDS = ("none", "smooth", "hard")
METHODS = ("deepall", "kd", "gradfilter", "kddg", "softlabel")


@dataclass
class FilterSpec:
    kind: str = "smooth"
    eta: float = 0.999

    def __post_init__(self):
        if self.kind not in FILTER_KINDS:
            raise RejectedParameterError(f"unknown filter kind {self.kind!r}")
        if not 0.0 < self.eta < 1.0:
            raise RejectedParameterError(f"eta must lie in (0, 1), got {self.eta}")


@dataclass
class DistillConfig:
    tau: float = 2.0
    lambda_kd: float = 0.5
    lambda_ce: float = 0.5
    filter: FilterSpec = field(default_factory=FilterSpec)
    teacher_gate: bool = True

    def __post_init__(self):
        if isinstance(self.filter, dict):
            self.filter = FilterSpec(**self.filter)
        self.validate()

    def validate(self):
        if not self.tau > 0:
            raise RejectedParameterError(f"tau must be positive, got {self.tau}")
        if self.lambda_kd < 0 or self.lambda_ce < 0:
            raise RejectedParameterError("loss weights must be nonnegative")
        if not self.lambda_kd + self.lambda_ce > 0:
            raise RejectedParameterError("at least one loss weight must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "DistillConfig":
        data = dict(data)
        unknown = set(data) - {"tau", "lambda_kd", "lambda_ce", "filter", "teacher_gate"}
        if unknown:
            raise RejectedParameterError(f"unknown distillation keys: {sorted(unknown)}")
        filt = data.pop("filter", {})
        bad = set(filt) - {"kind", "eta"}
        if bad:
            raise RejectedParameterError(f"unknown filter keys: {sorted(bad)}")
        return cls(filter=FilterSpec(**filt), **data)


@dataclass
class BatchLossReport:
    total: float
    kd_component: float
    ce_component: float
    per_sample_weight: np.ndarray
    gated_out: np.ndarray


# ----------------------------------------------------------------------------
# elementary pieces

def _check_pair(teacher_logits, student_logits):
    t = np.asarray(teacher_logits, dtype=np.float64)
    s = np.asarray(student_logits, dtype=np.float64)
    if t.shape != s.shape:
        raise RejectedInputError(f"teacher logits {t.shape} and student logits {s.shape} differ")
    if t.shape[-1] < 2:
        raise RejectedInputError("need at least two classes")
    return t, s


def kd_loss_per_sample(teacher_logits, student_logits, tau: float):
    """``tau**2 * sum_i p_t^i log(1/p_s^i)`` at temperature ``tau``.

    Works on single vectors (returns a float) or on ``(n, C)`` batches
    (returns one value per row).
    """
    t, s = _check_pair(teacher_logits, student_logits)
    p_t = nn.softmax_temp(t, tau)
    loss = -(tau ** 2) * (p_t * nn.log_softmax_temp(s, tau)).sum(axis=-1)
    return float(loss) if loss.ndim == 0 else loss


def kd_grad_logits(teacher_logits, student_logits, tau: float) -> np.ndarray:
    """Derivative of :func:`kd_loss_per_sample` with respect to the student logits."""
    t, s = _check_pair(teacher_logits, student_logits)
    return tau * (nn.softmax_temp(s, tau) - nn.softmax_temp(t, tau))


def _labels(y, n, num_classes):
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    if y.shape[0] != n:
        raise RejectedInputError(f"{y.shape[0]} labels for {n} samples")
    if n and (y.min() < 0 or y.max() >= num_classes):
        raise RejectedInputError(f"labels must lie in [0, {num_classes})")
    return y


def cross_entropy_per_sample(logits, y) -> np.ndarray:
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    y = _labels(y, logits.shape[0], logits.shape[1])
    return -nn.log_softmax_temp(logits, 1.0)[np.arange(y.shape[0]), y]


def _ce_parts(logits, y, scale):
    """Per-sample CE, probabilities and ``scale``-weighted logit gradient from one log-softmax."""
    rows = np.arange(y.shape[0])
    logp = nn.log_softmax_temp(logits, 1.0)
    probs = np.exp(logp)
    d = probs.copy()
    d[rows, y] -= 1.0
    return -logp[rows, y], probs, d * scale[:, None]


def cross_entropy_loss(logits, y, sample_weights=None):
    """Mean (optionally weighted) cross-entropy and its logit gradient."""
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    n = logits.shape[0]
    if n == 0:
        raise RejectedInputError("empty batch")
    y = _labels(y, n, logits.shape[1])
    sw = np.ones(n) if sample_weights is None else np.asarray(sample_weights, dtype=np.float64)
    losses, _, dlogits = _ce_parts(logits, y, sw / n)
    return float((sw * losses).sum() / n), dlogits


def soft_cross_entropy_loss(logits, targets, sample_weights=None):
    """Mean cross-entropy against target distributions (rows of ``targets``)."""
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    targets = np.asarray(targets, dtype=np.float64)
    n = logits.shape[0]
    if n == 0:
        raise RejectedInputError("empty batch")
    if targets.shape != logits.shape:
        raise RejectedInputError("targets must match logits")
    sw = np.ones(n) if sample_weights is None else np.asarray(sample_weights, dtype=np.float64)
    losses = -(targets * nn.log_softmax_temp(logits, 1.0)).sum(axis=1)
    dlogits = nn.softmax_temp(logits, 1.0) * targets.sum(axis=1, keepdims=True) - targets
    return float((sw * losses).sum() / n), dlogits * (sw / n)[:, None]


def grad_filter_weight(p, spec: FilterSpec):
    """Filter weight for ground-truth confidence ``p`` (scalar or array).

    smooth: 1 up to eta, ``((eta + 1 - 2p) / (1 - eta))**2`` up to
    ``(1 + eta) / 2``, then 0.  hard: 1 up to eta, then 0.  none: 1.
    """
    arr = np.asarray(p, dtype=np.float64)
    # min/max comparisons are False for NaN, so this also rejects non-finite input
    if arr.size and not (arr.min() >= 0.0 and arr.max() <= 1.0):
        raise RejectedInputError("confidence must lie in [0, 1]")
    eta = spec.eta
    if spec.kind == "none":
        w = np.ones_like(arr)
    elif spec.kind == "hard":
        w = (arr <= eta).astype(np.float64)
    else:
        # the ratio is >= 1 up to eta and < 0 past the knee, so clipping gives all three pieces
        w = np.clip((eta + 1.0 - 2.0 * arr) / (1.0 - eta), 0.0, 1.0) ** 2
    return float(w) if w.ndim == 0 else w


def teacher_gate(teacher_probs, y: int) -> bool:
    """Keep the distillation term only when the teacher's top class is ``y``.

    Ties go to the lowest class index.
    """
    probs = np.asarray(teacher_probs, dtype=np.float64).reshape(-1)
    if not 0 <= int(y) < probs.shape[0]:
        raise RejectedInputError(f"class index {y} outside [0, {probs.shape[0]})")
    return int(np.argmax(probs)) == int(y)


def gate_mask(teacher_logits, y) -> np.ndarray:
    """Vectorised :func:`teacher_gate` over a batch (argmax of logits = argmax of probs)."""
    t = np.atleast_2d(np.asarray(teacher_logits, dtype=np.float64))
    y = _labels(y, t.shape[0], t.shape[1])
    return t.argmax(axis=1) == y


def label_smooth(y: int, alpha: float, num_classes: int) -> np.ndarray:
    if num_classes < 2:
        raise RejectedInputError("need at least two classes")
    if not 0 <= int(y) < num_classes:
        raise RejectedInputError(f"class index {y} outside [0, {num_classes})")
    if not 0.0 <= alpha <= 1.0:
        raise RejectedParameterError(f"alpha must lie in [0, 1], got {alpha}")
    out = np.full(num_classes, alpha / num_classes)
    out[int(y)] += 1.0 - alpha
    return out


def smoothed_targets(y, alpha: float, num_classes: int) -> np.ndarray:
    if not 0.0 <= alpha <= 1.0:
        raise RejectedParameterError(f"alpha must lie in [0, 1], got {alpha}")
    y = np.asarray(y, dtype=np.int64)
    out = np.full((y.shape[0], num_classes), alpha / num_classes)
    out[np.arange(y.shape[0]), y] += 1.0 - alpha
    return out


# ----------------------------------------------------------------------------
# batch objectives

def vanilla_student_loss(inputs, y, teacher: nn.Network, student: nn.Network,
                         tau: float, lambda1: float, lambda2: float) -> float:
    """``lambda1 * CE + lambda2 * KD``, both batch means, no filter and no gate."""
    if teacher.in_dim != student.in_dim:
        raise RejectedInputError("teacher and student take different input sizes")
    x = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    if x.shape[0] == 0:
        raise RejectedInputError("empty batch")
    s = nn.forward(student, x)
    t = nn.forward(teacher, x)
    ce, _ = cross_entropy_loss(s, y)
    kd = float(np.mean(kd_loss_per_sample(t, s, tau)))
    return lambda1 * ce + lambda2 * kd


def kddg_loss_from_logits(student_logits, teacher_logits, y, cfg: DistillConfig,
                          sample_weights=None):
    """Filtered, gated distillation objective on precomputed logits.

    Returns ``(report, dloss/dstudent_logits)``.  ``teacher_logits`` may be
    None when ``lambda_kd == 0``.
    """
    cfg.validate()
    s = np.atleast_2d(np.asarray(student_logits, dtype=np.float64))
    n, c = s.shape
    if n == 0:
        raise RejectedInputError("empty batch")
    y = _labels(y, n, c)
    sw = np.ones(n) if sample_weights is None else np.asarray(sample_weights, dtype=np.float64)
    rows = np.arange(n)

    # CE gradient is computed unweighted first; the filter needs the probabilities
    ce_losses, probs, d_ce = _ce_parts(s, y, np.full(n, 1.0 / n))
    weight = grad_filter_weight(probs[rows, y], cfg.filter)
    ce_scale = weight * sw
    ce_component = float((ce_scale * ce_losses).sum() / n)
    d_ce = d_ce * ce_scale[:, None]

    gated_out = np.zeros(n, dtype=bool)
    if teacher_logits is None:
        if cfg.lambda_kd != 0:
            raise RejectedInputError("teacher logits are required when lambda_kd > 0")
        kd_component = 0.0
        d_kd = np.zeros_like(s)
    else:
        t, _ = _check_pair(teacher_logits, s)
        if cfg.teacher_gate:
            gated_out = t.argmax(axis=1) != y
        kd_scale = np.where(gated_out, 0.0, weight * sw)
        tau = cfg.tau
        log_ps = nn.log_softmax_temp(s, tau)
        p_t = nn.softmax_temp(t, tau)
        kd_losses = -(tau ** 2) * (p_t * log_ps).sum(axis=1)
        kd_component = float((kd_scale * kd_losses).sum() / n)
        d_kd = (tau * (np.exp(log_ps) - p_t)) * (kd_scale / n)[:, None]

    total = cfg.lambda_kd * kd_component + cfg.lambda_ce * ce_component
    dlogits = cfg.lambda_kd * d_kd + cfg.lambda_ce * d_ce
    report = BatchLossReport(total, kd_component, ce_component, weight, gated_out)
    return report, dlogits


def kddg_batch_loss(inputs, y, teacher: nn.Network, student: nn.Network,
                    cfg: DistillConfig, sample_weights=None) -> BatchLossReport:
    if teacher.in_dim != student.in_dim or teacher.out_dim != student.out_dim:
        raise RejectedInputError("teacher and student are not dimension-compatible")
    x = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    report, _ = kddg_loss_from_logits(nn.forward(student, x), nn.forward(teacher, x), y, cfg,
                                      sample_weights)
    return report


def method_objective(method: str, cfg: DistillConfig, alpha: float = 0.1):
    """Loss closure ``fn(student_logits, teacher_logits, y, weights) -> (loss, dlogits, kd, ce)``.

    deepall: plain cross-entropy.  kd: ``lambda_ce * CE + lambda_kd * KD``
    without filter or gate.  gradfilter: filtered cross-entropy, no
    teacher.  kddg: the full filtered and gated objective.  softlabel:
    cross-entropy against label-smoothed targets.
    """
    if method == "deepall":
        def fn(s, t, y, w):
            loss, d = cross_entropy_loss(s, y, w)
            return loss, d, 0.0, loss
    elif method == "softlabel":
        if not 0.0 <= alpha <= 1.0:
            raise RejectedParameterError(f"alpha must lie in [0, 1], got {alpha}")

        def fn(s, t, y, w):
            loss, d = soft_cross_entropy_loss(s, smoothed_targets(y, alpha, s.shape[1]), w)
            return loss, d, 0.0, loss
    elif method in ("kd", "gradfilter", "kddg"):
        if method == "kd":
            run_cfg = DistillConfig(cfg.tau, cfg.lambda_kd, cfg.lambda_ce, FilterSpec("none", cfg.filter.eta), False)
        elif method == "gradfilter":
            run_cfg = DistillConfig(cfg.tau, 0.0, 1.0, cfg.filter, False)
        else:
            run_cfg = cfg

        def fn(s, t, y, w):
            rep, d = kddg_loss_from_logits(s, t, y, run_cfg, w)
            return rep.total, d, rep.kd_component, rep.ce_component
    else:
        raise RejectedParameterError(f"unknown method {method!r}")
    return fn


def needs_teacher(method: str, cfg: DistillConfig) -> bool:
    if method in ("kd", "kddg"):
        return cfg.lambda_kd > 0 or method == "kd"
    return False


# ----------------------------------------------------------------------------
# training

def _train(sources, init_net: nn.Network, objective, teacher: nn.Network | None,
           opt: nn.OptimizerState, epochs: int, seed, batch_size: int,
           cwd_per_iteration: bool = False):
    x, y, _, _, w = stack(sources)
    if x.shape[1] != init_net.in_dim:
        raise RejectedInputError(f"data has {x.shape[1]} features, network expects {init_net.in_dim}")
    if epochs < 0 or batch_size < 1:
        raise RejectedParameterError("epochs must be >= 0 and batch_size >= 1")
    t_logits = nn.forward(teacher, x) if teacher is not None else None
    net = init_net.copy()
    params = net.params()
    rng = np.random.default_rng([int(seed), 31337])
    log = MetricsLog()
    log.add_snapshot(params)
    n = x.shape[0]
    start = time.perf_counter()
    for epoch in range(epochs):
        order = rng.permutation(n)
        tot = kd_sum = ce_sum = 0.0
        correct = 0
        for lo in range(0, n, batch_size):
            idx = order[lo:lo + batch_size]
            xb, yb, wb = x[idx], y[idx], w[idx]
            tb = t_logits[idx] if t_logits is not None else None
            logits, cache = nn.forward_layers(net.layers, xb, keep=True)
            loss, dlogits, kd, ce = objective(logits, tb, yb, wb)
            g, _ = nn.backward_layers(net.layers, cache, dlogits)
            new = nn.optimizer_step(opt, params, g, epoch)
            if cwd_per_iteration:
                log.step_path_length += float(np.linalg.norm(new - params))
            params = new
            net.set_params(params)
            m = idx.shape[0]
            tot += loss * m
            kd_sum += kd * m
            ce_sum += ce * m
            correct += int((logits.argmax(axis=1) == yb).sum())
            log.iterations += 1
        log.loss.append(tot / n)
        log.kd.append(kd_sum / n)
        log.ce.append(ce_sum / n)
        log.train_acc.append(correct / n)
        log.add_snapshot(params)
    log.seconds = time.perf_counter() - start
    return net, log


def train_deepall(sources, sizes, opt: nn.OptimizerState, epochs: int, seed,
                  batch_size: int = 64, cwd_per_iteration: bool = False):
    """Cross-entropy training on the concatenated source domains."""
    init = nn.Network.init(sizes, seed=[int(seed), 1])
    return _train(sources, init, method_objective("deepall", DistillConfig()), None,
                  opt, epochs, seed, batch_size, cwd_per_iteration)


def train_student(sources, teacher: nn.Network, cfg: DistillConfig, opt: nn.OptimizerState,
                  epochs: int, seed, batch_size: int = 64, method: str = "kddg",
                  alpha: float = 0.1, sizes=None, cwd_per_iteration: bool = False):
    """Train a fresh student of the teacher's architecture with ``method``'s loss.

    The student is initialised exactly as :func:`train_deepall` would
    initialise a network for the same seed.
    """
    if sizes is None:
        sizes = [teacher.in_dim] + [layer.out_dim for layer in teacher.layers]
    if teacher.in_dim != sizes[0]:
        raise RejectedInputError("teacher and student take different input sizes")
    init = nn.Network.init(sizes, seed=[int(seed), 1])
    objective = method_objective(method, cfg, alpha)
    use_teacher = teacher if needs_teacher(method, cfg) else None
    return _train(sources, init, objective, use_teacher, opt, epochs, seed, batch_size,
                  cwd_per_iteration)


def accuracy(net: nn.Network, x, y) -> float:
    return float((nn.forward(net, x).argmax(axis=1) == np.asarray(y)).mean())
