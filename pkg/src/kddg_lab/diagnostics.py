"""Training diagnostics: cumulative weight distance, domain leakage, confidence histograms."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nn
from .errors import RejectedInputError, RejectedParameterError


def cwd(snapshots) -> float:
    """Cumulative weight distance: sum of L2 steps between consecutive snapshots."""
    snaps = [np.asarray(s, dtype=np.float64).reshape(-1) for s in snapshots]
    if not snaps:
        raise RejectedInputError("empty snapshot series")
    size = snaps[0].shape[0]
    if any(s.shape[0] != size for s in snaps):
        raise RejectedInputError("snapshots have different lengths")
    return float(sum(np.linalg.norm(b - a) for a, b in zip(snaps[:-1], snaps[1:])))


def load_snapshot_series(directory) -> list[np.ndarray]:
    """Read every ``*.ckpt`` in ``directory`` (sorted by name) as flat parameter vectors."""
    paths = sorted(Path(directory).glob("*.ckpt"))
    if not paths:
        raise RejectedInputError(f"no checkpoints in {directory}")
    return [nn.flatten_layers(nn.read_checkpoint(p)[1]) for p in paths]


@dataclass
class FeatureDump:
    features: np.ndarray
    domains: np.ndarray

    def __post_init__(self):
        self.features = np.atleast_2d(np.asarray(self.features, dtype=np.float64))
        self.domains = np.asarray(self.domains, dtype=np.int64).reshape(-1)
        if self.features.shape[0] != self.domains.shape[0]:
            raise RejectedInputError("feature rows and domain labels differ in number")
        if self.domains.size and self.domains.min() < 0:
            raise RejectedInputError("domain ids must be nonnegative")


def extract_features(net: nn.Network, inputs) -> np.ndarray:
    """Penultimate-layer activations of ``net``."""
    if len(net.layers) < 2:
        raise RejectedInputError("feature extraction needs a network with at least two layers")
    x = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    if x.shape[1] != net.in_dim:
        raise RejectedInputError(f"inputs have {x.shape[1]} columns, network expects {net.in_dim}")
    return nn.forward_layers(net.layers[:-1], x)


def entropy(probs, axis=-1):
    p = np.asarray(probs, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, -p * np.log(p), 0.0)
    return terms.sum(axis=axis)


def _standardize(z):
    mu = z.mean(axis=0)
    sd = z.std(axis=0)
    sd[sd == 0] = 1.0
    return (z - mu) / sd


def fit_softmax_regression(x, y, num_classes: int, reg: float = 1e-3,
                           max_iter: int = 100, tol: float = 1e-10):
    """L2-regularised multinomial logistic regression fitted by damped Newton steps.

    The bias column is not penalised.  Returns a ``(dim + 1, num_classes)``
    coefficient matrix whose last row is the bias.
    """
    n, m = x.shape
    xb = np.hstack([x, np.ones((n, 1))])
    k = num_classes
    onehot = np.eye(k)[y]
    penalty = np.full(m + 1, reg)
    penalty[-1] = 0.0
    w = np.zeros((m + 1, k))

    def objective(w):
        logits = xb @ w
        lse = np.log(np.exp(logits - logits.max(1, keepdims=True)).sum(1)) + logits.max(1)
        return (lse - (logits * onehot).sum(1)).mean() + 0.5 * (penalty[:, None] * w * w).sum()

    f = objective(w)
    for _ in range(max_iter):
        p = nn.softmax_temp(xb @ w)
        g = xb.T @ (p - onehot) / n + penalty[:, None] * w
        # Hessian over the flattened (feature, class) coefficients
        h = np.zeros(((m + 1) * k, (m + 1) * k))
        for a in range(k):
            for b in range(a, k):
                coef = p[:, a] * ((a == b) - p[:, b])
                block = (xb * coef[:, None]).T @ xb / n
                h[a::k, b::k] = block
                if a != b:
                    h[b::k, a::k] = block
        # the softmax Hessian is singular along the all-classes direction; the
        # ridge keeps the solve well posed without moving the optimum
        h += np.diag(np.repeat(penalty, k) + 1e-10)
        step = np.linalg.solve(h, g.ravel()).reshape(w.shape)
        t = 1.0
        while True:
            w_new = w - t * step
            f_new = objective(w_new)
            if f_new <= f - 1e-4 * t * (g * step).sum() or t < 1e-8:
                break
            t *= 0.5
        converged = f - f_new < tol
        w, f = w_new, f_new
        if converged:
            break
    return w


def predict_proba(w, x):
    return nn.softmax_temp(np.hstack([x, np.ones((x.shape[0], 1))]) @ w)


def stratified_folds(domains, folds: int, seed) -> np.ndarray:
    """Fold index per sample, dealing each domain's shuffled samples round-robin."""
    rng = np.random.default_rng([int(seed), 271828])
    out = np.empty(domains.shape[0], dtype=np.int64)
    offset = 0
    for d in np.unique(domains):
        idx = np.flatnonzero(domains == d)
        idx = idx[rng.permutation(idx.shape[0])]
        out[idx] = (np.arange(idx.shape[0]) + offset) % folds
        offset += idx.shape[0]
    return out


def mi_estimate(dump: FeatureDump, folds: int = 5, seed=0, reg: float = 1e-3) -> float:
    """Mutual information between features and domain labels, in nats.

    ``H(Y_d)`` from empirical domain frequencies minus the mean entropy of
    out-of-fold posteriors from a regularised softmax domain classifier on
    standardised features; clamped below at zero.
    """
    if folds < 2:
        raise RejectedParameterError("need at least two folds")
    z, dom = dump.features, dump.domains
    labels, dom_idx, counts = np.unique(dom, return_inverse=True, return_counts=True)
    if labels.shape[0] <= 1:
        return 0.0
    if counts.min() < 2:
        raise RejectedInputError("every domain needs at least two samples for cross-validation")
    freq = counts / counts.sum()
    h_domain = float(entropy(freq))
    z = _standardize(z)
    fold = stratified_folds(dom_idx, folds, seed)
    k = labels.shape[0]
    post_entropy = np.empty(z.shape[0])
    for f in range(folds):
        test = fold == f
        if not test.any():
            continue
        train = ~test
        if np.unique(dom_idx[train]).shape[0] < k:
            raise RejectedInputError(f"fold {f} leaves a domain out of its training part")
        w = fit_softmax_regression(z[train], dom_idx[train], k, reg=reg)
        post_entropy[test] = entropy(predict_proba(w, z[test]))
    return max(0.0, h_domain - float(post_entropy.mean()))


def confidence_histogram(confidences, edges) -> np.ndarray:
    """Counts per bin ``(edges[i], edges[i+1]]``; the first bin also takes ``edges[0]``."""
    c = np.asarray(confidences, dtype=np.float64).reshape(-1)
    e = np.asarray(edges, dtype=np.float64).reshape(-1)
    if e.shape[0] < 2 or np.any(np.diff(e) <= 0):
        raise RejectedParameterError("bin edges must be strictly increasing")
    if e[0] > 0.0 or e[-1] < 1.0:
        raise RejectedParameterError("bin edges must cover [0, 1]")
    if np.any(c < 0.0) or np.any(c > 1.0):
        raise RejectedInputError("confidences must lie in [0, 1]")
    idx = np.searchsorted(e, c, side="left") - 1
    idx = np.clip(idx, 0, e.shape[0] - 2)
    return np.bincount(idx, minlength=e.shape[0] - 1)


def true_class_confidence(net: nn.Network, x, y) -> np.ndarray:
    p = nn.softmax_temp(nn.forward(net, x))
    return p[np.arange(p.shape[0]), np.asarray(y)]


# ----------------------------------------------------------------------------
# file exchange

def write_feature_dump(path, dump: FeatureDump) -> None:
    m = dump.features.shape[1]
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"feature_{j}" for j in range(m)] + ["domain_id"])
        for row, d in zip(dump.features, dump.domains):
            writer.writerow([repr(float(v)) for v in row] + [int(d)])


def read_feature_dump(path) -> FeatureDump:
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if "domain_id" not in header:
            raise RejectedInputError(f"{path}: no domain_id column")
        di = header.index("domain_id")
        cols = [i for i, h in enumerate(header) if i != di]
        rows = list(reader)
    feats = np.array([[float(r[i]) for i in cols] for r in rows]).reshape(len(rows), len(cols))
    return FeatureDump(feats, np.array([int(r[di]) for r in rows], dtype=np.int64))
