"""Synthetic multi-domain classification benchmark.

Every domain shares the same ``K`` Gaussian classes placed in a
two-dimensional signal plane (feature columns 0 and 1).  By default the
class means sit evenly spaced on a line through the origin, so a single
projection orders the classes for every rotation below 90 degrees; the
alternative circle layout has no such invariant once a rotation
approaches half the angular class spacing.  The remaining columns are
distractor noise.  A domain is the base distribution with its
class noise rescaled, the signal plane rotated by the domain's angle and a
domain-specific offset added to every column, so a domain-invariant signal
exists by construction while the distractor offsets identify the domain.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import RejectedInputError, RejectedParameterError


@dataclass
class DomainDataset:
    features: np.ndarray
    labels: np.ndarray
    original_labels: np.ndarray
    domain_id: int
    num_classes: int
    sample_weights: np.ndarray | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.original_labels = np.asarray(self.original_labels, dtype=np.int64)
        n = self.features.shape[0]
        if self.sample_weights is None:
            self.sample_weights = np.ones(n)
        self.sample_weights = np.asarray(self.sample_weights, dtype=np.float64)
        if self.features.ndim != 2:
            raise RejectedInputError("features must be a 2-D array")
        if not (self.labels.shape == self.original_labels.shape == self.sample_weights.shape == (n,)):
            raise RejectedInputError("labels, original labels and weights must have one entry per sample")
        for arr in (self.labels, self.original_labels):
            if n and (arr.min() < 0 or arr.max() >= self.num_classes):
                raise RejectedInputError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def noisy_mask(self) -> np.ndarray:
        return self.labels != self.original_labels

    def subset(self, index) -> "DomainDataset":
        index = np.asarray(index)
        return DomainDataset(self.features[index], self.labels[index], self.original_labels[index],
                             self.domain_id, self.num_classes, self.sample_weights[index])


def stack(datasets):
    """Concatenate datasets into ``(X, y, original_y, domain_ids, weights)``."""
    if not datasets:
        raise RejectedInputError("no datasets to stack")
    x = np.concatenate([d.features for d in datasets])
    y = np.concatenate([d.labels for d in datasets])
    y0 = np.concatenate([d.original_labels for d in datasets])
    dom = np.concatenate([np.full(len(d), d.domain_id, dtype=np.int64) for d in datasets])
    w = np.concatenate([d.sample_weights for d in datasets])
    return x, y, y0, dom, w


@dataclass
class BenchmarkSpec:
    num_domains: int = 4
    classes: int = 4
    dim: int = 16
    samples_per_domain: int = 2000
    angles_deg: list = field(default_factory=lambda: [0.0, 25.0, 50.0, 75.0])
    noise_scales: list = field(default_factory=lambda: [1.0, 1.0, 1.0, 1.0])
    # explicit per-domain offset vectors; drawn from the seed when None
    biases: list | None = None
    # "line": class means evenly spaced on the first signal axis, 2 * radius apart;
    # "circle": class means on a circle of this radius
    layout: str = "line"
    radius: float = 2.5
    plane_bias_scale: float = 0.25
    distractor_bias_scale: float = 1.0
    seed: int = 0

    def validate(self):
        if self.num_domains < 2:
            raise RejectedParameterError("need at least two domains")
        if self.classes < 2:
            raise RejectedParameterError("need at least two classes")
        if self.dim < 2:
            raise RejectedParameterError("feature dimension must be at least 2")
        if self.samples_per_domain < self.classes:
            raise RejectedParameterError("fewer samples than classes")
        if len(self.angles_deg) != self.num_domains or len(self.noise_scales) != self.num_domains:
            raise RejectedParameterError("angles and noise scales need one entry per domain")
        if len(set(float(a) for a in self.angles_deg)) != self.num_domains:
            raise RejectedParameterError("domain angles must be distinct")
        if any(not s > 0 for s in self.noise_scales):
            raise RejectedParameterError("noise scales must be positive")
        if self.biases is not None:
            b = np.asarray(self.biases, dtype=np.float64)
            if b.shape != (self.num_domains, self.dim):
                raise RejectedParameterError(f"biases must have shape ({self.num_domains}, {self.dim})")
        if self.layout not in ("circle", "line"):
            raise RejectedParameterError(f"unknown layout {self.layout!r}")
        if not self.radius > 0:
            raise RejectedParameterError("radius must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "BenchmarkSpec":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise RejectedParameterError(f"unknown benchmark keys: {sorted(unknown)}")
        return cls(**data)


def class_means(spec: BenchmarkSpec) -> np.ndarray:
    """Class centres in the signal plane, shape ``(K, 2)``."""
    k = spec.classes
    if spec.layout == "line":
        out = np.zeros((k, 2))
        out[:, 0] = (np.arange(k) - (k - 1) / 2.0) * 2.0 * spec.radius
        return out
    angles = 2 * np.pi * np.arange(k) / k
    return spec.radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)


def domain_biases(spec: BenchmarkSpec) -> np.ndarray:
    if spec.biases is not None:
        return np.asarray(spec.biases, dtype=np.float64)
    rng = np.random.default_rng([spec.seed, 7919])
    b = rng.normal(size=(spec.num_domains, spec.dim))
    b[:, :2] *= spec.plane_bias_scale
    b[:, 2:] *= spec.distractor_bias_scale
    return b


def sample_base(spec: BenchmarkSpec, labels: np.ndarray, rng: np.random.Generator):
    """Class means plus unit noise for the given labels; returns (means, noise)."""
    means = np.zeros((labels.shape[0], spec.dim))
    means[:, :2] = class_means(spec)[labels]
    return means, rng.normal(size=(labels.shape[0], spec.dim))


def _rotation(theta_deg: float) -> np.ndarray:
    t = math.radians(theta_deg)
    return np.array([[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]])


def balanced_labels(n: int, k: int, rng: np.random.Generator) -> np.ndarray:
    labels = np.arange(n) % k
    return rng.permutation(labels)


def gen_domains(spec: BenchmarkSpec) -> list[DomainDataset]:
    spec.validate()
    biases = domain_biases(spec)
    out = []
    for d in range(spec.num_domains):
        rng = np.random.default_rng([spec.seed, d])
        labels = balanced_labels(spec.samples_per_domain, spec.classes, rng)
        means, noise = sample_base(spec, labels, rng)
        x = means + spec.noise_scales[d] * noise
        # row vectors: x_plane @ R.T rotates each sample by the domain angle
        x[:, :2] = x[:, :2] @ _rotation(spec.angles_deg[d]).T
        x = x + biases[d]
        out.append(DomainDataset(x, labels, labels.copy(), d, spec.classes))
    return out


def nearest_centroid_accuracy(spec: BenchmarkSpec, n: int = 200_000, seed: int = 12345) -> float:
    """Accuracy of the nearest-true-centroid rule on a large base-distribution sample."""
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, spec.classes, size=n)
    means, noise = sample_base(spec, labels, rng)
    x = (means + noise)[:, :2]
    centres = class_means(spec)
    dist = ((x[:, None, :] - centres[None, :, :]) ** 2).sum(axis=2)
    return float((dist.argmin(axis=1) == labels).mean())


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def inject_label_noise(ds: DomainDataset, ratio: float, seed) -> DomainDataset:
    """Relabel ``round(ratio * n)`` samples to a uniformly drawn wrong class.

    Wrong classes are taken relative to ``original_labels``; the result is
    fixed once produced and is returned as a new dataset.
    """
    if not 0.0 <= ratio <= 1.0:
        raise RejectedParameterError(f"noise ratio must lie in [0, 1], got {ratio}")
    n = len(ds)
    count = _round_half_up(ratio * n)
    labels = ds.original_labels.copy()
    if count:
        rng = np.random.default_rng([int(seed), ds.domain_id, 104729])
        chosen = rng.permutation(n)[:count]
        shift = rng.integers(1, ds.num_classes, size=count)
        labels[chosen] = (ds.original_labels[chosen] + shift) % ds.num_classes
    return replace(ds, labels=labels, original_labels=ds.original_labels.copy(),
                   features=ds.features, sample_weights=ds.sample_weights.copy())


def split_train_val(ds: DomainDataset, ratio: float = 0.8, seed=0):
    if not 0.0 < ratio < 1.0:
        raise RejectedParameterError(f"split ratio must lie in (0, 1), got {ratio}")
    n = len(ds)
    n_train = _round_half_up(ratio * n)
    if n_train == 0 or n_train == n:
        raise RejectedParameterError(f"ratio {ratio} leaves an empty side for n={n}")
    perm = np.random.default_rng([int(seed), ds.domain_id, 15485863]).permutation(n)
    return ds.subset(np.sort(perm[:n_train])), ds.subset(np.sort(perm[n_train:]))


def lodo_splits(domains):
    """Leave-one-domain-out: ``[(sources, target), ...]``, one entry per domain."""
    domains = list(domains)
    if len(domains) < 2:
        raise RejectedInputError("leave-one-domain-out needs at least two domains")
    return [(domains[:i] + domains[i + 1:], domains[i]) for i in range(len(domains))]


# ----------------------------------------------------------------------------
# CSV exchange

def write_csv(path, datasets, spec: BenchmarkSpec | None = None) -> None:
    """Write datasets to one CSV; the generating spec goes to ``<path>.json``."""
    path = Path(path)
    d = datasets[0].dim
    header = [f"feature_{j}" for j in range(d)] + ["label", "original_label", "domain_id"]
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for ds in datasets:
            for row, y, y0 in zip(ds.features, ds.labels, ds.original_labels):
                writer.writerow([repr(float(v)) for v in row] + [int(y), int(y0), ds.domain_id])
    sidecar = {"num_classes": datasets[0].num_classes}
    if spec is not None:
        sidecar["benchmark"] = spec.to_dict()
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))


def read_csv(path, num_classes: int | None = None) -> list[DomainDataset]:
    path = Path(path)
    if num_classes is None:
        sidecar = Path(str(path) + ".json")
        if not sidecar.exists():
            raise RejectedInputError(f"{path}: class count not given and no sidecar {sidecar.name}")
        num_classes = json.loads(sidecar.read_text())["num_classes"]
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = list(reader)
    feat_cols = [i for i, h in enumerate(header) if h.startswith("feature_")]
    try:
        iy, iy0, idom = header.index("label"), header.index("original_label"), header.index("domain_id")
    except ValueError as exc:
        raise RejectedInputError(f"{path}: missing column ({exc})") from None
    data = np.array([[float(r[i]) for i in feat_cols] for r in rows])
    y = np.array([int(r[iy]) for r in rows])
    y0 = np.array([int(r[iy0]) for r in rows])
    dom = np.array([int(r[idom]) for r in rows])
    out = []
    for d in sorted(set(dom.tolist())):
        m = dom == d
        out.append(DomainDataset(data[m], y[m], y0[m], d, num_classes))
    return out
