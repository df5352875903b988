"""Experiment drivers behind the command line: classification, noise study, RL, timing."""
from __future__ import annotations

import csv
import gc
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import astuple, dataclass, fields
from pathlib import Path

import numpy as np

from . import diagnostics, distill, nn, rl
from .config import ExperimentConfig
from .errors import ConfigError
from .synthdata import gen_domains, inject_label_noise, split_train_val, stack

log = logging.getLogger(__name__)

TEACHER_SEED_OFFSET = 1000


@dataclass
class ResultRow:
    study: str
    method: str
    target: str
    noise: float
    seed: int
    source_val_acc: float | None = None
    target_acc: float | None = None
    fuel_mean: float | None = None
    fuel_std: float | None = None
    cwd: float | None = None
    mi_nats: float | None = None
    sec_per_iter: float | None = None

    def sort_key(self):
        return (self.study, self.method, self.target, self.noise, self.seed)


RESULT_COLUMNS = [f.name for f in fields(ResultRow)]


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_results(path, rows) -> None:
    rows = sorted(rows, key=ResultRow.sort_key)
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(RESULT_COLUMNS)
        for row in rows:
            writer.writerow([_fmt(v) for v in astuple(row)])


def read_results(path) -> list[ResultRow]:
    out = []
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != RESULT_COLUMNS:
            raise ConfigError(f"{path}: unexpected columns {reader.fieldnames}")
        for rec in reader:
            vals = {}
            for f in fields(ResultRow):
                raw = rec[f.name]
                if f.name in ("study", "method", "target"):
                    vals[f.name] = raw
                elif f.name == "seed":
                    vals[f.name] = int(raw)
                else:
                    vals[f.name] = float(raw) if raw != "" else None
            out.append(ResultRow(**vals))
    return out


def _map(fn, items, workers):
    if workers <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


# ----------------------------------------------------------------------------
# classification

def prepare_sources(sources, noise: float, ratio: float, seed):
    """Noise-inject each source (labels fixed from here on) and split train/val."""
    train, val = [], []
    for ds in sources:
        noisy = inject_label_noise(ds, noise, seed)
        a, b = split_train_val(noisy, ratio, seed)
        train.append(a)
        val.append(b)
    return train, val


def _run_dir(out_dir, study, method, target, noise, seed):
    if out_dir is None:
        return None
    d = Path(out_dir) / "checkpoints" / f"{study}_{method}_t{target}_n{noise:g}_s{seed}"
    d.mkdir(parents=True, exist_ok=True)
    return d


def _classification_task(cfg: ExperimentConfig, domains, target: int, seed: int, noise: float,
                         methods, study: str, out_dir):
    sources = [d for d in domains if d.domain_id != target]
    train, val = prepare_sources(sources, noise, cfg.split_ratio, seed)
    xv, _, yv_clean, dv, _ = stack(val)
    tgt = domains[target]
    epochs = cfg.epochs
    teacher = None
    if any(distill.needs_teacher(m, cfg.distill) for m in methods):
        teacher, _ = distill.train_deepall(train, cfg.sizes, cfg.optimizer.state(epochs), epochs,
                                           seed + TEACHER_SEED_OFFSET, cfg.optimizer.batch_size)
    rows = []
    for method in methods:
        opt = cfg.optimizer.state(epochs)
        if method == "deepall":
            net, mlog = distill.train_deepall(train, cfg.sizes, opt, epochs, seed,
                                              cfg.optimizer.batch_size)
        else:
            net, mlog = distill.train_student(train, teacher if teacher is not None else _dummy(cfg),
                                              cfg.distill, opt, epochs, seed,
                                              cfg.optimizer.batch_size, method, cfg.alpha, cfg.sizes)
        mi = None
        if cfg.compute_mi:
            dump = diagnostics.FeatureDump(diagnostics.extract_features(net, xv), dv)
            mi = diagnostics.mi_estimate(dump, cfg.mi_folds, seed)
        row = ResultRow(
            study=study, method=method, target=str(target), noise=float(noise), seed=seed,
            source_val_acc=distill.accuracy(net, xv, yv_clean),
            target_acc=distill.accuracy(net, tgt.features, tgt.original_labels),
            cwd=diagnostics.cwd(mlog.snapshots), mi_nats=mi,
            sec_per_iter=mlog.seconds / max(mlog.iterations, 1),
        )
        rows.append(row)
        run_dir = _run_dir(out_dir, study, method, target, noise, seed)
        if run_dir is not None:
            nn.save_network(run_dir / "final.ckpt", net)
            if cfg.save_snapshots:
                for k, snap in enumerate(mlog.snapshots):
                    nn.save_network(run_dir / f"epoch_{k:04d}.ckpt", net.with_params(snap))
                diagnostics.write_feature_dump(
                    run_dir / "features.csv",
                    diagnostics.FeatureDump(diagnostics.extract_features(net, xv), dv))
        log.info("%s %s target=%s noise=%g seed=%d: val=%.4f target=%.4f cwd=%.3f",
                 study, method, target, noise, seed, row.source_val_acc, row.target_acc, row.cwd)
    return rows


def _dummy(cfg):
    # methods that never consult a teacher still need one of the right shape
    return nn.Network.init(cfg.sizes, seed=0)


def run_classification(cfg: ExperimentConfig, out_dir=None, domains=None) -> list[ResultRow]:
    """Leave-one-domain-out training of every configured method for every seed."""
    domains = gen_domains(cfg.benchmark) if domains is None else domains
    tasks = [(t, s) for t in range(len(domains)) for s in cfg.seeds]
    results = _map(lambda ts: _classification_task(cfg, domains, ts[0], ts[1], cfg.noise,
                                                    cfg.method, "classification", out_dir),
                   tasks, cfg.workers)
    return sorted((r for rows in results for r in rows), key=ResultRow.sort_key)


def run_noise_study(cfg: ExperimentConfig, grid=None, out_dir=None, domains=None) -> list[ResultRow]:
    """DeepAll on every (noise ratio, target, seed) with labels corrupted once up front."""
    grid = list(cfg.noise_grid if grid is None else grid)
    if any(not 0.0 <= g <= 1.0 for g in grid):
        raise ConfigError("noise grid values must lie in [0, 1]")
    domains = gen_domains(cfg.benchmark) if domains is None else domains
    tasks = [(lam, t, s) for lam in grid for t in range(len(domains)) for s in cfg.seeds]
    results = _map(lambda a: _classification_task(cfg, domains, a[1], a[2], a[0], ["deepall"],
                                                   "noise", out_dir),
                   tasks, cfg.workers)
    return sorted((r for rows in results for r in rows), key=ResultRow.sort_key)


# ----------------------------------------------------------------------------
# reinforcement learning

def _rl_task(cfg: ExperimentConfig, seed: int, out_dir):
    settings = cfg.rl
    hyper = settings.hyper()
    source = rl.EnvConfig(settings.source_gravity, max_steps=settings.max_steps)
    # the baseline DQN is the teacher; its final target network supplies the soft targets
    baseline, blog = rl.dqn_train(source, hyper, seed)
    student, slog = rl.policy_distill_train(blog.target, source, hyper, cfg.distill, seed)
    rows = []
    for method, net, mlog in (("dqn", baseline, blog), ("kddg", student, slog)):
        for g in settings.gravities:
            env = rl.EnvConfig(g, max_steps=settings.max_steps)
            mean, std = rl.evaluate_fuel(net, env, settings.eval_episodes, seed)
            rows.append(ResultRow(study="rl", method=method, target=f"{g:g}", noise=0.0, seed=seed,
                                  fuel_mean=mean, fuel_std=std,
                                  sec_per_iter=mlog.seconds / max(mlog.iterations, 1) if mlog.seconds else None))
        run_dir = _run_dir(out_dir, "rl", method, f"{settings.source_gravity:g}", 0.0, seed)
        if run_dir is not None:
            rl.save_qnetwork(run_dir / "final.ckpt", net)
            rl.write_episode_log(run_dir / "episodes.csv", mlog.episodes)
    log.info("rl seed=%d done", seed)
    return rows


def run_rl(cfg: ExperimentConfig, out_dir=None) -> list[ResultRow]:
    """Baseline DQN and distilled student trained at the source gravity, evaluated on all gravities."""
    results = _map(lambda s: _rl_task(cfg, s, out_dir), cfg.seeds, cfg.workers)
    return sorted((r for rows in results for r in rows), key=ResultRow.sort_key)


# ----------------------------------------------------------------------------
# timing

@dataclass
class TimingRow:
    method: str
    iterations: int
    repeats: int
    sec_per_iter: float
    ratio_to_deepall: float | None = None


def _iteration(method, student, teacher, cfg, xb, yb, opt, params):
    logits, cache = nn.forward_layers(student.layers, xb, keep=True)
    if method == "deepall":
        _, d = distill.cross_entropy_loss(logits, yb)
    else:
        t_logits = nn.forward_layers(teacher.layers, xb)
        _, d = distill.kddg_loss_from_logits(logits, t_logits, yb, cfg)
    g, _ = nn.backward_layers(student.layers, cache, d)
    return nn.optimizer_step(opt, params, g)


def bench_timing(cfg: ExperimentConfig) -> list[TimingRow]:
    """Seconds per training iteration on one fixed batch, best block mean over repeats.

    Methods alternate iteration by iteration so slow drift of the machine hits
    all of them alike, and garbage collection is paused while timing.  Memory
    use is not measured.
    """
    b = cfg.bench
    seed = cfg.seeds[0]
    domains = gen_domains(cfg.benchmark)
    x, y, _, _, _ = stack(domains)
    rng = np.random.default_rng([seed, 99])
    idx = rng.choice(x.shape[0], size=min(b.batch_size, x.shape[0]), replace=False)
    xb, yb = x[idx], y[idx]
    teacher = nn.Network.init(cfg.sizes, seed=[seed, TEACHER_SEED_OFFSET])
    # one slot per listed entry, so a method listed twice is timed twice
    nets = [nn.Network.init(cfg.sizes, seed=[seed, 1]) for _ in b.methods]
    best = [float("inf")] * len(b.methods)
    for m, net in zip(b.methods, nets):
        opt = cfg.optimizer.state(1)
        params = net.params()
        for _ in range(b.warmup):
            params = _iteration(m, net, teacher, cfg.distill, xb, yb, opt, params)
            net.set_params(params)
    # like timeit: cyclic GC pauses scale with the caller's heap, not with the method timed
    gc_was_enabled = gc.isenabled()
    gc.disable()
    try:
        for _ in range(b.repeats):
            opts = [cfg.optimizer.state(1) for _ in b.methods]
            params = [net.params() for net in nets]
            spent = [0.0] * len(b.methods)
            for _ in range(b.iterations):
                for i, (m, net) in enumerate(zip(b.methods, nets)):
                    start = time.perf_counter()
                    params[i] = _iteration(m, net, teacher, cfg.distill, xb, yb, opts[i], params[i])
                    net.set_params(params[i])
                    spent[i] += time.perf_counter() - start
            for i in range(len(b.methods)):
                best[i] = min(best[i], spent[i] / b.iterations)
    finally:
        if gc_was_enabled:
            gc.enable()
    base = next((t for m, t in zip(b.methods, best) if m == "deepall"), None)
    return [TimingRow(m, b.iterations, b.repeats, t, t / base if base else None)
            for m, t in zip(b.methods, best)]


def write_timing(path, rows) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f.name for f in fields(TimingRow)])
        for row in rows:
            writer.writerow([_fmt(v) for v in astuple(row)])


# ----------------------------------------------------------------------------
# aggregation helpers

def mean_of(rows, attr, **match) -> float:
    vals = [getattr(r, attr) for r in rows
            if all(getattr(r, k) == v for k, v in match.items())]
    vals = [v for v in vals if v is not None]
    if not vals:
        raise ValueError(f"no rows match {match} with a value for {attr}")
    return float(np.mean(vals))
