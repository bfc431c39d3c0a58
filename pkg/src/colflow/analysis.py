"""Equivariance measurement suite.

Zero-shot transfer across position subtasks, single-task transfer grids,
attention cost accounting, long-generation stationarity, and a desk-scale
Fréchet distance over fixed random projections. The Fréchet numbers are a
local yardstick only; they are not comparable to published
Inception-feature FID values and every emitted report labels them so.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg as sla

from colflow.generator import Generator, flow_matching_loss
from colflow.numerics import ContractViolation, Tensor

# FLOP convention: one query-key pair costs 4*d FLOPs (multiply+add for both
# the score dot product and the value mixture), summed over heads and layers.
FLOPS_PER_PAIR_PER_DIM = 4


def attention_pair_count(n: int, w: int | None, variant: str = "windowed") -> float:
    """Query-key pairs to decode n tokens under each attention regime.

    full: n(n+1)/2. windowed (self plus w predecessors): sum_i min(i, w+1).
    real_equivariant: (w+1)(w+2)/2 per crop of length w+1, reported
    per-token-normalized, i.e. n*(w+2)/2.
    """
    if n < 1:
        raise ContractViolation(f"attention_pair_count: n={n}")
    if variant == "full":
        return n * (n + 1) // 2
    if w is None or w < 0:
        raise ContractViolation(f"attention_pair_count: w={w} for variant {variant}")
    if variant == "windowed":
        return int(sum(min(i, w + 1) for i in range(1, n + 1)))
    if variant == "real_equivariant":
        per_crop = (w + 1) * (w + 2) // 2
        return n * per_crop / (w + 1)
    raise ContractViolation(f"attention_pair_count: unknown variant {variant!r}")


@dataclass
class FlopReport:
    n: int
    w: int
    n_layers: int
    hidden_dim: int
    pairs: dict[str, float] = field(default_factory=dict)
    flops: dict[str, float] = field(default_factory=dict)
    ratio_vs_full: dict[str, float] = field(default_factory=dict)

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.__dict__, fh, indent=2, sort_keys=True)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wcsv = csv.writer(fh)
            wcsv.writerow(["variant", "pairs", "flops", "ratio_vs_full"])
            for variant in self.pairs:
                wcsv.writerow([variant, self.pairs[variant], self.flops[variant],
                               self.ratio_vs_full[variant]])


def flop_report(n: int, w: int, n_layers: int, hidden_dim: int) -> FlopReport:
    """Attention cost for all three regimes at one sequence length."""
    report = FlopReport(n=n, w=w, n_layers=n_layers, hidden_dim=hidden_dim)
    per_pair = FLOPS_PER_PAIR_PER_DIM * hidden_dim * n_layers
    full_pairs = attention_pair_count(n, None, "full")
    for variant, w_arg in (("full", None), ("windowed", w), ("real_equivariant", w)):
        pairs = attention_pair_count(n, w_arg, variant)
        report.pairs[variant] = pairs
        report.flops[variant] = pairs * per_pair
        report.ratio_vs_full[variant] = pairs / full_pairs
    return report


@dataclass
class EquivarianceReport:
    variant: str
    trained_positions: list[int]
    heldout_positions: list[int]
    per_position_loss: list[float]
    transfer_ratio: float
    relative_to_trained: list[float]

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.__dict__, fh, indent=2, sort_keys=True)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["position", "loss", "trained", "relative_to_trained_pct"])
            for pos, loss in enumerate(self.per_position_loss):
                w.writerow([pos, loss, int(pos in self.trained_positions),
                            self.relative_to_trained[pos]])


def per_position_eval_loss(model: Generator, tokens: np.ndarray, labels: np.ndarray,
                           seed: int = 0, batch_size: int = 64) -> np.ndarray:
    """Mean per-position flow loss on an eval set, with (eps, t) draws shared
    across positions within each sample for fair cross-position comparison."""
    n, w_len, cp = tokens.shape
    rng = np.random.default_rng(seed)
    totals = np.zeros(w_len)
    count = 0
    for start in range(0, n, batch_size):
        batch = tokens[start:start + batch_size]
        ids = labels[start:start + batch_size]
        b = batch.shape[0]
        t = np.broadcast_to(rng.uniform(size=(b, 1)), (b, w_len)).copy()
        eps = np.broadcast_to(rng.standard_normal((b, 1, cp)), (b, w_len, cp)).copy()
        z = model.forward(Tensor(batch[:, :-1]), ids)
        _, per_pos = flow_matching_loss(model, batch, z, rng, draws=(t, eps))
        totals += per_pos * b
        count += b
    return totals / count


def zero_shot_eval(model: Generator, tokens: np.ndarray, labels: np.ndarray,
                   trained_mask: list[int], seed: int = 0) -> EquivarianceReport:
    """Per-position loss on held-out data, split by trained/held-out subtasks.

    transfer ratio r = mean(held-out) / mean(trained); r = 1 by convention
    when every position was trained.
    """
    w_len = tokens.shape[1]
    trained = sorted(set(trained_mask))
    heldout = [p for p in range(w_len) if p not in set(trained)]
    losses = per_position_eval_loss(model, tokens, labels, seed=seed)
    mean_trained = float(losses[trained].mean())
    ratio = 1.0 if not heldout else float(losses[heldout].mean()) / mean_trained
    rel = 100.0 * (mean_trained - losses) / mean_trained
    return EquivarianceReport(
        variant=model.cfg.variant,
        trained_positions=trained,
        heldout_positions=heldout,
        per_position_loss=[float(x) for x in losses],
        transfer_ratio=ratio,
        relative_to_trained=[float(x) for x in rel],
    )


def transfer_matrix(single_task_losses: dict[int, np.ndarray],
                    early_baseline: np.ndarray) -> tuple[np.ndarray, list[int]]:
    """Improvement grid: rows are single-task runs, columns positions.

    Entry (i, p) is the relative improvement (%) of run i's final loss at
    position p over the early multi-task baseline.
    """
    from colflow.training import relative_improvement

    trained = sorted(single_task_losses)
    w_len = len(early_baseline)
    grid = np.zeros((len(trained), w_len))
    for row, pos in enumerate(trained):
        cur = np.asarray(single_task_losses[pos])
        if cur.shape != early_baseline.shape:
            raise ContractViolation(
                f"transfer_matrix: run {pos} has {cur.shape}, baseline {early_baseline.shape}"
            )
        grid[row] = relative_improvement(cur, early_baseline)
    return grid, trained


def column_stationarity(samples: np.ndarray, train_len: int, w: int,
                        reference: list[int] | None = None) -> dict[str, np.ndarray]:
    """Per-position channel-mean/std z-scored against the steady-state band.

    samples: (S, T, C') token batch, S >= 32. The reference band defaults to
    positions [w+1, train_len); its mean/std of each statistic calibrate the
    z-scores at every position.
    """
    samples = np.asarray(samples)
    if samples.ndim != 3:
        raise ContractViolation(f"column_stationarity: rank {samples.ndim}")
    s, t_len, _ = samples.shape
    if s < 32:
        raise ContractViolation(f"column_stationarity: batch {s} < 32")
    band = list(range(w + 1, train_len)) if reference is None else list(reference)
    if not band:
        raise ContractViolation("column_stationarity: empty reference band")
    pos_mean = samples.mean(axis=(0, 2))
    pos_std = samples.std(axis=(0, 2))
    z = {}
    for name, stat in (("mean", pos_mean), ("std", pos_std)):
        mu = stat[band].mean()
        sd = stat[band].std()
        z[name] = (stat - mu) / max(sd, 1e-12)
    beyond = np.arange(train_len, t_len)
    max_abs = 0.0
    if beyond.size:
        max_abs = float(max(np.abs(z["mean"][beyond]).max(), np.abs(z["std"][beyond]).max()))
    return {
        "z_mean": z["mean"],
        "z_std": z["std"],
        "positions": np.arange(t_len),
        "max_abs_beyond_train": max_abs,
    }


@dataclass
class DistStats:
    """Gaussian summary (mean, covariance) of fixed-random-projection features."""

    mean: np.ndarray
    cov: np.ndarray

    FEATURE_DIM = 64
    PROJECTION_SEED = 1717

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.cov = np.asarray(self.cov, dtype=np.float64)
        if self.cov.shape != (self.mean.size, self.mean.size):
            raise ContractViolation(
                f"DistStats: mean {self.mean.shape} vs cov {self.cov.shape}"
            )

    @classmethod
    def project(cls, samples: np.ndarray, dim: int = FEATURE_DIM,
                seed: int = PROJECTION_SEED) -> np.ndarray:
        flat = np.asarray(samples, dtype=np.float64).reshape(len(samples), -1)
        rng = np.random.default_rng(seed)
        proj = rng.standard_normal((flat.shape[1], dim)) / np.sqrt(flat.shape[1])
        return flat @ proj

    @classmethod
    def from_samples(cls, samples: np.ndarray, dim: int = FEATURE_DIM,
                     seed: int = PROJECTION_SEED) -> "DistStats":
        feats = cls.project(samples, dim=dim, seed=seed)
        return cls.from_features(feats)

    @classmethod
    def from_features(cls, feats: np.ndarray) -> "DistStats":
        feats = np.asarray(feats, dtype=np.float64)
        return cls(mean=feats.mean(axis=0), cov=np.cov(feats, rowvar=False))


def frechet_distance(a: DistStats, b: DistStats) -> float:
    """||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^(1/2)); symmetric, >= 0.

    NOT comparable to Inception-feature gFID numbers.
    """
    if a.mean.shape != b.mean.shape:
        raise ContractViolation(f"frechet: dims {a.mean.shape} vs {b.mean.shape}")
    c1 = 0.5 * (a.cov + a.cov.T)
    c2 = 0.5 * (b.cov + b.cov.T)
    for name, c in (("a", c1), ("b", c2)):
        eig_min = float(np.linalg.eigvalsh(c).min())
        if eig_min < -1e-8 * max(1.0, float(np.abs(c).max())):
            raise ContractViolation(f"frechet: covariance {name} not PSD (min eig {eig_min:.2e})")
    diff = a.mean - b.mean
    covmean = sla.sqrtm(c1 @ c2)
    if np.iscomplexobj(covmean):
        covmean = covmean.real
    return float(diff @ diff + np.trace(c1) + np.trace(c2) - 2.0 * np.trace(covmean))


def center_edge_ratio(per_position_loss: np.ndarray) -> float:
    """Mean loss over the middle third of positions divided by the mean over
    the outer thirds (the dataset-bias profile statistic)."""
    losses = np.asarray(per_position_loss, dtype=np.float64)
    w_len = losses.size
    lo, hi = w_len // 3, w_len - w_len // 3
    center = losses[lo:hi].mean()
    edge = np.concatenate([losses[:lo], losses[hi:]]).mean()
    return float(center / edge)
