"""Training loops and experiment protocols.

Covers multi-task training (all positions), subtask-masked training (a
subset of positions optimized, the rest logged without gradient), randomly
cropped training for the strictly windowed variant, the warmup-then-constant
learning-rate schedule, and per-(epoch, position) loss logging.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from colflow.generator import Generator, flow_matching_loss
from colflow.numerics import AdamW, ContractViolation, EmaTracker, Tape, Tensor, backward, grad_clip_by_norm
from colflow.tokenizer import ConvTokenizer, tokenizer_loss


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    base_lr: float = 3e-4
    warmup_epochs: int = 3
    weight_decay: float = 0.02
    grad_clip: float = 3.0
    seed: int = 0
    task_mask: list[int] | None = None  # None -> every position
    ema_decay: float = 0.9999

    def __post_init__(self):
        if self.warmup_epochs > self.epochs:
            raise ContractViolation(
                f"warmup_epochs={self.warmup_epochs} exceeds epochs={self.epochs}"
            )
        if self.task_mask is not None:
            if len(self.task_mask) == 0:
                raise ContractViolation("task_mask must be non-empty")
            if len(set(self.task_mask)) != len(self.task_mask):
                raise ContractViolation("task_mask indices must be unique")


@dataclass
class LossLog:
    """Per (epoch, position) mean flow loss, including unmasked positions."""

    rows: list[tuple[int, int, float, int]] = field(default_factory=list)
    wall_clock: float = 0.0
    step_count: int = 0

    def add_epoch(self, epoch: int, per_position: np.ndarray, mask: set[int]) -> None:
        for pos, loss in enumerate(per_position):
            self.rows.append((epoch, pos, float(loss), int(pos in mask)))

    def epochs(self) -> list[int]:
        return sorted({r[0] for r in self.rows})

    def positions(self) -> list[int]:
        return sorted({r[1] for r in self.rows})

    def per_position(self, epoch: int) -> np.ndarray:
        got = {r[1]: r[2] for r in self.rows if r[0] == epoch}
        return np.array([got[p] for p in sorted(got)])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "position", "loss", "masked"])
            w.writerows(self.rows)

    @classmethod
    def from_csv(cls, path) -> "LossLog":
        log = cls()
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            for row in reader:
                log.rows.append(
                    (int(row["epoch"]), int(row["position"]), float(row["loss"]),
                     int(row["masked"]))
                )
        return log


def lr_at(step: int, base_lr: float, warmup_steps: int) -> float:
    """Linear ramp 0 -> base_lr across warmup, then constant."""
    if step < 0:
        raise ContractViolation(f"lr_at: step={step}")
    if warmup_steps <= 0 or step >= warmup_steps:
        return base_lr
    return base_lr * step / warmup_steps


def real_equivariant_crop(batch: np.ndarray, k: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Uniformly random contiguous crops of length k+1 from (B, W, C') tokens.

    Returns (crops (B, k+1, C'), offsets (B,)); offsets are uniform over
    [0, W-k-1].
    """
    b, w_len, _ = batch.shape
    if k + 1 > w_len:
        raise ContractViolation(f"crop length {k + 1} exceeds sequence length {w_len}")
    offsets = rng.integers(0, w_len - k, size=b)
    idx = offsets[:, None] + np.arange(k + 1)[None, :]
    crops = batch[np.arange(b)[:, None], idx]
    return crops, offsets


def train_step(model: Generator, batch: np.ndarray, class_ids: np.ndarray,
               mask: list[int], opt: AdamW, rng: np.random.Generator,
               lr: float, grad_clip: float, shift: int = 0,
               ema: EmaTracker | None = None) -> tuple[np.ndarray, bool]:
    """One gradient step on the masked positions.

    Per-position losses come back for every position (held-out ones are
    evaluated with the same eps/t draws but excluded from the optimized
    scalar, so they contribute exactly zero gradient). Returns
    (per-position losses, stepped?); a non-finite loss skips the update.
    """
    with Tape() as tape:
        prefix = Tensor(batch[:, :-1]) if batch.shape[1] > 1 else None
        z = model.forward(prefix, class_ids, shift=shift, train=True, rng=rng)
        loss, per_pos = flow_matching_loss(model, batch, z, rng, mask=mask)
        if not np.isfinite(loss.data).all():
            tape.free()
            return per_pos, False
        grads = backward(loss, tape)
    named = {name: grads[p].data for name, p in model.params.items() if p in grads}
    named, _ = grad_clip_by_norm(named, grad_clip)
    opt.step(named, lr=lr)
    if ema is not None:
        ema.update(model.params)
    return per_pos, True


def train_generator(model: Generator, tokens: np.ndarray, labels: np.ndarray,
                    cfg: TrainConfig,
                    encode_epoch=None) -> tuple[LossLog, EmaTracker]:
    """Train on (N, W, C') tokens with (N,) class labels.

    `encode_epoch(epoch_rng) -> (tokens, labels)` optionally regenerates the
    epoch's token set (augmentation lives there). The real_equivariant
    variant trains on random crops of length window_w + 1 with losses logged
    at their original positions.
    """
    n, w_len, _ = tokens.shape
    mask = list(range(w_len)) if cfg.task_mask is None else sorted(cfg.task_mask)
    if max(mask) >= w_len or min(mask) < 0:
        raise ContractViolation(f"task_mask {mask} outside [0, {w_len})")
    rng = np.random.default_rng(cfg.seed)
    opt = AdamW(model.params, lr=cfg.base_lr, weight_decay=cfg.weight_decay)
    ema = EmaTracker(model.params, decay=cfg.ema_decay)
    steps_per_epoch = max(1, n // cfg.batch_size)
    warmup_steps = cfg.warmup_epochs * steps_per_epoch
    log = LossLog()
    mask_set = set(mask)
    is_real_eq = model.cfg.variant == "real_equivariant"
    augmented = model.cfg.variant != "baseline_2d"
    t0 = time.monotonic()
    step = 0

    for epoch in range(cfg.epochs):
        if encode_epoch is not None:
            tokens, labels = encode_epoch(rng)
        order = rng.permutation(n)
        pos_sum = np.zeros(w_len)
        pos_cnt = np.zeros(w_len)
        for s in range(steps_per_epoch):
            idx = order[s * cfg.batch_size:(s + 1) * cfg.batch_size]
            batch = tokens[idx]
            ids = labels[idx]
            shift = int(rng.integers(0, model.cfg.shift_max + 1)) if augmented else 0
            lr = lr_at(step, cfg.base_lr, warmup_steps)
            if is_real_eq:
                k = model.cfg.window_w
                crops, offsets = real_equivariant_crop(batch, k, rng)
                per_pos, _ = train_step(model, crops, ids, list(range(k + 1)),
                                        opt, rng, lr, cfg.grad_clip, shift=shift, ema=ema)
                # Crop positions map back to offset + j; batches share one
                # offset draw per sample, so scatter the crop means uniformly.
                for j, val in enumerate(per_pos):
                    for off in offsets:
                        pos_sum[off + j] += val
                        pos_cnt[off + j] += 1
            else:
                per_pos, _ = train_step(model, batch, ids, mask, opt, rng, lr,
                                        cfg.grad_clip, shift=shift, ema=ema)
                pos_sum += per_pos
                pos_cnt += 1
            step += 1
        log.add_epoch(epoch, pos_sum / np.maximum(pos_cnt, 1), mask_set)
    log.wall_clock = time.monotonic() - t0
    log.step_count = step
    return log, ema


def relative_improvement(current: np.ndarray, baseline: np.ndarray) -> np.ndarray:
    """100 * (baseline - current) / baseline per position; positive is better.

    Positions with baseline <= 0 are undefined and reported as NaN.
    """
    current = np.asarray(current, dtype=np.float64)
    baseline = np.asarray(baseline, dtype=np.float64)
    if current.shape != baseline.shape:
        raise ContractViolation(
            f"relative_improvement: {current.shape} vs {baseline.shape}"
        )
    out = np.full_like(baseline, np.nan)
    ok = baseline > 0
    out[ok] = 100.0 * (baseline[ok] - current[ok]) / baseline[ok]
    return out


@dataclass
class TokTrainConfig:
    epochs: int = 4
    batch_size: int = 16
    lr: float = 2e-3
    beta1: float = 0.5
    beta2: float = 0.9
    grad_clip: float = 1.0
    seed: int = 0
    ema_decay: float = 0.9999


def train_tokenizer(tok: ConvTokenizer, images: np.ndarray,
                    cfg: TokTrainConfig) -> dict[str, list[float]]:
    """Reconstruction + KL training for the convolutional tokenizer."""
    n = images.shape[0]
    rng = np.random.default_rng(cfg.seed)
    opt = AdamW(tok.params, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, weight_decay=0.0)
    steps_per_epoch = max(1, n // cfg.batch_size)
    history: dict[str, list[float]] = {"rec": [], "kl": [], "total": []}
    for _epoch in range(cfg.epochs):
        order = rng.permutation(n)
        sums = {"rec": 0.0, "kl": 0.0, "total": 0.0}
        for s in range(steps_per_epoch):
            batch = Tensor(images[order[s * cfg.batch_size:(s + 1) * cfg.batch_size]])
            with Tape() as tape:
                post = tok.encode_image(batch)
                recon = tok.decode_raw(post.sample(rng))
                loss, parts = tokenizer_loss(batch, recon, post, tok.cfg)
                grads = backward(loss, tape)
            named = {name: grads[p].data for name, p in tok.params.items() if p in grads}
            named, _ = grad_clip_by_norm(named, cfg.grad_clip)
            opt.step(named)
            for key in sums:
                sums[key] += parts[key]
        for key in sums:
            history[key].append(sums[key] / steps_per_epoch)
    return history
