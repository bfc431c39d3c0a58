"""Token-by-token generation: rectified-flow Euler integration under a
linearly ramped classifier-free guidance scale, with windowed KV caching,
long-sequence extrapolation, and last-token rejection/resampling."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from colflow.generator import Generator, KvWindowCache
from colflow.numerics import ContractViolation, NumericFault


@dataclass
class SamplerConfig:
    n_steps: int = 100
    cfg_start: float = 1.0
    cfg_end: float = 1.0
    target_len: int = 16
    seed: int = 0
    temperature: float = 1.0

    def __post_init__(self):
        if self.n_steps < 1:
            raise ContractViolation(f"n_steps={self.n_steps} must be >= 1")
        if self.target_len < 1:
            raise ContractViolation(f"target_len={self.target_len} must be >= 1")


def cfg_velocity(v_c: np.ndarray, v_u: np.ndarray, omega: float) -> np.ndarray:
    """Guided velocity v_u + omega * (v_c - v_u), evaluated in the affine
    form (1 - omega) * v_u + omega * v_c so the omega in {0, 1} endpoints are
    exact."""
    if v_c.shape != v_u.shape:
        raise ContractViolation(f"cfg_velocity: {v_c.shape} vs {v_u.shape}")
    return (1.0 - omega) * v_u + omega * v_c


def omega_at(position: int, target_len: int, cfg: SamplerConfig) -> float:
    """Linear guidance ramp from cfg_start (first token) to cfg_end (last)."""
    if not 0 <= position < target_len:
        raise ContractViolation(f"omega_at: position {position} outside [0, {target_len})")
    if target_len == 1:
        return cfg.cfg_end
    frac = position / (target_len - 1)
    return cfg.cfg_start + (cfg.cfg_end - cfg.cfg_start) * frac


def euler_integrate(velocity_fn, y0: np.ndarray, n_steps: int) -> np.ndarray:
    """First-order Euler from t=0 to t=1 on the grid t_k = k/n_steps
    (left-endpoint evaluation): y <- y + (1/n) * v(y, t_k)."""
    if n_steps < 1:
        raise ContractViolation(f"euler_integrate: n_steps={n_steps}")
    y = y0.copy()
    dt = 1.0 / n_steps
    for k in range(n_steps):
        v = velocity_fn(y, k / n_steps)
        y = y + dt * v
        if not np.isfinite(y).all():
            raise NumericFault(f"euler_integrate: non-finite state at step {k}")
    return y


def euler_sample_token(model: Generator, z_c: np.ndarray, z_u: np.ndarray,
                       omega: float, n_steps: int, rng: np.random.Generator,
                       temperature: float = 1.0) -> np.ndarray:
    """Integrate the guided velocity field from Gaussian noise to one token.

    z_c / z_u are the conditional / unconditional backbone states, (B, hidden);
    the flow head runs both branches in one batched evaluation per step.
    """
    cp = model.cfg.token_channels
    b = z_c.shape[0]
    dtype = model.params["in.w"].data.dtype
    y0 = (rng.standard_normal((b, cp)) * temperature).astype(dtype)
    zz = np.concatenate([z_c, z_u], axis=0)

    def velocity(y, t):
        both = model.flow_velocity_np(np.concatenate([y, y], axis=0), t, zz)
        return cfg_velocity(both[:b], both[b:], omega)

    return euler_integrate(velocity, y0, n_steps)


@dataclass
class GenerationState:
    """Everything needed to continue, replay, or rewind a generation."""

    tokens: list[np.ndarray]
    caches_c: list[KvWindowCache]
    caches_u: list[KvWindowCache]
    cond_c: np.ndarray
    cond_u: np.ndarray
    rng: np.random.Generator
    cfg: SamplerConfig
    class_ids: np.ndarray
    next_pos: int = 0
    last_z: tuple[np.ndarray, np.ndarray] | None = field(default=None, repr=False)

    @property
    def done(self) -> bool:
        return self.next_pos >= self.cfg.target_len


def start_state(model: Generator, class_ids: np.ndarray, cfg: SamplerConfig) -> GenerationState:
    ids = np.asarray(class_ids, dtype=np.int64)
    if model.cfg.variant == "baseline_2d" and cfg.target_len >= model.cfg.max_seq_len:
        raise ContractViolation(
            f"baseline_2d cannot generate {cfg.target_len} tokens: learned position "
            f"embeddings stop at {model.cfg.max_seq_len - 1}"
        )
    null = np.full_like(ids, model.cfg.null_class)
    return GenerationState(
        tokens=[],
        caches_c=model.make_caches(),
        caches_u=model.make_caches(),
        cond_c=model.cond_arrays(ids),
        cond_u=model.cond_arrays(null),
        rng=np.random.default_rng(cfg.seed),
        cfg=cfg,
        class_ids=ids,
    )


def step_token(model: Generator, state: GenerationState) -> np.ndarray:
    """Generate and accept the next token; returns it, (B, C')."""
    if state.done:
        raise ContractViolation("step_token: generation already complete")
    i = state.next_pos
    prev = state.tokens[-1] if state.tokens else None
    z_c = model.forward_step(prev, i, state.caches_c, state.cond_c)
    z_u = model.forward_step(prev, i, state.caches_u, state.cond_u)
    state.last_z = (z_c, z_u)
    omega = omega_at(i, state.cfg.target_len, state.cfg)
    token = euler_sample_token(model, z_c, z_u, omega, state.cfg.n_steps,
                               state.rng, state.cfg.temperature)
    state.tokens.append(token)
    state.next_pos = i + 1
    return token


def generate_sequence(model: Generator, class_ids: np.ndarray,
                      cfg: SamplerConfig) -> tuple[np.ndarray, GenerationState]:
    """Full autoregressive generation; (B, target_len, C') plus final state.

    Deterministic given (model weights, class ids, config seed).
    """
    state = start_state(model, class_ids, cfg)
    for _ in range(cfg.target_len):
        step_token(model, state)
    return np.stack(state.tokens, axis=1), state


def extrapolate_long(model: Generator, class_ids: np.ndarray,
                     cfg: SamplerConfig) -> tuple[np.ndarray, GenerationState]:
    """Generation past the trained length; only windowed variants qualify."""
    if model.cfg.variant == "baseline_2d":
        raise ContractViolation(
            "baseline_2d refuses extrapolation: learned absolute position "
            "embeddings do not extend past the trained length"
        )
    return generate_sequence(model, class_ids, cfg)


def resample_token(model: Generator, state: GenerationState) -> np.ndarray:
    """Drop the last accepted token and draw a fresh one at the same position.

    Earlier tokens are untouched; caches are rebuilt by replaying the exact
    incremental decode over the remaining prefix, so the state matches a
    fresh generation that made the same draws. The RNG stream continues, so
    the new token uses new noise.
    """
    if not state.tokens:
        raise ContractViolation("resample_token: no accepted token to drop")
    state.tokens.pop()
    j = len(state.tokens)
    state.caches_c = model.make_caches()
    state.caches_u = model.make_caches()
    for m in range(j):
        prev = state.tokens[m - 1] if m > 0 else None
        model.forward_step(prev, m, state.caches_c, state.cond_c)
        model.forward_step(prev, m, state.caches_u, state.cond_u)
    state.next_pos = j
    return step_token(model, state)


def rebuild_caches(model: Generator, state: GenerationState) -> tuple[list[KvWindowCache], list[KvWindowCache]]:
    """Fresh caches recomputed from the accepted tokens (consistency oracle)."""
    caches_c = model.make_caches()
    caches_u = model.make_caches()
    for m in range(len(state.tokens)):
        prev = state.tokens[m - 1] if m > 0 else None
        model.forward_step(prev, m, caches_c, state.cond_c)
        model.forward_step(prev, m, caches_u, state.cond_u)
    return caches_c, caches_u
