"""AdamW with decoupled weight decay, EMA shadowing, global-norm clipping."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from colflow.numerics.tensor import ContractViolation, NumericFault, Tensor


@dataclass
class AdamWState:
    """Per-parameter optimizer state; `step` strictly increases by 1 per update."""

    step: int
    m: np.ndarray
    v: np.ndarray
    lr: float
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.02


def init_adamw_state(param: np.ndarray, lr: float, beta1: float = 0.9,
                     beta2: float = 0.95, eps: float = 1e-8,
                     weight_decay: float = 0.02) -> AdamWState:
    return AdamWState(
        step=0,
        m=np.zeros_like(param),
        v=np.zeros_like(param),
        lr=lr,
        beta1=beta1,
        beta2=beta2,
        eps=eps,
        weight_decay=weight_decay,
    )


def adamw_step(param: np.ndarray, grad: np.ndarray, state: AdamWState) -> tuple[np.ndarray, AdamWState]:
    """One decoupled-weight-decay Adam update with bias correction.

    Rejects non-finite gradients (the caller decides whether to skip or abort).
    """
    if param.shape != grad.shape or param.shape != state.m.shape:
        raise ContractViolation(
            f"adamw_step: param {param.shape}, grad {grad.shape}, state {state.m.shape}"
        )
    if not np.isfinite(grad).all():
        raise NumericFault("adamw_step: non-finite gradient entries")
    t = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * (grad * grad)
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new_param = param - state.lr * (m_hat / (np.sqrt(v_hat) + state.eps)
                                    + state.weight_decay * param)
    return new_param, replace(state, step=t, m=m, v=v)


def grad_clip_by_norm(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    """Scale the gradient set so its global L2 norm is at most `max_norm`.

    Direction is preserved; returns (clipped grads, pre-clip norm).
    """
    if max_norm <= 0:
        raise ContractViolation(f"grad_clip_by_norm: max_norm={max_norm} must be > 0")
    total = 0.0
    for g in grads.values():
        total += float((g.astype(np.float64) ** 2).sum())
    norm = float(np.sqrt(total))
    if norm <= max_norm or norm == 0.0:
        return grads, norm
    factor = max_norm / norm
    return {k: g * g.dtype.type(factor) for k, g in grads.items()}, norm


@dataclass
class EmaState:
    """Exponential moving average shadow of one parameter tensor."""

    decay: float
    shadow: np.ndarray


def ema_update(ema: EmaState, params: np.ndarray) -> EmaState:
    if ema.shadow.shape != params.shape:
        raise ContractViolation(
            f"ema_update: shadow {ema.shadow.shape} vs params {params.shape}"
        )
    shadow = ema.decay * ema.shadow + (1.0 - ema.decay) * params
    return EmaState(decay=ema.decay, shadow=shadow.astype(params.dtype, copy=False))


class AdamW:
    """Named-parameter convenience wrapper around `adamw_step`."""

    def __init__(self, params: dict[str, Tensor], lr: float, beta1: float = 0.9,
                 beta2: float = 0.95, eps: float = 1e-8, weight_decay: float = 0.02):
        self.params = params
        self.states = {
            name: init_adamw_state(p.data, lr, beta1, beta2, eps, weight_decay)
            for name, p in params.items()
        }

    def step(self, grads: dict[str, np.ndarray], lr: float | None = None) -> None:
        for name, p in self.params.items():
            g = grads.get(name)
            if g is None:
                continue
            st = self.states[name]
            if lr is not None:
                st = replace(st, lr=lr)
            new_data, self.states[name] = adamw_step(p.data, g, st)
            p.data = new_data


class EmaTracker:
    """EMA over a named parameter dict."""

    def __init__(self, params: dict[str, Tensor], decay: float = 0.9999):
        if not 0.0 <= decay < 1.0:
            raise ContractViolation(f"EmaTracker: decay={decay} outside [0, 1)")
        self.states = {
            name: EmaState(decay=decay, shadow=p.data.copy()) for name, p in params.items()
        }

    def update(self, params: dict[str, Tensor]) -> None:
        for name, p in params.items():
            self.states[name] = ema_update(self.states[name], p.data)

    def shadow_arrays(self) -> dict[str, np.ndarray]:
        return {name: st.shadow.copy() for name, st in self.states.items()}
