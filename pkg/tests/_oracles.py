"""Shared independent oracles for the test suite.

The finite-difference gradient check here is the reference every autodiff
rule is verified against; it never calls the tape's backward rules.
"""

from __future__ import annotations

import numpy as np

from colflow.numerics import Tape, Tensor, backward


def fd_grad(fn, args: list[np.ndarray], wrt: int, h: float = 1e-5,
            sample: int | None = None, rng: np.random.Generator | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Central finite differences of scalar `fn(*args)` w.r.t. args[wrt].

    Returns (flat indices probed, fd gradient at those indices). All math in
    f64. If `sample` is given, probe that many random coordinates instead of
    all of them.
    """
    x = args[wrt].astype(np.float64)
    flat = x.reshape(-1)
    if sample is None or sample >= flat.size:
        idx = np.arange(flat.size)
    else:
        idx = (rng or np.random.default_rng(0)).choice(flat.size, size=sample, replace=False)
    g = np.empty(idx.size, dtype=np.float64)
    for j, i in enumerate(idx):
        bumped = [a.copy() for a in args]
        fp = bumped[wrt].reshape(-1)
        fp[i] = flat[i] + h
        up = fn(*bumped)
        fp[i] = flat[i] - h
        down = fn(*bumped)
        g[j] = (up - down) / (2.0 * h)
    return idx, g


def autodiff_grad(op_fn, arrays: list[np.ndarray], wrt: int) -> np.ndarray:
    """Autodiff gradient of scalar `op_fn(*tensors)` w.r.t. tensor `wrt`."""
    tensors = [Tensor(a, dtype="f64", requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = op_fn(*tensors)
        grads = backward(out, tape)
    return grads[tensors[wrt]].data


def check_gradient(op_fn, scalar_fn, arrays: list[np.ndarray], wrt: int = 0,
                   h: float = 1e-5, rtol: float = 1e-6, sample: int | None = None,
                   rng: np.random.Generator | None = None) -> float:
    """Assert autodiff matches central finite differences within rtol.

    `op_fn` maps Tensors to a scalar Tensor; `scalar_fn` is the same map over
    raw f64 numpy arrays (independent of the tape). Returns the worst
    relative error.
    """
    ad = autodiff_grad(op_fn, arrays, wrt).reshape(-1)
    idx, fd = fd_grad(scalar_fn, [a.astype(np.float64) for a in arrays], wrt,
                      h=h, sample=sample, rng=rng)
    denom = np.maximum(np.abs(fd), 1.0)
    rel = np.abs(ad[idx] - fd) / denom
    worst = float(rel.max()) if rel.size else 0.0
    assert worst < rtol, f"autodiff vs finite differences: worst rel err {worst:.3e}"
    return worst
