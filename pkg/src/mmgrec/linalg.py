"""Dense and sparse numeric kernels plus a central-difference gradient checker.

Vectors are 1-D float64 arrays; batches of vectors are 2-D arrays with one
vector per row, and every kernel accepts either form.
"""
from typing import Callable, Mapping

import numpy as np

from .errors import NumericError, ShapeError

# Interior clamp so that sigmoid outputs stay strictly inside (0, 1) in float64.
_SIGMOID_LO = np.nextafter(0.0, 1.0)
_SIGMOID_HI = np.nextafter(1.0, 0.0)


def affine(W: np.ndarray, x: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Return ``W @ x + b`` for a vector ``x`` or row-wise for a batch."""
    W = np.asarray(W, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if W.ndim != 2 or b.ndim != 1 or x.ndim not in (1, 2):
        raise ShapeError(f"affine expects 2-D W, 1-D b, 1-D/2-D x; got {W.shape}, {x.shape}, {b.shape}")
    if x.shape[-1] != W.shape[1]:
        raise ShapeError(f"W has {W.shape[1]} columns but x has length {x.shape[-1]}")
    if b.shape[0] != W.shape[0]:
        raise ShapeError(f"W has {W.shape[0]} rows but b has length {b.shape[0]}")
    return x @ W.T + b


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def sigmoid_stable(x: np.ndarray) -> np.ndarray:
    """Logistic function evaluated without overflow for any finite input.

    Results are clamped to the nearest representable values inside (0, 1), so
    e.g. ``sigmoid_stable(-1000)`` is the smallest positive subnormal, not 0.
    """
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    with np.errstate(under="ignore"):
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
    return np.clip(out, _SIGMOID_LO, _SIGMOID_HI)


def spmm_normalized(graph, X: np.ndarray) -> np.ndarray:
    """One symmetric-normalized neighbour aggregation.

    ``out[v] = sum_{u in N(v)} X[u] / sqrt(|N(v)| |N(u)|)``; isolated nodes
    get zero rows. ``graph`` is a :class:`mmgrec.graph.BipartiteGraph`.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] != graph.n_nodes:
        raise ShapeError(f"expected {graph.n_nodes} rows, got array of shape {X.shape}")
    return np.asarray(graph.operator @ X)


def finite_diff_errors(
    loss_fn: Callable[[Mapping[str, np.ndarray]], float],
    params: Mapping[str, np.ndarray],
    analytic_grads: Mapping[str, np.ndarray],
    eps: float = 1e-5,
    floor: float = 1e-8,
    max_entries: int | None = None,
    seed: int = 0,
) -> dict[str, float]:
    """Per-tensor maximum relative error between analytic and central-difference gradients.

    Entries of each array in ``params`` are perturbed in place and restored.
    The relative error of one entry is ``|a - n| / max(|a|, |n|, floor)``.
    If ``max_entries`` is set, at most that many entries per tensor are checked,
    chosen at random.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    rng = np.random.default_rng(seed)
    errors = {}
    for name, theta in params.items():
        grad = np.asarray(analytic_grads[name])
        if grad.shape != theta.shape:
            raise ShapeError(f"{name}: gradient shape {grad.shape} != parameter shape {theta.shape}")
        flat = theta.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        worst = 0.0
        for k in idx:
            orig = flat[k]
            flat[k] = orig + eps
            up = float(loss_fn(params))
            flat[k] = orig - eps
            down = float(loss_fn(params))
            flat[k] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NumericError(f"non-finite loss while perturbing {name}[{k}]")
            numeric = (up - down) / (2.0 * eps)
            analytic = float(grad.reshape(-1)[k])
            denom = max(abs(analytic), abs(numeric), floor)
            worst = max(worst, abs(analytic - numeric) / denom)
        errors[name] = worst
    return errors


def finite_diff_check(loss_fn, params, analytic_grads, eps: float = 1e-5, **kwargs) -> float:
    """Maximum relative gradient error over all checked entries of all tensors."""
    errs = finite_diff_errors(loss_fn, params, analytic_grads, eps=eps, **kwargs)
    return max(errs.values(), default=0.0)
