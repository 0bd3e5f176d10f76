"""Parameter-combination rules: size-weighted averaging, influence-weighted
personalized aggregation, and the proximal local objective."""

from __future__ import annotations

import numpy as np

from .errors import UsageError
from .model import ModelParams, forward, loss_ce

WEIGHT_TOL = 1e-9


def check_weights(weights, n):
    """Validate a weight vector ``[n]`` or per-class matrix ``[n, C]``; returns float64 array."""
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim not in (1, 2) or w.shape[0] != n:
        raise UsageError(f"weights of shape {w.shape} do not match {n} clients")
    if not np.isfinite(w).all() or (w < 0).any():
        raise UsageError("weights must be finite and non-negative")
    if np.abs(w.sum(axis=0) - 1.0).max() > WEIGHT_TOL:
        raise UsageError(f"weights must sum to 1 (per column), got {w.sum(axis=0)}")
    return w


def weighted_sum(stack, weights):
    """Convex combination along axis 0.

    ``weights`` is ``[K]`` or ``[K, C]``; a 2-D weight applies per row ``c`` of
    each ``stack[k]`` (shape ``[C, ...]``). Evaluated as
    ``ref + sum_k w_k (stack[k] - ref)`` where ``ref`` is the tensor holding the
    largest weight (first on ties, per column). Identical inputs and one-hot
    weights therefore come back bit-for-bit unchanged.
    """
    stack = np.asarray(stack, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape[0] != stack.shape[0]:
        raise UsageError(f"{w.shape[0]} weights for {stack.shape[0]} tensors")
    pad = (1,) * (stack.ndim - w.ndim)
    top = np.argmax(w, axis=0)
    if w.ndim == 1:
        ref = stack[top]
    else:
        ref = stack[top, np.arange(w.shape[1])]
    acc = ref.copy()
    for k in range(stack.shape[0]):
        delta = stack[k] - ref
        acc += w[k].reshape(w[k].shape + pad) * delta
    return acc


def fedavg_aggregate(all_params, sizes) -> ModelParams:
    """Size-weighted average of every tensor: ``sum_m |D_m|/N * w_m``."""
    sizes = np.asarray(sizes, dtype=np.float64)
    if len(all_params) == 0 or sizes.shape != (len(all_params),):
        raise UsageError("need one size per client")
    if (sizes <= 0).any():
        raise UsageError("dataset sizes must be > 0")
    weights = sizes / sizes.sum()
    flat = weighted_sum([p.flat for p in all_params], weights)
    return ModelParams(all_params[0].layout, flat)


def aggregate_repr(all_repr, weights):
    """Personalized representation: ``sum_i lambda_i * theta_i`` (flat arrays)."""
    w = check_weights(weights, len(all_repr))
    if w.ndim != 1:
        raise UsageError("representation weights must be a vector")
    return weighted_sum(all_repr, w)


def aggregate_classifier(all_cls, weights, own=None, literal=False):
    """Per-class classifier aggregation with an ``[M, C]`` influence matrix.

    ``all_cls`` holds ``(weight [C, H], bias [C])`` pairs. Row ``c`` (and its bias)
    becomes ``sum_i Lambda[i, c] * phi_{i, c}``. With ``literal=True`` the sum uses
    the client's own row ``phi_{own, c}`` for every term instead, which returns
    that row unchanged.
    """
    m = len(all_cls)
    w = check_weights(weights, m)
    if w.ndim != 2:
        raise UsageError("classifier weights must be an [M, C] matrix")
    rows = np.asarray([c[0] for c in all_cls], dtype=np.float64)
    bias = np.asarray([c[1] for c in all_cls], dtype=np.float64)
    if rows.ndim != 3 or bias.shape != rows.shape[:2] or w.shape[1] != rows.shape[1]:
        raise UsageError(
            f"classifier shapes {rows.shape}/{bias.shape} do not match weights {w.shape}"
        )
    if literal:
        if own is None:
            raise UsageError("literal aggregation needs the owning client index")
        rows = np.repeat(rows[own : own + 1], m, axis=0)
        bias = np.repeat(bias[own : own + 1], m, axis=0)
    return weighted_sum(rows, w), weighted_sum(bias, w)


def proximal_term(flat, global_flat, mu):
    diff = np.asarray(flat) - np.asarray(global_flat)
    return 0.5 * mu * float(diff @ diff)


def add_proximal_grad_(grad, flat, global_flat, mu):
    """``grad += mu * (w - w_global)`` in place."""
    if mu:
        grad += mu * (flat - global_flat)


def fedprox_local_loss(params, global_params, batch, mu) -> float:
    """Cross-entropy plus ``(mu / 2) * ||w - w_global||^2`` over all parameters."""
    if mu < 0:
        raise UsageError(f"mu must be >= 0, got {mu}")
    logits, _ = forward(params, batch)
    return loss_ce(logits, batch.labels) + proximal_term(params.flat, global_params.flat, mu)
