"""Leave-one-out influence measurement.

For client ``m`` and every client ``i`` (``m`` itself included) we build an
aggregate without ``i``, score it on a probe batch from ``m``'s training data,
and turn the losses into weights with a tempered normalization: removing a
helpful client raises the loss, so that client gets a larger weight.
"""

from __future__ import annotations

import numpy as np

from .aggregation import weighted_sum
from .errors import UsageError
from .model import Batch, ModelParams, classify, forward, loss_ce, represent


def _loo_mean(stack, excluded):
    m = len(stack)
    if m < 2:
        raise UsageError("leave-one-out needs at least two clients")
    if not 0 <= excluded < m:
        raise UsageError(f"excluded index {excluded} outside 0..{m - 1}")
    rest = [stack[j] for j in range(m) if j != excluded]
    return weighted_sum(rest, np.full(m - 1, 1.0 / (m - 1)))


def loo_repr(all_repr, excluded):
    """Unweighted mean of every representation except client ``excluded``."""
    return _loo_mean([np.asarray(t, dtype=np.float64) for t in all_repr], excluded)


def loo_class_vector(all_cls, excluded, c):
    """Mean of class ``c``'s ``(row, bias)`` over all clients except ``excluded``."""
    rows = [np.append(w[c], b[c]) for w, b in all_cls]
    unit = _loo_mean(rows, excluded)
    return unit[:-1], unit[-1]


def client_loss_vector(m, all_params, probe: Batch):
    """Losses of ``{theta^{-i}, phi_m}`` on the probe, for i = 0..M-1."""
    own = all_params[m]
    thetas = [p.theta for p in all_params]
    losses = np.empty(len(all_params))
    for i in range(len(all_params)):
        model = own.with_theta(loo_repr(thetas, i))
        logits, _ = forward(model, probe)
        losses[i] = loss_ce(logits, probe.labels)
    return losses


def class_loss_matrix(m, all_params, probe: Batch):
    """``[M, C]`` losses with client ``m``'s class-``c`` unit swapped for its leave-``i``-out mean.

    The feature extractor is client ``m``'s own representation, so features are
    computed once and only one logit column changes per entry.
    """
    own: ModelParams = all_params[m]
    n_clients = len(all_params)
    if n_clients < 2:
        raise UsageError("leave-one-out needs at least two clients")
    features = represent(own, probe.inputs)
    base = classify(features, own.classifier_weight, own.classifier_bias)
    rows = np.asarray([p.classifier_weight for p in all_params])
    bias = np.asarray([p.classifier_bias for p in all_params])
    num_classes = rows.shape[1]
    out = np.empty((n_clients, num_classes))
    for i in range(n_clients):
        w_loo = _loo_mean(rows, i)
        b_loo = _loo_mean(bias, i)
        swapped = classify(features, w_loo, b_loo)
        for c in range(num_classes):
            logits = base.copy()
            logits[:, c] = swapped[:, c]
            out[i, c] = loss_ce(logits, probe.labels)
    return out


def influence_weights(losses, gamma):
    """Tempered normalization along axis 0: ``l_i^gamma / sum_j l_j^gamma``.

    Works on a loss vector ``[M]`` or column-wise on a loss matrix ``[M, C]``.
    ``gamma = 0`` and all-zero columns give uniform weights. Evaluated in log
    space so large ``gamma`` neither overflows nor underflows.
    """
    losses = np.asarray(losses, dtype=np.float64)
    if gamma < 0:
        raise UsageError(f"gamma must be >= 0, got {gamma}")
    if losses.ndim not in (1, 2) or losses.shape[0] < 1:
        raise UsageError(f"losses must be a non-empty vector or matrix, got {losses.shape}")
    if not np.isfinite(losses).all() or (losses < 0).any():
        raise UsageError("losses must be finite and non-negative")
    n = losses.shape[0]
    uniform = np.full(losses.shape, 1.0 / n)
    if gamma == 0:
        return uniform
    with np.errstate(divide="ignore"):
        logs = np.log(losses)
    top = logs.max(axis=0)
    degenerate = ~np.isfinite(top)  # whole column is zero
    shifted = np.where(degenerate, 0.0, logs - np.where(degenerate, 0.0, top))
    powered = np.exp(gamma * shifted)
    weights = powered / powered.sum(axis=0)
    return np.where(degenerate, uniform, weights)


def influence_vector(losses, gamma):
    losses = np.asarray(losses, dtype=np.float64)
    if losses.ndim != 1:
        raise UsageError("influence_vector expects a loss vector")
    return influence_weights(losses, gamma)


def influence_matrix(losses, gamma):
    losses = np.asarray(losses, dtype=np.float64)
    if losses.ndim != 2:
        raise UsageError("influence_matrix expects an [M, C] loss matrix")
    return influence_weights(losses, gamma)
