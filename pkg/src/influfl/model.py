"""Dense network with a decoupled representation / classifier split.

Parameters live in one flat float64 buffer ordered as::

    [W_1, b_1, ..., W_k, b_k | W_cls (C x H), b_cls (C)]

so the representation part (``theta``) and the classifier part (``phi``) are
both contiguous slices, which keeps aggregation and Adam a single vector op.
Class ``c`` of the classifier is the pair ``(W_cls[c], b_cls[c])``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from . import _backend
from .errors import CacheMismatchError, ConfigError, UsageError

ACTIVATIONS = {"identity": 0, "tanh": 1, "relu": 2}

_FORMAT = "influfl-params"
_FORMAT_VERSION = 1


@dataclass(frozen=True)
class Layout:
    """Architecture description: input width, hidden widths, class count."""

    input_dim: int
    hidden: tuple[int, ...]
    num_classes: int
    activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.input_dim < 1:
            raise ConfigError(f"input_dim must be >= 1, got {self.input_dim}")
        if any(h < 1 for h in self.hidden):
            raise ConfigError(f"hidden widths must be >= 1, got {self.hidden}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(
                f"activation must be one of {sorted(ACTIVATIONS)}, got {self.activation!r}"
            )

    @property
    def feature_dim(self) -> int:
        """Width of the representation output (classifier input)."""
        return self.hidden[-1] if self.hidden else self.input_dim

    @property
    def act_code(self) -> int:
        return ACTIVATIONS[self.activation]

    @cached_property
    def _offsets(self):
        shapes = []
        fan_in = self.input_dim
        for width in self.hidden:
            shapes.append((width, fan_in))
            fan_in = width
        pos = 0
        repr_layers = []
        for out_dim, in_dim in shapes:
            w = (pos, pos + out_dim * in_dim, (out_dim, in_dim))
            pos = w[1]
            b = (pos, pos + out_dim)
            pos = b[1]
            repr_layers.append((w, b))
        repr_size = pos
        c, h = self.num_classes, self.feature_dim
        cls_w = (pos, pos + c * h, (c, h))
        pos = cls_w[1]
        cls_b = (pos, pos + c)
        return repr_layers, repr_size, cls_w, cls_b, cls_b[1]

    @property
    def repr_size(self) -> int:
        return self._offsets[1]

    @property
    def size(self) -> int:
        return self._offsets[4]

    def views(self, flat):
        """Split a flat buffer into ``([(W, b), ...], W_cls, b_cls)`` views."""
        repr_layers, _, cls_w, cls_b, _ = self._offsets
        layers = [
            (flat[w0:w1].reshape(shape), flat[b0:b1])
            for (w0, w1, shape), (b0, b1) in repr_layers
        ]
        w0, w1, shape = cls_w
        return layers, flat[w0:w1].reshape(shape), flat[cls_b[0] : cls_b[1]]

    def to_dict(self):
        return {
            "input_dim": self.input_dim,
            "hidden": list(self.hidden),
            "num_classes": self.num_classes,
            "activation": self.activation,
        }


def _readonly(arr):
    out = np.array(arr, dtype=np.float64, copy=True, order="C")
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Immutable parameter bundle ``{theta, phi}`` backed by one flat buffer."""

    layout: Layout
    flat: np.ndarray

    def __post_init__(self):
        flat = np.asarray(self.flat)
        if flat.ndim != 1 or flat.shape[0] != self.layout.size:
            raise ConfigError(
                f"flat parameter buffer has shape {flat.shape}, layout needs ({self.layout.size},)"
            )
        if flat.dtype != np.float64 or flat.flags.writeable or not flat.flags.c_contiguous:
            flat = _readonly(flat)
        object.__setattr__(self, "flat", flat)

    @property
    def repr_layers(self):
        return self.layout.views(self.flat)[0]

    @property
    def classifier_weight(self):
        return self.layout.views(self.flat)[1]

    @property
    def classifier_bias(self):
        return self.layout.views(self.flat)[2]

    @property
    def theta(self):
        """Representation parameters as a flat read-only view."""
        return self.flat[: self.layout.repr_size]

    @property
    def phi(self):
        """Classifier parameters as a flat read-only view."""
        return self.flat[self.layout.repr_size :]

    def class_unit(self, c):
        """``(weight row, bias)`` for class ``c``."""
        return self.classifier_weight[c], self.classifier_bias[c]

    def with_theta(self, theta) -> ModelParams:
        flat = self.flat.copy()
        flat[: self.layout.repr_size] = theta
        return ModelParams(self.layout, flat)

    def with_phi(self, phi) -> ModelParams:
        flat = self.flat.copy()
        flat[self.layout.repr_size :] = phi
        return ModelParams(self.layout, flat)

    def with_classifier(self, weight, bias) -> ModelParams:
        flat = self.flat.copy()
        _, w_cls, b_cls = self.layout.views(flat)
        w_cls[...] = weight
        b_cls[...] = bias
        return ModelParams(self.layout, flat)

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.flat).all())

    def checksum(self) -> str:
        import hashlib

        return hashlib.sha256(self.flat.tobytes()).hexdigest()

    def equals(self, other) -> bool:
        return self.layout == other.layout and np.array_equal(self.flat, other.flat)


def zeros(layout: Layout) -> ModelParams:
    return ModelParams(layout, np.zeros(layout.size))


def init_params(layout: Layout, rng: np.random.Generator) -> ModelParams:
    """Glorot-uniform weights, zero biases."""
    flat = np.zeros(layout.size)
    layers, w_cls, _ = layout.views(flat)
    for w, _ in [*layers, (w_cls, None)]:
        fan_out, fan_in = w.shape
        a = np.sqrt(6.0 / (fan_in + fan_out))
        w[...] = rng.uniform(-a, a, size=w.shape)
    return ModelParams(layout, flat)


@dataclass(frozen=True, eq=False)
class Batch:
    """Feature matrix ``[B, D]`` with integer labels ``[B]``."""

    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        x = np.ascontiguousarray(self.inputs, dtype=np.float64)
        y = np.ascontiguousarray(self.labels, dtype=np.int64)
        if x.ndim != 2:
            raise UsageError(f"batch inputs must be 2-D, got shape {x.shape}")
        if y.ndim != 1 or y.shape[0] != x.shape[0]:
            raise UsageError(f"labels shape {y.shape} does not match inputs {x.shape}")
        if x.shape[0] < 1:
            raise UsageError("batch must contain at least one sample")
        if y.min() < 0:
            raise UsageError("labels must be non-negative")
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "labels", y)

    def __len__(self):
        return self.labels.shape[0]


@dataclass(frozen=True, eq=False)
class OptimizerState:
    """Adam first/second moments (same layout as the parameters) and step count."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, layout: Layout) -> OptimizerState:
        return cls(np.zeros(layout.size), np.zeros(layout.size), 0)

    def copy(self) -> OptimizerState:
        return OptimizerState(self.m.copy(), self.v.copy(), self.step)


@dataclass(frozen=True, eq=False)
class ActivationCache:
    params: ModelParams
    batch: Batch
    activations: list = field(repr=False)
    logits: np.ndarray = field(repr=False)


def _check_input(layout, x):
    if x.shape[1] != layout.input_dim:
        raise ConfigError(
            f"input width {x.shape[1]} does not match first-layer width {layout.input_dim}"
        )


def _check_labels(labels, num_classes):
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise UsageError(f"labels must lie in [0, {num_classes})")


def represent(params: ModelParams, inputs) -> np.ndarray:
    """Representation output ``[B, H]`` (no classifier)."""
    k = _backend.active
    x = np.ascontiguousarray(inputs, dtype=np.float64)
    _check_input(params.layout, x)
    act = params.layout.act_code
    for w, b in params.repr_layers:
        x = k.dense_forward(x, w, b, act)
    return x


def classify(features, weight, bias) -> np.ndarray:
    """Linear classifier head on precomputed features."""
    return _backend.active.dense_forward(
        np.ascontiguousarray(features), np.ascontiguousarray(weight), np.ascontiguousarray(bias), 0
    )


def _forward_flat(layout, flat, x):
    k = _backend.active
    act = layout.act_code
    layers, w_cls, b_cls = layout.views(flat)
    acts = [x]
    for w, b in layers:
        acts.append(k.dense_forward(acts[-1], w, b, act))
    logits = k.dense_forward(acts[-1], w_cls, b_cls, 0)
    return acts, logits


def forward(params: ModelParams, batch: Batch):
    """Return ``(logits [B, C], cache)``."""
    _check_input(params.layout, batch.inputs)
    acts, logits = _forward_flat(params.layout, params.flat, batch.inputs)
    return logits, ActivationCache(params, batch, acts, logits)


def loss_ce(logits, labels) -> float:
    """Mean softmax cross-entropy over the batch."""
    logits = np.ascontiguousarray(logits, dtype=np.float64)
    labels = np.ascontiguousarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],) or logits.shape[0] == 0:
        raise UsageError(f"logits {logits.shape} and labels {labels.shape} are incompatible")
    _check_labels(labels, logits.shape[1])
    return _backend.active.softmax_xent(logits, labels, None)


def _backward_flat(layout, flat, acts, logits, labels, grad_flat):
    k = _backend.active
    act = layout.act_code
    layers, w_cls, _ = layout.views(flat)
    g_layers, gw_cls, gb_cls = layout.views(grad_flat)
    d_logits = np.empty_like(logits)
    loss = k.softmax_xent(logits, labels, d_logits)
    grad = k.dense_backward(d_logits, logits, acts[-1], w_cls, 0, gw_cls, gb_cls, bool(layers))
    for idx in range(len(layers) - 1, -1, -1):
        w, _ = layers[idx]
        gw, gb = g_layers[idx]
        grad = k.dense_backward(grad, acts[idx + 1], acts[idx], w, act, gw, gb, idx > 0)
    return loss


def backward(params: ModelParams, batch: Batch, cache: ActivationCache) -> ModelParams:
    """Exact gradient of :func:`loss_ce` w.r.t. every parameter, as a ModelParams mirror."""
    if cache.params is not params or cache.batch is not batch:
        raise CacheMismatchError("activation cache was produced by a different forward call")
    _check_labels(batch.labels, params.layout.num_classes)
    grad = np.zeros(params.layout.size)
    _backward_flat(params.layout, params.flat, cache.activations, cache.logits, batch.labels, grad)
    return ModelParams(params.layout, grad)


def loss_and_grad(layout: Layout, flat, inputs, labels, grad_out) -> float:
    """Fused forward + backward on raw buffers; writes the gradient into ``grad_out``."""
    acts, logits = _forward_flat(layout, flat, inputs)
    return _backward_flat(layout, flat, acts, logits, labels, grad_out)


def adam_update_(flat, grad, state: OptimizerState, lr, beta1, beta2, eps) -> OptimizerState:
    """In-place Adam on ``flat`` and on the moment buffers of ``state``."""
    step = state.step + 1
    _backend.active.adam_update(flat, grad, state.m, state.v, lr, beta1, beta2, eps, step)
    return OptimizerState(state.m, state.v, step)


def adam_step(params, grads, state, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam step (no weight decay). Inputs are left untouched."""
    if grads.layout != params.layout or state.m.shape != params.flat.shape:
        raise UsageError("parameter, gradient and optimizer shapes differ")
    flat = params.flat.copy()
    new_state = adam_update_(flat, grads.flat, state.copy(), lr, beta1, beta2, eps)
    return ModelParams(params.layout, flat), new_state


def predict_logits(params: ModelParams, inputs) -> np.ndarray:
    x = np.ascontiguousarray(inputs, dtype=np.float64)
    _check_input(params.layout, x)
    return _forward_flat(params.layout, params.flat, x)[1]


def evaluate(params: ModelParams, split) -> tuple[float, float]:
    """``(mean CE loss, accuracy)`` on a split; ties in argmax go to the lowest class."""
    if len(split.y) == 0:
        raise UsageError("cannot evaluate on an empty split")
    logits = predict_logits(params, split.x)
    loss = loss_ce(logits, split.y)
    acc = float(np.mean(np.argmax(logits, axis=1) == split.y))
    return loss, acc


# -- serialization ---------------------------------------------------------


def params_to_bytes(params: ModelParams, extra=None) -> bytes:
    header = {
        "format": _FORMAT,
        "version": _FORMAT_VERSION,
        "layout": params.layout.to_dict(),
        "repr_size": params.layout.repr_size,
        "count": params.layout.size,
        "dtype": "<f8",
    }
    if extra:
        header["extra"] = extra
    blob = json.dumps(header, sort_keys=True).encode()
    return struct.pack("<Q", len(blob)) + blob + params.flat.astype("<f8").tobytes()


def params_from_bytes(data: bytes):
    """Inverse of :func:`params_to_bytes`; returns ``(params, extra)``."""
    (n,) = struct.unpack_from("<Q", data, 0)
    header = json.loads(data[8 : 8 + n].decode())
    if header.get("format") != _FORMAT:
        raise UsageError("not a parameter file")
    layout = Layout(**{**header["layout"], "hidden": tuple(header["layout"]["hidden"])})
    flat = np.frombuffer(data, dtype="<f8", count=header["count"], offset=8 + n)
    return ModelParams(layout, flat.astype(np.float64)), header.get("extra")


def save_params(path, params: ModelParams, extra=None):
    Path(path).write_bytes(params_to_bytes(params, extra))


def load_params(path):
    return params_from_bytes(Path(path).read_bytes())
