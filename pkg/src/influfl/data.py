"""Synthetic feature-shift client data.

All clients share C latent class means. Client ``m`` observes
``x = A_m (mu_c + eps) + b_m`` with ``eps ~ N(0, sigma^2 I)``. Clients in the
same similarity group draw ``(A_m, b_m)`` as small perturbations of a shared
group transform; group transforms are a common base embedding composed with a
group-specific random rotation of the latent space, so different groups see
the same classes laid out differently.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, UsageError
from .model import Batch

VAL_FRACTION = 0.2


@dataclass(frozen=True, eq=False)
class DomainSpec:
    class_means: np.ndarray  # [C, L]
    transforms: np.ndarray  # [M, D, L]
    offsets: np.ndarray  # [M, D]
    noise: float
    groups: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        c, latent = self.class_means.shape
        if c < 2:
            raise ConfigError(f"need at least 2 classes, got {c}")
        if latent < 1:
            raise ConfigError("latent dimension must be >= 1")
        if self.transforms.ndim != 3 or self.transforms.shape[2] != latent:
            raise ConfigError(f"transforms shape {self.transforms.shape} incompatible with L={latent}")
        m, d, _ = self.transforms.shape
        if d < latent:
            raise ConfigError(f"feature dim D={d} must be >= latent dim L={latent}")
        if self.offsets.shape != (m, d):
            raise ConfigError(f"offsets shape {self.offsets.shape}, expected {(m, d)}")
        if not self.noise > 0:
            raise ConfigError(f"noise scale must be > 0, got {self.noise}")
        members = sorted(i for g in self.groups for i in g)
        if members != list(range(m)):
            raise ConfigError(f"groups {self.groups} must partition clients 0..{m - 1}")

    @property
    def num_clients(self):
        return self.transforms.shape[0]

    @property
    def num_classes(self):
        return self.class_means.shape[0]

    @property
    def feature_dim(self):
        return self.transforms.shape[1]

    def group_of(self, client):
        for gid, members in enumerate(self.groups):
            if client in members:
                return gid
        raise KeyError(client)


def _random_rotation(rng, n):
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


def make_domain_spec(
    num_clients,
    num_classes,
    latent_dim,
    feature_dim,
    groups,
    noise,
    perturbation,
    class_sep=1.0,
    offset_scale=0.0,
    seed=0,
) -> DomainSpec:
    """Draw class means and group-correlated client transforms."""
    if num_clients < 1:
        raise ConfigError("need at least one client")
    if feature_dim < latent_dim:
        raise ConfigError(f"feature_dim ({feature_dim}) must be >= latent_dim ({latent_dim})")
    if perturbation < 0:
        raise ConfigError("perturbation must be >= 0")
    groups = tuple(tuple(int(i) for i in g) for g in groups)
    rng = np.random.default_rng(seed)
    means = class_sep * rng.standard_normal((num_classes, latent_dim))
    base = rng.standard_normal((feature_dim, latent_dim)) / np.sqrt(latent_dim)
    transforms = np.empty((num_clients, feature_dim, latent_dim))
    offsets = np.empty((num_clients, feature_dim))
    for members in groups:
        group_a = base @ _random_rotation(rng, latent_dim)
        group_b = offset_scale * rng.standard_normal(feature_dim)
        for m in members:
            if not 0 <= m < num_clients:
                raise ConfigError(f"group member {m} outside 0..{num_clients - 1}")
            jitter_a = rng.standard_normal((feature_dim, latent_dim)) / np.sqrt(latent_dim)
            jitter_b = rng.standard_normal(feature_dim)
            transforms[m] = group_a + perturbation * jitter_a
            offsets[m] = group_b + perturbation * jitter_b
    return DomainSpec(means, transforms, offsets, float(noise), groups)


@dataclass(frozen=True, eq=False)
class Split:
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        for arr in (self.x, self.y):
            arr.setflags(write=False)

    def __len__(self):
        return self.y.shape[0]

    def as_batch(self) -> Batch:
        return Batch(self.x, self.y)

    def class_counts(self, num_classes):
        return np.bincount(self.y, minlength=num_classes)


def _stratified_holdout(y, fraction, num_classes):
    # last ceil(fraction * n_c) samples of each class (in stored order) form the holdout
    val = np.zeros(len(y), dtype=bool)
    for c in range(num_classes):
        idx = np.flatnonzero(y == c)
        k = int(np.ceil(fraction * len(idx))) if len(idx) > 1 else 0
        if k:
            val[idx[-k:]] = True
    return val


@dataclass(frozen=True, eq=False)
class DatasetShard:
    """One client's data: disjoint train/test splits, plus a 20% train holdout.

    ``split("val")`` and ``split("fit")`` partition the train split; they are used
    when choosing hyperparameters, after which training runs on the full train split.
    """

    owner: int
    train: Split
    test: Split
    num_classes: int
    _val_mask: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        if self._val_mask is None:
            mask = _stratified_holdout(self.train.y, VAL_FRACTION, self.num_classes)
            object.__setattr__(self, "_val_mask", mask)

    def split(self, name) -> Split:
        if name == "train":
            return self.train
        if name == "test":
            return self.test
        if name == "val":
            return Split(self.train.x[self._val_mask], self.train.y[self._val_mask])
        if name == "fit":
            keep = ~self._val_mask
            return Split(self.train.x[keep], self.train.y[keep])
        raise UsageError(f"unknown split {name!r}; expected train, test, val or fit")

    @property
    def size(self):
        """|D_m|, the training-set size used for size-weighted averaging."""
        return len(self.train)

    def sizes(self):
        return {"train": len(self.train), "test": len(self.test)}


def _sample_client(spec, m, per_class, rng):
    c = spec.num_classes
    labels = np.repeat(np.arange(c), per_class)
    latent = spec.class_means[labels] + spec.noise * rng.standard_normal(
        (labels.size, spec.class_means.shape[1])
    )
    x = latent @ spec.transforms[m].T + spec.offsets[m]
    order = rng.permutation(labels.size)
    return np.ascontiguousarray(x[order]), labels[order].astype(np.int64)


def generate(spec: DomainSpec, train_per_class, test_per_class, seed) -> list[DatasetShard]:
    """Draw every client's shard. Same ``(spec, sizes, seed)`` gives identical arrays."""
    if train_per_class < 1 or test_per_class < 1:
        raise ConfigError("per-class split sizes must be >= 1")
    shards = []
    for m in range(spec.num_clients):
        rng = np.random.default_rng([*np.atleast_1d(seed).tolist(), m])
        xtr, ytr = _sample_client(spec, m, train_per_class, rng)
        xte, yte = _sample_client(spec, m, test_per_class, rng)
        shards.append(DatasetShard(m, Split(xtr, ytr), Split(xte, yte), spec.num_classes))
    return shards


def sample_batch(shard: DatasetShard, split, batch_size, rng: np.random.Generator) -> Batch:
    """Uniform draw without replacement; ``batch_size`` larger than the split is clamped."""
    data = shard.split(split)
    n = len(data)
    if n < 1:
        raise UsageError(f"split {split!r} of client {shard.owner} is empty")
    if batch_size < 1:
        raise UsageError("batch_size must be >= 1")
    idx = rng.permutation(n)[: min(batch_size, n)]
    return Batch(data.x[idx], data.y[idx])


def epoch_batches(data: Split, batch_size, rng: np.random.Generator):
    """Yield the minibatches of one shuffled pass (last batch may be short)."""
    order = rng.permutation(len(data))
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        yield data.x[idx], data.y[idx]


# -- CSV export -------------------------------------------------------------


def export_csv(shards, path):
    """One row per sample: client_id, split, label, f0..f{D-1}."""
    d = shards[0].train.x.shape[1]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["client_id", "split", "label", *[f"f{j}" for j in range(d)]])
        for shard in shards:
            for name in ("train", "test"):
                part = shard.split(name)
                for row, label in zip(part.x, part.y):
                    writer.writerow([shard.owner, name, int(label), *[repr(float(v)) for v in row]])


def import_csv(path, num_classes) -> list[DatasetShard]:
    rows = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:3] != ["client_id", "split", "label"]:
            raise UsageError(f"{path}: unexpected header {header[:3]}")
        width = len(header) - 3
        for lineno, rec in enumerate(reader, start=2):
            if len(rec) != width + 3:
                raise UsageError(f"{path}:{lineno}: expected {width + 3} fields, got {len(rec)}")
            key = (int(rec[0]), rec[1])
            rows.setdefault(key, ([], []))
            rows[key][0].append([float(v) for v in rec[3:]])
            rows[key][1].append(int(rec[2]))
    shards = []
    for owner in sorted({k[0] for k in rows}):
        parts = {}
        for name in ("train", "test"):
            xs, ys = rows.get((owner, name), ([], []))
            parts[name] = Split(
                np.asarray(xs, dtype=np.float64).reshape(-1, width), np.asarray(ys, dtype=np.int64)
            )
        shards.append(DatasetShard(owner, parts["train"], parts["test"], num_classes))
    return shards

