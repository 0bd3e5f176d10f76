"""Round-synchronous federated training.

Each round every client reads the same frozen snapshot of all client models,
runs stage 1 (aggregation, personalized for influence-based methods) and
stage 2 (local Adam epochs), and the new states replace the old ones only
after every client is done. Randomness comes from per-client streams keyed
by ``(seed, stream, client, round)``, so results do not depend on the order
or concurrency of client updates.
"""

from __future__ import annotations

import json
import logging
import shutil
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from . import data as datamod
from .aggregation import (
    add_proximal_grad_,
    aggregate_classifier,
    aggregate_repr,
    fedavg_aggregate,
    weighted_sum,
)
from .config import RunConfig
from .errors import DivergenceError, UsageError
from .influence import class_loss_matrix, client_loss_vector, influence_matrix, influence_vector
from .model import (
    Layout,
    ModelParams,
    OptimizerState,
    adam_update_,
    evaluate,
    init_params,
    load_params,
    loss_and_grad,
    save_params,
)

log = logging.getLogger(__name__)

STREAM_INIT = 1
STREAM_TRAIN = 2
STREAM_PROBE = 3


class Method(str, Enum):
    LOCAL = "local"
    FEDAVG = "fedavg"
    FEDPROX = "fedprox"
    FEDC2I = "fedc2i"
    FEDC2I_LAMBDA = "fedc2i_lambda"
    FEDC2I_MATRIX_LOCAL = "fedc2i_matrix_local"
    FEDC2I_MATRIX_GLOBAL = "fedc2i_matrix_global"

    @property
    def uses_vector(self):
        return self in (Method.FEDC2I, Method.FEDC2I_LAMBDA)

    @property
    def uses_matrix(self):
        return self in (Method.FEDC2I, Method.FEDC2I_MATRIX_LOCAL, Method.FEDC2I_MATRIX_GLOBAL)

    @property
    def measures_influence(self):
        return self.uses_vector or self.uses_matrix

    @property
    def deploys_global(self):
        """FedAvg and FedProx output one shared model; the rest keep per-client models."""
        return self in (Method.FEDAVG, Method.FEDPROX)


def stream(seed, kind, client=0, round_index=0) -> np.random.Generator:
    return np.random.default_rng([int(seed), kind, int(client), int(round_index)])


@dataclass
class ClientState:
    client: int
    params: ModelParams
    opt: OptimizerState
    shard: datamod.DatasetShard


@dataclass
class LocalUpdateResult:
    params: ModelParams
    opt: OptimizerState
    post_agg: ModelParams
    influence_vector: np.ndarray | None = None
    influence_matrix: np.ndarray | None = None


@dataclass
class RoundRecord:
    round: int
    # (client, split, phase, loss, accuracy), ordered by client
    metrics: list = field(default_factory=list)
    influence_vectors: dict = field(default_factory=dict)
    influence_matrices: dict = field(default_factory=dict)
    duration: float = 0.0

    def to_dict(self):
        return {
            "round": self.round,
            "metrics": [list(m) for m in self.metrics],
            "influence_vectors": {str(k): v.tolist() for k, v in self.influence_vectors.items()},
            "influence_matrices": {str(k): v.tolist() for k, v in self.influence_matrices.items()},
            "duration": self.duration,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            round=d["round"],
            metrics=[tuple(m) for m in d["metrics"]],
            influence_vectors={int(k): np.asarray(v) for k, v in d["influence_vectors"].items()},
            influence_matrices={int(k): np.asarray(v) for k, v in d["influence_matrices"].items()},
            duration=d["duration"],
        )


@dataclass
class RunResult:
    config: RunConfig
    seed: int
    records: list
    states: list
    shards: list
    domain: datamod.DomainSpec
    elapsed: float = 0.0

    def final_accuracy(self, phase="post_train", split=None):
        """Per-client test accuracy from the last recorded round of ``phase``."""
        split = split or eval_splits(self.config)[1]
        last = {}
        for rec in self.records:
            for client, s, ph, _, acc in rec.metrics:
                if s == split and ph == phase:
                    last[client] = acc
        if not last and phase == "post_agg":
            return self.final_accuracy("post_train", split)
        return np.array([last[c] for c in sorted(last)])

    def global_model(self) -> ModelParams:
        """Size-weighted average of the final client models (the FedAvg server model)."""
        return fedavg_aggregate([s.params for s in self.states], [s.size for s in self.shards])

    def deployed_accuracy(self, split=None):
        """Per-client accuracy of the model each method hands out after the last round.

        Shared-model methods are scored with the final global model on every
        client's data; personalized methods and Local with each client's own model.
        """
        split = split or eval_splits(self.config)[1]
        if Method(self.config.method).deploys_global and self.config.clients > 1:
            model = self.global_model()
            return np.array([evaluate(model, shard.split(split))[1] for shard in self.shards])
        return self.final_accuracy("post_train", split)


def eval_splits(config: RunConfig):
    """(training split, evaluation split) names for this config."""
    return ("fit", "val") if config.holdout else ("train", "test")


def layout_for(config: RunConfig) -> Layout:
    return Layout(config.data.feature_dim, config.hidden, config.classes, config.activation)


def build_domain(config: RunConfig, seed):
    d = config.data
    data_seed = seed if d.seed is None else d.seed
    spec = datamod.make_domain_spec(
        num_clients=config.clients,
        num_classes=config.classes,
        latent_dim=d.latent_dim,
        feature_dim=d.feature_dim,
        groups=d.groups,
        noise=d.noise,
        perturbation=d.perturbation,
        class_sep=d.class_sep,
        offset_scale=d.offset_scale,
        seed=[int(data_seed), 0],
    )
    shards = datamod.generate(spec, d.train_per_class, d.test_per_class, seed=[int(data_seed), 1])
    return spec, shards


# -- the two stages ----------------------------------------------------------


def aggregation_stage(m, snapshot, sizes, shard, config: RunConfig, method: Method, rng):
    """Stage 1. Returns ``(params, lambda or None, Lambda or None, prox_reference or None)``."""
    own = snapshot[m]
    n_clients = len(snapshot)
    if method is Method.LOCAL or n_clients == 1:
        lam = np.ones(1) if method.uses_vector else None
        mat = np.ones((1, config.classes)) if method.uses_matrix else None
        if method is Method.FEDPROX:
            return own, None, None, own.flat
        return own, lam, mat, None
    if method in (Method.FEDAVG, Method.FEDPROX):
        agg = fedavg_aggregate(snapshot, sizes)
        return agg, None, None, (agg.flat if method is Method.FEDPROX else None)

    probe = datamod.sample_batch(shard, eval_splits(config)[0], config.batch_size, rng)
    lam = mat = None
    if method.uses_vector:
        lam = influence_vector(client_loss_vector(m, snapshot, probe), config.gamma)
    if method.uses_matrix:
        mat = influence_matrix(class_loss_matrix(m, snapshot, probe), config.gamma)

    if method.uses_vector:
        theta = aggregate_repr([p.theta for p in snapshot], lam)
    elif method is Method.FEDC2I_MATRIX_GLOBAL:
        sizes = np.asarray(sizes, dtype=np.float64)
        theta = weighted_sum([p.theta for p in snapshot], sizes / sizes.sum())
    else:
        theta = own.theta
    params = own.with_theta(theta)

    if method.uses_matrix:
        w, b = aggregate_classifier(
            [(p.classifier_weight, p.classifier_bias) for p in snapshot],
            mat,
            own=m,
            literal=config.literal_eq10,
        )
        params = params.with_classifier(w, b)
    return params, lam, mat, None


def local_train(params: ModelParams, opt: OptimizerState, split, config: RunConfig, rng,
                prox_reference=None):
    """Stage 2: ``local_epochs`` passes of minibatch Adam. Returns ``(params, opt)``."""
    if config.reset_optimizer:
        opt = OptimizerState.zeros(params.layout)
    else:
        opt = opt.copy()
    if config.local_epochs == 0:
        return params, opt
    layout = params.layout
    flat = params.flat.copy()
    grad = np.empty_like(flat)
    for _ in range(config.local_epochs):
        for xb, yb in datamod.epoch_batches(split, config.batch_size, rng):
            loss_and_grad(layout, flat, xb, yb, grad)
            if prox_reference is not None:
                add_proximal_grad_(grad, flat, prox_reference, config.mu)
            opt = adam_update_(flat, grad, opt, config.lr, config.beta1, config.beta2, config.eps)
    return ModelParams(layout, flat), opt


def local_update(m, snapshot, shard, opt, config: RunConfig, seed, round_index,
                 sizes=None, method=None) -> LocalUpdateResult:
    """Both stages for client ``m`` against a frozen round-start snapshot."""
    method = Method(method or config.method)
    if sizes is None:
        sizes = [shard.size] * len(snapshot)
    probe_rng = stream(seed, STREAM_PROBE, m, round_index)
    train_rng = stream(seed, STREAM_TRAIN, m, round_index)
    agg, lam, mat, prox_ref = aggregation_stage(
        m, snapshot, sizes, shard, config, method, probe_rng
    )
    train_split = shard.split(eval_splits(config)[0])
    params, new_opt = local_train(agg, opt, train_split, config, train_rng, prox_ref)
    if not params.is_finite():
        bad = int(np.count_nonzero(~np.isfinite(params.flat)))
        raise DivergenceError(
            f"client {m}, round {round_index}: {bad} non-finite parameters after local training "
            f"(method={method.value}, lr={config.lr})",
            client=m,
            round_index=round_index,
        )
    return LocalUpdateResult(params, new_opt, agg, lam, mat)


def local_update_variant(m, snapshot, shard, opt, config, seed, round_index, variant, sizes=None):
    """Ablation entry point: ``variant`` is one of the ``fedc2i_*`` methods."""
    variant = Method(variant)
    if not variant.measures_influence:
        raise UsageError(f"{variant.value} is not an influence variant")
    return local_update(m, snapshot, shard, opt, config, seed, round_index, sizes, variant)


# -- the round loop ----------------------------------------------------------


def _evaluate_clients(params_list, shards, config, phase):
    train_name, eval_name = eval_splits(config)
    rows = []
    for m, (params, shard) in enumerate(zip(params_list, shards)):
        for split in (train_name, eval_name):
            loss, acc = evaluate(params, shard.split(split))
            rows.append((m, split, phase, loss, acc))
    return rows


def _checkpoint_dir(root, t):
    return Path(root) / f"round_{t:04d}"


def _write_checkpoint(root, t, states, records):
    target = _checkpoint_dir(root, t)
    tmp = target.with_name(target.name + ".tmp")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    for s in states:
        save_params(tmp / f"client_{s.client}.params", s.params, {"round": t})
        save_params(tmp / f"client_{s.client}.adam_m", ModelParams(s.params.layout, s.opt.m))
        save_params(
            tmp / f"client_{s.client}.adam_v",
            ModelParams(s.params.layout, s.opt.v),
            {"step": s.opt.step},
        )
    (tmp / "records.json").write_text(json.dumps([r.to_dict() for r in records]))
    if target.exists():
        shutil.rmtree(target)
    tmp.rename(target)


def _latest_checkpoint(root):
    root = Path(root)
    if not root.is_dir():
        return None
    done = sorted(p for p in root.glob("round_[0-9][0-9][0-9][0-9]") if p.is_dir())
    return done[-1] if done else None


def _load_checkpoint(path, states):
    restored = []
    for s in states:
        params, _ = load_params(path / f"client_{s.client}.params")
        m_buf, _ = load_params(path / f"client_{s.client}.adam_m")
        v_buf, extra = load_params(path / f"client_{s.client}.adam_v")
        opt = OptimizerState(m_buf.flat.copy(), v_buf.flat.copy(), int(extra["step"]))
        restored.append(ClientState(s.client, params, opt, s.shard))
    records = [RoundRecord.from_dict(d) for d in json.loads((path / "records.json").read_text())]
    return restored, records


def run_experiment(config: RunConfig, seed=None, checkpoint_dir=None, resume=False,
                   on_round=None) -> RunResult:
    """Run ``config.rounds`` rounds for one seed and return every round's record."""
    seed = config.seeds[0] if seed is None else int(seed)
    method = Method(config.method)
    started = time.perf_counter()
    domain, shards = build_domain(config, seed)
    layout = layout_for(config)
    init = init_params(layout, stream(seed, STREAM_INIT))
    states = [ClientState(m, init, OptimizerState.zeros(layout), shards[m]) for m in range(config.clients)]
    sizes = [shard.size for shard in shards]

    records = []
    start_round = 1
    if resume and checkpoint_dir is not None:
        latest = _latest_checkpoint(checkpoint_dir)
        if latest is not None:
            states, records = _load_checkpoint(latest, states)
            start_round = records[-1].round + 1
            log.info("resuming seed %d from %s", seed, latest)
    if not records:
        records.append(RoundRecord(0, _evaluate_clients([s.params for s in states], shards, config, "post_train")))

    pool = ThreadPoolExecutor(max_workers=config.threads) if config.threads > 1 else None
    try:
        for t in range(start_round, config.rounds + 1):
            tick = time.perf_counter()
            snapshot = tuple(s.params for s in states)
            before = [p.checksum() for p in snapshot]

            def work(m, snapshot=snapshot, t=t):
                st = states[m]
                return local_update(m, snapshot, st.shard, st.opt, config, seed, t, sizes, method)

            results = list(pool.map(work, range(config.clients))) if pool else [
                work(m) for m in range(config.clients)
            ]
            if [p.checksum() for p in snapshot] != before:
                raise RuntimeError(f"round {t}: snapshot changed during client updates")

            record = RoundRecord(t)
            post_agg = _evaluate_clients([r.post_agg for r in results], shards, config, "post_agg")
            post_train = _evaluate_clients([r.params for r in results], shards, config, "post_train")
            record.metrics = sorted(post_agg + post_train, key=lambda row: row[0])
            for m, r in enumerate(results):
                if r.influence_vector is not None:
                    record.influence_vectors[m] = r.influence_vector
                if r.influence_matrix is not None:
                    record.influence_matrices[m] = r.influence_matrix
            states = [ClientState(m, r.params, r.opt, shards[m]) for m, r in enumerate(results)]
            record.duration = time.perf_counter() - tick
            records.append(record)
            if checkpoint_dir is not None:
                _write_checkpoint(checkpoint_dir, t, states, records)
            if on_round is not None:
                on_round(record)
    finally:
        if pool is not None:
            pool.shutdown()

    return RunResult(config, seed, records, states, shards, domain, time.perf_counter() - started)
