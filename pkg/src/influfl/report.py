"""Run artifacts, seed batteries, gamma sweeps and method comparisons.

Each run writes a directory ``{out}/{method}_seed{seed}`` holding
``metrics.csv``, ``influence.csv``, ``influence_matrix.csv``, ``summary.json``
and ``effective_config.json``. Summaries are computed from the values as
written to ``metrics.csv`` so they can be recomputed from the CSV exactly.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import DEFAULT_GAMMA_SWEEP, RunConfig, normalize_method
from .orchestration import eval_splits, run_experiment

log = logging.getLogger(__name__)

PHASES = ("post_train", "post_agg")
METRICS_HEADER = ["round", "client", "split", "loss", "accuracy", "phase"]
INFLUENCE_HEADER = ["round", "client", "peer", "lambda"]
MATRIX_HEADER = ["round", "client", "peer", "class", "value"]


def fmt(x) -> str:
    return format(float(x), ".9g")


def run_dir(out_root, method, seed) -> Path:
    return Path(out_root) / f"{method}_seed{seed}"


# -- per-run CSVs ----------------------------------------------------------------


def write_metrics(records, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRICS_HEADER)
        for rec in records:
            for client, split, phase, loss, acc in rec.metrics:
                writer.writerow([rec.round, client, split, fmt(loss), fmt(acc), phase])


def read_metrics(path) -> list[dict]:
    """Strict reader: exact header, no ragged rows, numeric fields parsed."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != METRICS_HEADER:
            raise ValueError(f"{path}: header {header} != {METRICS_HEADER}")
        for lineno, rec in enumerate(reader, start=2):
            if len(rec) != len(METRICS_HEADER):
                raise ValueError(f"{path}:{lineno}: expected {len(METRICS_HEADER)} fields, got {len(rec)}")
            rows.append({
                "round": int(rec[0]),
                "client": int(rec[1]),
                "split": rec[2],
                "loss": float(rec[3]),
                "accuracy": float(rec[4]),
                "phase": rec[5],
            })
    return rows


def final_accuracies(rows, split, phase) -> np.ndarray:
    """Per-client accuracy at the last round that recorded ``phase`` on ``split``."""
    last = {}
    for row in rows:
        if row["split"] == split and row["phase"] == phase:
            key = row["client"]
            if key not in last or row["round"] >= last[key][0]:
                last[key] = (row["round"], row["accuracy"])
    return np.array([last[c][1] for c in sorted(last)])


def export_influence_traces(records, out_dir):
    """Write ``influence.csv`` and ``influence_matrix.csv`` in long format.

    Runs without influence measurement get header-only files.
    """
    out_dir = Path(out_dir)
    vec_path, mat_path = out_dir / "influence.csv", out_dir / "influence_matrix.csv"
    with open(vec_path, "w", newline="") as fv, open(mat_path, "w", newline="") as fm:
        vec, mat = csv.writer(fv, lineterminator="\n"), csv.writer(fm, lineterminator="\n")
        vec.writerow(INFLUENCE_HEADER)
        mat.writerow(MATRIX_HEADER)
        for rec in records:
            for client in sorted(rec.influence_vectors):
                for peer, value in enumerate(rec.influence_vectors[client]):
                    vec.writerow([rec.round, client, peer, fmt(value)])
            for client in sorted(rec.influence_matrices):
                weights = np.asarray(rec.influence_matrices[client])
                for peer in range(weights.shape[0]):
                    for c in range(weights.shape[1]):
                        mat.writerow([rec.round, client, peer, c, fmt(weights[peer, c])])
    return vec_path, mat_path


def read_influence(path) -> dict:
    """``{round: [M, M] array}`` from an ``influence.csv``."""
    cells = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        if next(reader) != INFLUENCE_HEADER:
            raise ValueError(f"{path}: unexpected header")
        for rec in reader:
            cells.setdefault(int(rec[0]), {})[(int(rec[1]), int(rec[2]))] = float(rec[3])
    out = {}
    for t, entries in cells.items():
        m = 1 + max(max(k) for k in entries)
        grid = np.full((m, m), np.nan)
        for (client, peer), value in entries.items():
            grid[client, peer] = value
        out[t] = grid
    return out


def write_run(result, out_root) -> Path:
    """Write every artifact of one finished run and return its directory."""
    config = result.config
    path = run_dir(out_root, config.method, result.seed)
    path.mkdir(parents=True, exist_ok=True)
    write_metrics(result.records, path / "metrics.csv")
    export_influence_traces(result.records, path)
    (path / "effective_config.json").write_text(config.to_json() + "\n")
    rows = read_metrics(path / "metrics.csv")
    split = eval_splits(config)[1]
    finals = {phase: final_accuracies(rows, split, phase).tolist() for phase in PHASES}
    deployed = result.deployed_accuracy(split)
    summary = {
        "method": config.method,
        "seed": result.seed,
        "rounds": config.rounds,
        "split": split,
        "final_accuracy": finals,
        "average_accuracy": {phase: float(np.mean(v)) if v else None for phase, v in finals.items()},
        # the model the method hands out: global aggregate for FedAvg/FedProx, else post_train
        "deployed_accuracy": deployed.tolist(),
        "deployed_average": float(deployed.mean()),
        "elapsed_seconds": result.elapsed,
    }
    (path / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return path


# -- batteries ---------------------------------------------------------------------


def mean_std(values):
    """``(mean, std)`` with population std; std is None for fewer than two values."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        return None, None
    # deviations from the first value keep identical inputs at exactly zero spread
    std = float((values - values[0]).std(axis=0)) if values.shape[0] >= 2 else None
    return float(values.mean(axis=0)), std


def format_cell(mean, std) -> str:
    """Percent ``mean(std)`` in table style, e.g. ``85.50(0.63)``."""
    if mean is None:
        return "n/a"
    if std is None:
        return f"{100 * mean:.2f}"
    return f"{100 * mean:.2f}({100 * std:.2f})"


@dataclass
class SummaryReport:
    method: str
    seeds: list
    # phase -> client -> (mean, std); phase -> (mean, std) for the client average
    per_client: dict = field(default_factory=dict)
    average: dict = field(default_factory=dict)
    per_seed: dict = field(default_factory=dict)  # seed -> phase -> list of accuracies
    failures: dict = field(default_factory=dict)  # seed -> message
    gamma: float = None

    @property
    def partial(self):
        return bool(self.failures)

    def cells(self, phase="post_train"):
        clients = [format_cell(*self.per_client[phase][c]) for c in sorted(self.per_client.get(phase, {}))]
        return clients + [format_cell(*self.average.get(phase, (None, None)))]

    def to_dict(self):
        return {
            "method": self.method,
            "gamma": self.gamma,
            "seeds": list(self.seeds),
            "partial": self.partial,
            "failures": {str(k): v for k, v in self.failures.items()},
            "per_seed": {str(k): v for k, v in self.per_seed.items()},
            "per_client": {
                phase: {str(c): {"mean": m, "std": s} for c, (m, s) in clients.items()}
                for phase, clients in self.per_client.items()
            },
            "average": {phase: {"mean": m, "std": s} for phase, (m, s) in self.average.items()},
            "table": {phase: self.cells(phase) for phase in self.per_client},
        }


def summarize(method, seeds, per_seed, failures, gamma=None) -> SummaryReport:
    report = SummaryReport(method, list(seeds), per_seed=per_seed, failures=failures, gamma=gamma)
    for phase in PHASES:
        runs = [np.asarray(per_seed[s][phase]) for s in seeds if s in per_seed]
        if not runs:
            continue
        stack = np.stack(runs)
        report.per_client[phase] = {c: mean_std(stack[:, c]) for c in range(stack.shape[1])}
        report.average[phase] = mean_std(stack.mean(axis=1))
    return report


def run_battery(config: RunConfig, seeds=None, out_root=None, run=run_experiment) -> SummaryReport:
    """Run one config over several seeds; a failing seed is recorded and skipped."""
    seeds = list(config.seeds if seeds is None else seeds)
    if not seeds:
        raise ValueError("run_battery needs at least one seed")
    out_root = Path(config.out_dir if out_root is None else out_root)
    split = eval_splits(config)[1]
    per_seed, failures = {}, {}
    for seed in seeds:
        try:
            result = run(config, seed=seed)
            path = write_run(result, out_root)
        except Exception as exc:  # recorded, battery continues
            log.error("%s seed %s failed: %s", config.method, seed, exc)
            failures[seed] = f"{type(exc).__name__}: {exc}"
            continue
        rows = read_metrics(path / "metrics.csv")
        per_seed[seed] = {phase: final_accuracies(rows, split, phase).tolist() for phase in PHASES}
    report = summarize(config.method, seeds, per_seed, failures, gamma=config.gamma)
    out_root.mkdir(parents=True, exist_ok=True)
    (out_root / f"battery_{config.method}.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    return report


# -- tables ---------------------------------------------------------------------------


def _table_rows(key_name, keyed_reports, clients):
    header = [key_name, "phase"]
    for c in range(clients):
        header += [f"client_{c}_mean", f"client_{c}_std"]
    header += ["average_mean", "average_std", "partial"]
    rows = []
    for key, report in keyed_reports:
        for phase in PHASES:
            row = [key, phase]
            per_client = report.per_client.get(phase, {})
            for c in range(clients):
                row += [_num(v) for v in per_client.get(c, (None, None))]
            row += [_num(v) for v in report.average.get(phase, (None, None))]
            row.append(int(report.partial))
            rows.append(row)
    return header, rows


def _num(value):
    return "" if value is None else fmt(value)


def _write_table(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def render_table(key_name, keyed_reports, phase="post_train") -> str:
    """Plain-text mean(std) table in percent, one row per key."""
    if not keyed_reports:
        return ""
    clients = max(len(r.per_client.get(phase, {})) for _, r in keyed_reports)
    header = [key_name] + [f"client {c}" for c in range(clients)] + ["avg"]
    body = [[str(key)] + report.cells(phase) for key, report in keyed_reports]
    widths = [max(len(row[i]) for row in [header] + body) for i in range(len(header))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)) for row in [header] + body]
    return "\n".join(lines)


def sweep_gamma(config: RunConfig, values=DEFAULT_GAMMA_SWEEP, out_root=None, run=run_experiment):
    """One battery per gamma under ``{out}/gamma_<g>/``; writes ``gamma_sweep.csv``."""
    out_root = Path(config.out_dir if out_root is None else out_root)
    reports = []
    for gamma in values:
        cfg = config.replace(gamma=float(gamma))
        report = run_battery(cfg, out_root=out_root / f"gamma_{fmt(gamma)}", run=run)
        reports.append((fmt(gamma), report))
    header, rows = _table_rows("gamma", reports, config.clients)
    out_root.mkdir(parents=True, exist_ok=True)
    _write_table(out_root / "gamma_sweep.csv", header, rows)
    return reports


def compare(config: RunConfig, methods, out_root=None, run=run_experiment):
    """One battery per method; writes ``comparison.csv`` and ``comparison.json``."""
    out_root = Path(config.out_dir if out_root is None else out_root)
    reports = []
    for name in methods:
        cfg = config.replace(method=normalize_method(name))
        reports.append((cfg.method, run_battery(cfg, out_root=out_root, run=run)))
    header, rows = _table_rows("method", reports, config.clients)
    out_root.mkdir(parents=True, exist_ok=True)
    _write_table(out_root / "comparison.csv", header, rows)
    payload = {method: report.to_dict() for method, report in reports}
    (out_root / "comparison.json").write_text(json.dumps(payload, indent=2) + "\n")
    return reports
