"""Metrics, the (injection frequency x initial labels) sweep, and report writers."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .engine import AdaptConfig, PretrainedModel, frozen_predictions, run_group, schedule_stream
from .exceptions import ContractViolation, InsufficientData, OttaError, UndefinedCorrelation
from .signals import take_initial

log = logging.getLogger(__name__)


def mae(preds, truths) -> float:
    p = np.asarray(preds, dtype=np.float64)
    t = np.asarray(truths, dtype=np.float64)
    if p.shape != t.shape or p.ndim != 1:
        raise ContractViolation(f"mae needs two equal-length vectors, got {p.shape} and {t.shape}")
    if p.size == 0:
        raise ContractViolation("mae of empty input")
    return float(np.abs(p - t).mean())


def pearson(preds, truths) -> float:
    p = np.asarray(preds, dtype=np.float64)
    t = np.asarray(truths, dtype=np.float64)
    if p.shape != t.shape or p.ndim != 1:
        raise ContractViolation("pearson needs two equal-length vectors")
    if p.size < 2:
        raise ContractViolation("pearson needs at least two points")
    pc = p - p.mean()
    tc = t - t.mean()
    spp = float(pc @ pc)
    stt = float(tc @ tc)
    if spp == 0.0 or stt == 0.0:
        raise UndefinedCorrelation("zero variance")
    # one square root of the product keeps exactly (anti)correlated inputs at exactly +-1
    return float(np.clip(float(pc @ tc) / math.sqrt(spp * stt), -1.0, 1.0))


@dataclass(frozen=True)
class RunMetrics:
    mae_sbp: float
    mae_dbp: float
    corr_sbp: Optional[float]
    corr_dbp: Optional[float]
    n_eval: int


def _corr_or_none(p, t):
    try:
        return pearson(p, t)
    except UndefinedCorrelation:
        return None


def evaluate(log_) -> RunMetrics:
    """Metrics over the logged (unlabeled) predictions that have ground truth."""
    rows = [p for p in log_.predictions if p.true_sbp is not None and p.true_dbp is not None]
    if len(rows) < 2:
        raise InsufficientData(f"subject {log_.subject_id}: {len(rows)} scorable predictions, need >= 2")
    ps = np.array([p.pred_sbp for p in rows])
    pd_ = np.array([p.pred_dbp for p in rows])
    ts = np.array([p.true_sbp for p in rows])
    td = np.array([p.true_dbp for p in rows])
    return RunMetrics(mae(ps, ts), mae(pd_, td), _corr_or_none(ps, ts), _corr_or_none(pd_, td), len(rows))


def _mean_or_none(values):
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def aggregate(metrics_by_seed) -> "CellResult":
    """Mean over subjects within each seed, then over seeds.

    ``metrics_by_seed`` maps seed -> list of RunMetrics. Correlations that are
    undefined for a run are left out of that run's average; a cell with no
    defined correlation reports it as missing.
    """
    per_seed = []
    n_runs = 0
    for seed in sorted(metrics_by_seed):
        ms = metrics_by_seed[seed]
        n_runs += len(ms)
        per_seed.append({
            "mae_sbp": _mean_or_none([m.mae_sbp for m in ms]),
            "mae_dbp": _mean_or_none([m.mae_dbp for m in ms]),
            "corr_sbp": _mean_or_none([m.corr_sbp for m in ms]),
            "corr_dbp": _mean_or_none([m.corr_dbp for m in ms]),
            "n_eval": _mean_or_none([m.n_eval for m in ms]),
        })
    out = {k: _mean_or_none([s[k] for s in per_seed]) for k in per_seed[0]}
    metrics = RunMetrics(out["mae_sbp"], out["mae_dbp"], out["corr_sbp"], out["corr_dbp"], int(round(out["n_eval"])))
    return CellResult(metrics, n_runs)


@dataclass
class CellResult:
    metrics: Optional[RunMetrics]
    n_runs: int
    error: Optional[str] = None


def baseline_no_adapt(pretrained: PretrainedModel, streams) -> RunMetrics:
    """Frozen-model metrics over every event, averaged uniformly over subjects."""
    logs = frozen_predictions(pretrained, streams)
    return aggregate({0: [evaluate(l) for l in logs]}).metrics


@dataclass
class SweepGrid:
    frequencies: list = field(default_factory=lambda: [None, 100, 50, 20, 10])
    init_label_counts: list = field(default_factory=lambda: [0, 10, 20, 50])
    subjects: Optional[int] = None
    seeds: list = field(default_factory=lambda: [0])

    def __post_init__(self):
        if not self.frequencies or not self.init_label_counts or not self.seeds:
            raise ContractViolation("sweep grid axes must be nonempty")
        if self.subjects is not None and self.subjects < 1:
            raise ContractViolation("subjects must be >= 1")


@dataclass
class ReportTable:
    grid: SweepGrid
    cells: dict  # (F, N0) -> CellResult
    baseline: CellResult
    provenance: dict = field(default_factory=dict)

    @property
    def failed(self) -> list:
        return [k for k, c in self.cells.items() if c.error is not None]

    def rows(self) -> list:
        """Long-format records: one per (frequency, init_labels, metric, target)."""
        out = []
        entries = [(("baseline", "baseline"), self.baseline)] + [
            ((_fmt_f(F), str(n0)), self.cells[(F, n0)])
            for F in self.grid.frequencies for n0 in self.grid.init_label_counts
        ]
        for (f, n0), cell in entries:
            for metric in ("mae", "corr"):
                for target in ("sbp", "dbp"):
                    value = None if cell.metrics is None else getattr(cell.metrics, f"{metric}_{target}")
                    out.append({
                        "frequency": f, "init_labels": n0, "metric": metric, "target": target,
                        "value": "NA" if value is None else repr(float(value)),
                        "n_eval": "NA" if cell.metrics is None else cell.metrics.n_eval,
                        "n_runs": cell.n_runs,
                    })
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        for k, v in sorted(self.provenance.items()):
            buf.write(f"# {k}={v}\n")
        w = csv.DictWriter(buf, ["frequency", "init_labels", "metric", "target", "value", "n_eval", "n_runs"],
                           lineterminator="\n")
        w.writeheader()
        w.writerows(self.rows())
        return buf.getvalue()

    def to_text(self) -> str:
        n0s = self.grid.init_label_counts
        colw = 15
        lines = []
        for k, v in sorted(self.provenance.items()):
            lines.append(f"# {k}={v}")
        head = f"{'Injection':>10} | {'':>11} | " + " | ".join(f"{('N0=' + str(n)):^{colw}}" for n in n0s)
        sub = f"{'frequency':>10} | {'':>11} | " + " | ".join(f"{'SBP':>7} {'DBP':>7}" for _ in n0s)
        lines += [head, sub, "-" * len(head)]
        for F in self.grid.frequencies:
            for metric, title in (("mae", "MAE"), ("corr", "Correlation")):
                cells = []
                for n0 in n0s:
                    c = self.cells[(F, n0)]
                    if c.error is not None:
                        cells.append(f"{'FAILED':>15}")
                        continue
                    a = getattr(c.metrics, f"{metric}_sbp")
                    b = getattr(c.metrics, f"{metric}_dbp")
                    cells.append(f"{_num(a):>7} {_num(b):>7}")
                label = _fmt_f(F) if metric == "mae" else ""
                lines.append(f"{label:>10} | {title:>11} | " + " | ".join(cells))
            lines.append("-" * len(head))
        b = self.baseline.metrics
        lines.append(
            f"No adaptation: [MAE] {_num(b.mae_sbp)}/{_num(b.mae_dbp)}; "
            f"[Correlation] {_num(b.corr_sbp)}/{_num(b.corr_dbp)} (SBP/DBP)"
        )
        return "\n".join(lines) + "\n"


def _fmt_f(F):
    return "N/A" if F is None else str(F)


def _num(x):
    return "NA" if x is None else f"{x:.2f}"


def _run_cell(pretrained, streams, cfg: AdaptConfig, seeds, group_size):
    # every (seed, subject) run is independent; runs of equal length share a
    # label layout (the schedule does not depend on the seed) and can advance
    # together in one lockstep group
    runs = []
    for seed in seeds:
        c = cfg.replace(seed=seed)
        runs += [(seed, j, schedule_stream(s, c)) for j, s in enumerate(streams)]
    by_len = {}
    for k, (_, _, s) in enumerate(runs):
        by_len.setdefault(s.T, []).append(k)
    logs = [None] * len(runs)
    for T in sorted(by_len):
        idx = by_len[T]
        for start in range(0, len(idx), group_size):
            chunk = idx[start:start + group_size]
            out = run_group(pretrained, [runs[k][2] for k in chunk], cfg, seeds=[runs[k][0] for k in chunk])
            for k, lg in zip(chunk, out):
                logs[k] = lg
    by_seed = {seed: [] for seed in seeds}
    for (seed, _, _), lg in zip(runs, logs):
        by_seed[seed].append(evaluate(lg))
    return aggregate(by_seed)


def prepare_streams(streams, n_init: int) -> list:
    """Make sure each stream has at least ``n_init`` pre-stream labeled samples."""
    return [take_initial(s, n_init) for s in streams]


def sweep(grid: SweepGrid, pretrained: PretrainedModel, streams, cfg: AdaptConfig, group_size: int = 128,
          jobs: int = 1) -> ReportTable:
    """Run every (F, N0) cell over subjects x seeds and average.

    Subjects are ordered by id before running, so the table does not depend on
    input order. A failing cell is recorded and the remaining cells proceed.
    """
    streams = sorted(streams, key=lambda s: s.subject_id)
    if grid.subjects is not None:
        streams = streams[:grid.subjects]
    if not streams:
        raise ContractViolation("sweep needs at least one stream")
    streams = prepare_streams(streams, max(grid.init_label_counts))
    keys = [(F, n0) for F in grid.frequencies for n0 in grid.init_label_counts]

    def one(key):
        F, n0 = key
        try:
            return key, _run_cell(pretrained, streams, cfg.replace(injection_frequency=F, init_labels=n0),
                                  grid.seeds, group_size)
        except OttaError as exc:
            log.warning("cell F=%s N0=%s failed: %s", _fmt_f(F), n0, exc)
            return key, CellResult(None, 0, error=str(exc))

    if jobs != 1:
        from joblib import Parallel, delayed

        results = Parallel(n_jobs=jobs)(delayed(one)(k) for k in keys)
    else:
        results = [one(k) for k in keys]
    cells = dict(results)
    base = baseline_no_adapt(pretrained, streams)
    return ReportTable(grid, cells, CellResult(base, len(streams)))
