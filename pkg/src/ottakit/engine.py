"""Online test-time adaptation loop.

A run owns its parameters, its dual-queue buffer and its RNG. Runs that share
a configuration and a label layout are advanced in lockstep: their parameters
are stacked along a leading axis so one set of array operations serves all of
them. Each run's random stream depends only on ``(cfg.seed, subject_id)``, so a
subject's log does not depend on which other subjects share its group.
"""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .buffer import BatchComposition, DualQueueBuffer, sample_batch
from .exceptions import AdaptationFailure, ConfigurationError, ContractViolation, NumericFailure
from .model import (
    LossWeights,
    ShrinkageParams,
    _sgd_inplace,
    copy_params,
    forward_predict,
    geometry,
    loss_and_grads,
    random_masks,
)
from .signals import NormStats, apply_norm, denormalize_labels, normalize_labels, tokenize, with_schedule


@dataclass(frozen=True)
class PretrainedModel:
    """Frozen source model: parameters plus the source normalization."""

    params: dict
    stats: NormStats

    @property
    def geometry(self) -> dict:
        return geometry(self.params)


@dataclass(frozen=True)
class AdaptConfig:
    injection_frequency: Optional[int] = None
    init_labels: int = 0
    reps_per_batch: int = 10
    lr_test: float = 1e-3
    comp: BatchComposition = BatchComposition()
    cap_unlabel: int = 64
    cap_label: int = 32
    mask_ratio: float = 0.5
    weights: LossWeights = LossWeights()
    shrinkage: ShrinkageParams = ShrinkageParams()
    init_finetune_epochs: int = 20
    resample_per_rep: bool = True
    seed: int = 0

    def __post_init__(self):
        F = self.injection_frequency
        if F is not None and F < 2:
            # F=1 labels every event and leaves the unlabeled queue empty
            raise ConfigurationError(f"injection frequency must be None or >= 2, got {F}")
        if self.init_labels < 0:
            raise ConfigurationError("init_labels must be >= 0")
        if self.reps_per_batch < 1:
            raise ConfigurationError("reps_per_batch must be >= 1")
        if not (self.lr_test >= 0 and math.isfinite(self.lr_test)):
            raise ConfigurationError("lr_test must be finite and >= 0")
        if not 0.0 < self.mask_ratio <= 1.0:
            raise ConfigurationError("mask_ratio must be in (0, 1]")
        if self.init_finetune_epochs < 0:
            raise ConfigurationError("init_finetune_epochs must be >= 0")
        DualQueueBuffer(self.cap_unlabel, self.cap_label)

    def replace(self, **changes) -> "AdaptConfig":
        from dataclasses import replace

        return replace(self, **changes)


@dataclass
class Prediction:
    index: int
    pred_sbp: float
    pred_dbp: float
    true_sbp: Optional[float]
    true_dbp: Optional[float]


@dataclass
class PredictionLog:
    subject_id: str
    predictions: list = field(default_factory=list)
    labeled_indices: set = field(default_factory=set)

    @property
    def T(self) -> int:
        return len(self.predictions) + len(self.labeled_indices)

    def to_records(self) -> list:
        return [
            {"subject_id": self.subject_id, "index": p.index, "pred_sbp": p.pred_sbp, "pred_dbp": p.pred_dbp,
             "true_sbp": p.true_sbp, "true_dbp": p.true_dbp}
            for p in self.predictions
        ]

    def write_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for rec in self.to_records():
                fh.write(json.dumps(rec) + "\n")


def label_schedule(T: int, F: Optional[int]) -> set:
    """0-based event indices that carry an injected label: every F-th event, 1-based."""
    if T < 1:
        raise ConfigurationError("T must be >= 1")
    if F is None:
        return set()
    if F <= 0:
        raise ConfigurationError(f"injection frequency must be positive, got {F}")
    return {pos - 1 for pos in range(F, T + 1, F)}


def run_rng(seed: int, subject_id: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(subject_id.encode("utf-8"))])


# ---------------------------------------------------------------------------
# per-run state
# ---------------------------------------------------------------------------

@dataclass
class AdaptState:
    params: dict
    buffer: DualQueueBuffer
    rng: np.random.Generator
    stats: NormStats
    subject_id: str = ""
    d: int = 0
    events_seen: int = 0
    _cache: dict = field(default_factory=dict, repr=False)

    @classmethod
    def fresh(cls, pretrained: PretrainedModel, cfg: AdaptConfig, subject_id: str = "") -> "AdaptState":
        return cls(
            params=copy_params(pretrained.params),
            buffer=DualQueueBuffer(cfg.cap_unlabel, cfg.cap_label),
            rng=run_rng(cfg.seed, subject_id),
            stats=pretrained.stats,
            subject_id=subject_id,
            d=pretrained.geometry["d"],
        )

    def _encode_event(self, event):
        tok = tokenize(apply_norm(event.segment, self.stats), self.d)
        lab = normalize_labels(event.label.as_array(), self.stats) if event.label is not None else np.zeros(2)
        return tok, lab

    def remember(self, event):
        self._cache[event.index] = self._encode_event(event)
        limit = self.buffer.cap_unlabel + self.buffer.cap_label
        if len(self._cache) > 2 * limit:
            live = {e.index for e in self.buffer.q_unlabel} | {e.index for e in self.buffer.q_label}
            self._cache = {i: v for i, v in self._cache.items() if i in live}

    def lookup(self, event):
        return self._cache[event.index]


def _lead_view(params):
    """Parameter views with a unit leading axis; in-place updates reach the originals."""
    return {k: v[None] for k, v in params.items()}


def _adapt_group(params, buffers, rngs, newest, newest_labeled, gather, cfg: AdaptConfig, where=("", None)):
    """K SGD updates on freshly sampled buffer batches, all runs at once.

    ``params`` carries a leading run axis; run r samples from ``buffers[r]``
    with ``rngs[r]``, its newest item ``newest[r]`` already pushed.
    ``gather(batches)`` turns the per-run ``(unlabeled, labeled)`` item lists
    into ``(tokens (R, B, S, d), labels (R, B, 2))``.
    """
    S = params["pos"].shape[-2]
    batches = None
    for rep in range(cfg.reps_per_batch):
        if batches is None or cfg.resample_per_rep:
            batches = [sample_batch(buf, cfg.comp, new, rng, newest_labeled)
                       for buf, rng, new in zip(buffers, rngs, newest)]
            n_l = len(batches[0][1])
            if any(len(lab) != n_l for _, lab in batches):
                raise ContractViolation("runs in one lockstep group drew different batch compositions")
            tokens, labels = gather(batches)
            B = tokens.shape[1]
            labeled = np.zeros(B, dtype=bool)
            labeled[B - n_l:] = True
        masks = np.stack([random_masks(rng, B, S, cfg.mask_ratio) for rng in rngs])
        try:
            _, grads = loss_and_grads(params, tokens, masks, labels, labeled, cfg.weights, cfg.shrinkage)
        except NumericFailure as exc:
            ids, index = where
            raise AdaptationFailure(f"non-finite adaptation loss at event {index}", index, ids) from exc
        if cfg.lr_test > 0:
            _sgd_inplace(params, grads, cfg.lr_test)


def otta_step(state: AdaptState, event, cfg: AdaptConfig):
    """Push one event, adapt, and predict it if it is unlabeled.

    Returns ``(prediction or None, state)``; the prediction is an ``(sbp, dbp)``
    array in mmHg from the post-update parameters. ``state`` is updated in place.
    """
    state.buffer.push(event)
    state.remember(event)
    state.events_seen += 1

    def gather(batches):
        (unl, lab), = batches
        enc = [state.lookup(e) for e in unl + lab]
        return np.stack([t for t, _ in enc])[None], np.stack([y for _, y in enc])[None]

    _adapt_group(_lead_view(state.params), [state.buffer], [state.rng], [event], None, gather, cfg,
                 (state.subject_id, event.index))
    if event.label is not None:
        return None, state
    tok = state.lookup(event)[0]
    z = forward_predict(state.params, tok)
    return denormalize_labels(z, state.stats), state


def _init_arrays(stream, stats, d, n):
    toks = np.stack([tokenize(apply_norm(seg, stats), d) for seg, _ in stream.init_labeled[:n]])
    labs = normalize_labels(np.array([[lab.sbp, lab.dbp] for _, lab in stream.init_labeled[:n]]), stats)
    return toks, labs


def _finetune_group(params, init_tokens, init_labels, rngs, cfg: AdaptConfig, subject_ids=None):
    R, n, S = init_tokens.shape[:3]
    bs = min(cfg.comp.size, n)
    for epoch in range(cfg.init_finetune_epochs):
        orders = [rng.permutation(n) for rng in rngs]
        for start in range(0, n, bs):
            idx = np.stack([o[start:start + bs] for o in orders])
            tok = np.take_along_axis(init_tokens, idx[:, :, None, None], axis=1)
            lab = np.take_along_axis(init_labels, idx[:, :, None], axis=1)
            masks = np.stack([random_masks(rng, idx.shape[1], S, cfg.mask_ratio) for rng in rngs])
            try:
                _, grads = loss_and_grads(params, tok, masks, lab, np.ones(idx.shape[1], dtype=bool),
                                          cfg.weights, cfg.shrinkage)
            except NumericFailure as exc:
                raise AdaptationFailure(f"initial fine-tuning diverged in epoch {epoch}",
                                        subject_id=subject_ids) from exc
            if cfg.lr_test > 0:
                _sgd_inplace(params, grads, cfg.lr_test)


def initial_finetune(params, init_labeled, cfg: AdaptConfig, stats: NormStats, rng=None):
    """Combined-loss SGD over the pre-stream labeled samples; returns new params."""
    from .signals import SubjectStream

    params = copy_params(params)
    n = len(init_labeled)
    if n != cfg.init_labels:
        raise ContractViolation(f"expected {cfg.init_labels} initial samples, got {n}")
    if n == 0:
        return params
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    d = geometry(params)["d"]
    toks, labs = _init_arrays(SubjectStream("", list(init_labeled), []), stats, d, n)
    _finetune_group(_lead_view(params), toks[None], labs[None], [rng], cfg)
    return params


# ---------------------------------------------------------------------------
# whole-subject runs
# ---------------------------------------------------------------------------

def _check_stream(stream, pretrained, cfg):
    if len(stream.init_labeled) < cfg.init_labels:
        raise ConfigurationError(
            f"subject {stream.subject_id}: {cfg.init_labels} initial labels requested, {len(stream.init_labeled)} available"
        )
    L = pretrained.geometry["S"] * pretrained.geometry["d"]
    for ev in stream.events[:1]:
        if len(ev.segment) != L:
            raise ConfigurationError(f"segment length {len(ev.segment)} does not match model geometry L={L}")


def run_group(pretrained: PretrainedModel, streams, cfg: AdaptConfig, seeds=None) -> list:
    """Adapt on each stream independently; the streams advance in lockstep.

    All streams must have the same length and the same labeled positions.
    ``seeds`` optionally gives one seed per stream (default: ``cfg.seed`` for
    all), so one group can hold several seeds of the same subject.
    Returns one PredictionLog per stream, in input order.
    """
    streams = list(streams)
    if not streams:
        return []
    seeds = [cfg.seed] * len(streams) if seeds is None else list(seeds)
    if len(seeds) != len(streams):
        raise ContractViolation(f"{len(seeds)} seeds for {len(streams)} streams")
    T = streams[0].T
    layout = [ev.label is not None for ev in streams[0].events]
    for s in streams:
        _check_stream(s, pretrained, cfg)
        if s.T != T or [ev.label is not None for ev in s.events] != layout:
            raise ContractViolation("lockstep group needs identical stream lengths and label layouts")
    R = len(streams)
    g = pretrained.geometry
    stats = pretrained.stats
    params = {k: np.repeat(v[None], R, axis=0) for k, v in pretrained.params.items()}
    buffers = [DualQueueBuffer(cfg.cap_unlabel, cfg.cap_label) for _ in streams]
    rngs = [run_rng(seed, s.subject_id) for seed, s in zip(seeds, streams)]
    ids = ",".join(s.subject_id for s in streams)

    if cfg.init_labels > 0:
        pairs = [_init_arrays(s, stats, g["d"], cfg.init_labels) for s in streams]
        _finetune_group(params, np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs]), rngs, cfg, ids)

    # encode every event once; the buffers hold stream positions
    tokens = np.stack([
        tokenize(apply_norm(np.stack([ev.segment.values for ev in s.events]), stats), g["d"]) for s in streams
    ])
    labels = np.zeros((R, T, 2))
    for r, s in enumerate(streams):
        for i, ev in enumerate(s.events):
            if ev.label is not None:
                labels[r, i] = normalize_labels(ev.label.as_array(), stats)
    runs = np.arange(R)[:, None]

    def gather(batches):
        idx = np.array([unl + lab for unl, lab in batches])
        return tokens[runs, idx], labels[runs, idx]

    logs = [PredictionLog(s.subject_id) for s in streams]
    for i in range(T):
        for buf in buffers:
            buf.push_item(i, layout[i])
        _adapt_group(params, buffers, rngs, [i] * R, layout[i], gather, cfg, (ids, i))
        if layout[i]:
            for log in logs:
                log.labeled_indices.add(i)
            continue
        z = forward_predict(params, tokens[:, i:i + 1])[:, 0]
        mmhg = denormalize_labels(z, stats)
        for log, s, y in zip(logs, streams, mmhg):
            truth = s.events[i].truth
            log.predictions.append(Prediction(
                i, float(y[0]), float(y[1]),
                None if truth is None else truth.sbp, None if truth is None else truth.dbp,
            ))
    return logs


def run_subject(pretrained: PretrainedModel, stream, cfg: AdaptConfig) -> PredictionLog:
    """Adapt a fresh copy of the pretrained model on one subject's stream."""
    return run_group(pretrained, [stream], cfg)[0]


def schedule_stream(stream, cfg: AdaptConfig):
    """Attach labels to the stream per ``cfg.injection_frequency``."""
    return with_schedule(stream, label_schedule(stream.T, cfg.injection_frequency))


def frozen_predictions(pretrained: PretrainedModel, streams) -> list:
    """Unadapted-model predictions for every event, one PredictionLog per stream.

    Uses the same per-event array layout as :func:`run_group`, so a zero
    learning-rate run reproduces these values exactly.
    """
    streams = list(streams)
    if not streams:
        return []
    g = pretrained.geometry
    R = len(streams)
    params = {k: np.repeat(v[None], R, axis=0) for k, v in pretrained.params.items()}
    logs = [PredictionLog(s.subject_id) for s in streams]
    T = max(s.T for s in streams)
    for i in range(T):
        live = [r for r, s in enumerate(streams) if i < s.T]
        sub = params if len(live) == R else {k: v[live] for k, v in params.items()}
        tok = np.stack([tokenize(apply_norm(streams[r].events[i].segment, pretrained.stats), g["d"]) for r in live])
        mmhg = denormalize_labels(forward_predict(sub, tok[:, None])[:, 0], pretrained.stats)
        for r, y in zip(live, mmhg):
            ev = streams[r].events[i]
            t = ev.truth
            logs[r].predictions.append(Prediction(ev.index, float(y[0]), float(y[1]),
                                                  None if t is None else t.sbp, None if t is None else t.dbp))
    return logs
