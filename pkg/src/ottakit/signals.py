"""Signal segments, BP labels, normalization and the synthetic stream generator."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .exceptions import ConfigurationError, DegenerateDataError


@dataclass(frozen=True)
class BPLabel:
    sbp: float
    dbp: float

    def __post_init__(self):
        if not (math.isfinite(self.sbp) and math.isfinite(self.dbp)):
            raise ValueError("BP label values must be finite")
        if self.dbp <= 0 or self.sbp <= self.dbp:
            raise ValueError(f"invalid BP label sbp={self.sbp} dbp={self.dbp}: need sbp > dbp > 0")

    def as_array(self) -> np.ndarray:
        return np.array([self.sbp, self.dbp], dtype=np.float64)


@dataclass(frozen=True, eq=False)
class SignalSegment:
    """One fixed-length window of a single-channel signal."""

    values: np.ndarray
    subject_id: str
    index: int

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1:
            raise ValueError("segment values must be a 1-d array")
        if not np.all(np.isfinite(values)):
            raise ValueError(f"segment {self.subject_id}/{self.index} has non-finite values")
        if self.index < 0:
            raise ValueError("segment index must be nonnegative")
        object.__setattr__(self, "values", values)

    def __len__(self):
        return self.values.shape[0]

    def __eq__(self, other):
        if not isinstance(other, SignalSegment):
            return NotImplemented
        return (
            self.subject_id == other.subject_id
            and self.index == other.index
            and np.array_equal(self.values, other.values)
        )


@dataclass(frozen=True, eq=False)
class StreamEvent:
    """A segment arriving on the target stream.

    ``label`` is set only for calibration (label-injection) events; ``truth``
    always carries the ground truth used for scoring, when known.
    """

    segment: SignalSegment
    label: Optional[BPLabel] = None
    truth: Optional[BPLabel] = None

    @property
    def index(self) -> int:
        return self.segment.index

    @property
    def is_labeled(self) -> bool:
        return self.label is not None

    def __eq__(self, other):
        if not isinstance(other, StreamEvent):
            return NotImplemented
        return self.segment == other.segment and self.label == other.label and self.truth == other.truth


@dataclass
class SubjectStream:
    subject_id: str
    init_labeled: list = field(default_factory=list)  # list[(SignalSegment, BPLabel)]
    events: list = field(default_factory=list)  # list[StreamEvent]

    def __post_init__(self):
        for i, ev in enumerate(self.events):
            if ev.index != i:
                raise ValueError(f"subject {self.subject_id}: event {i} carries index {ev.index}")

    @property
    def T(self) -> int:
        return len(self.events)


@dataclass(frozen=True)
class NormStats:
    signal_mean: float
    signal_std: float
    sbp_mean: float
    sbp_std: float
    dbp_mean: float
    dbp_std: float

    def __post_init__(self):
        for name in ("signal_std", "sbp_std", "dbp_std"):
            if not getattr(self, name) > 0:
                raise DegenerateDataError(f"{name} must be > 0")

    @property
    def label_mean(self) -> np.ndarray:
        return np.array([self.sbp_mean, self.dbp_mean])

    @property
    def label_std(self) -> np.ndarray:
        return np.array([self.sbp_std, self.dbp_std])

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def tokenize(segment, d: int) -> np.ndarray:
    """Split a segment (or raw vector) into an ``(L // d, d)`` token matrix."""
    values = segment.values if isinstance(segment, SignalSegment) else np.asarray(segment, dtype=np.float64)
    if d <= 0 or values.shape[-1] % d != 0:
        raise ConfigurationError(f"segment length {values.shape[-1]} is not divisible by token length {d}")
    return values.reshape(values.shape[:-1] + (values.shape[-1] // d, d))


def flatten_tokens(tokens: np.ndarray) -> np.ndarray:
    return tokens.reshape(tokens.shape[:-2] + (-1,))


def fit_norm(source) -> NormStats:
    """Population mean/std of pooled signal values and of the labels.

    ``source`` is an iterable of ``(SignalSegment, BPLabel)`` pairs.
    """
    pairs = list(source)
    if not pairs:
        raise DegenerateDataError("cannot fit normalization on empty data")
    signal = np.concatenate([seg.values for seg, _ in pairs])
    labels = np.array([[lab.sbp, lab.dbp] for _, lab in pairs])
    sig_std = float(signal.std())
    if sig_std == 0.0:
        raise DegenerateDataError("pooled signal variance is zero")
    lab_std = labels.std(axis=0)
    # a single subject with constant labels is legal for the signal; keep labels usable
    lab_std = np.where(lab_std > 0, lab_std, 1.0)
    return NormStats(
        signal_mean=float(signal.mean()),
        signal_std=sig_std,
        sbp_mean=float(labels[:, 0].mean()),
        sbp_std=float(lab_std[0]),
        dbp_mean=float(labels[:, 1].mean()),
        dbp_std=float(lab_std[1]),
    )


def apply_norm(x, stats: NormStats):
    """z-score a segment, a BPLabel, or a raw signal array."""
    if isinstance(x, SignalSegment):
        return (x.values - stats.signal_mean) / stats.signal_std
    if isinstance(x, BPLabel):
        return (x.as_array() - stats.label_mean) / stats.label_std
    return (np.asarray(x, dtype=np.float64) - stats.signal_mean) / stats.signal_std


def invert_norm(z, stats: NormStats):
    return np.asarray(z, dtype=np.float64) * stats.signal_std + stats.signal_mean


def normalize_labels(y, stats: NormStats) -> np.ndarray:
    """z-score an ``(..., 2)`` array of (sbp, dbp) in mmHg."""
    return (np.asarray(y, dtype=np.float64) - stats.label_mean) / stats.label_std


def denormalize_labels(z, stats: NormStats) -> np.ndarray:
    return np.asarray(z, dtype=np.float64) * stats.label_std + stats.label_mean


# ---------------------------------------------------------------------------
# synthetic streams
# ---------------------------------------------------------------------------

SOURCE = "source"
TARGET = "target"


@dataclass(frozen=True)
class SynthConfig:
    L: int = 256
    d: int = 16
    T: int = 500
    n_harmonics: int = 3
    source_ranges: tuple = ((0.5, 1.0), (0.2, 0.5), (0.1, 0.3))
    target_ranges: tuple = ((0.7, 1.2), (0.3, 0.6), (0.15, 0.35))
    noise_sigma: float = 0.05
    drift_delta: float = 15.0
    heart_cycles: float = 4.0
    n_init: int = 50
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "source_ranges", tuple(tuple(map(float, r)) for r in self.source_ranges))
        object.__setattr__(self, "target_ranges", tuple(tuple(map(float, r)) for r in self.target_ranges))
        self.validate()

    def validate(self):
        if self.L <= 0 or self.d <= 0 or self.L % self.d != 0:
            raise ConfigurationError(f"L={self.L} must be a positive multiple of d={self.d}")
        if self.T < 1:
            raise ConfigurationError("T must be >= 1")
        if self.n_harmonics < 3:
            # the label formulas read A1..A3
            raise ConfigurationError("n_harmonics must be >= 3")
        if self.noise_sigma < 0 or not math.isfinite(self.noise_sigma):
            raise ConfigurationError("noise_sigma must be finite and >= 0")
        if self.n_init < 0:
            raise ConfigurationError("n_init must be >= 0")
        for name in ("source_ranges", "target_ranges"):
            ranges = getattr(self, name)
            if len(ranges) != self.n_harmonics:
                raise ConfigurationError(f"{name} needs one range per harmonic ({self.n_harmonics})")
            for lo, hi in ranges:
                if not (math.isfinite(lo) and math.isfinite(hi)) or lo > hi:
                    raise ConfigurationError(f"{name} contains an empty range ({lo}, {hi})")

    def replace(self, **changes) -> "SynthConfig":
        return replace(self, **changes)


def bp_from_amplitudes(amps: Sequence[float], drift: float = 0.0) -> tuple:
    sbp = 100.0 + 40.0 * amps[0] + 15.0 * amps[1] + drift
    dbp = 65.0 + 20.0 * amps[0] + 8.0 * amps[2] + 0.5 * drift
    return sbp, dbp


def _domain_key(domain: str) -> int:
    if domain == SOURCE:
        return 0
    if domain == TARGET:
        return 1
    raise ConfigurationError(f"unknown domain {domain!r}")


def synth_subject(cfg: SynthConfig, domain: str, subject_seed: int) -> SubjectStream:
    """Generate one subject's stream: fixed morphology, per-segment noise, linear drift.

    Source subjects get every event labeled; target events carry only ``truth``
    (labels get attached by a schedule). ``init_labeled`` holds ``cfg.n_init``
    extra pre-stream samples with zero drift.
    """
    cfg.validate()
    rng = np.random.default_rng([cfg.seed, _domain_key(domain), subject_seed])
    ranges = cfg.source_ranges if domain == SOURCE else cfg.target_ranges
    amps = np.array([rng.uniform(lo, hi) for lo, hi in ranges])
    phases = rng.uniform(0.0, 2.0 * np.pi, size=cfg.n_harmonics)
    t = np.arange(cfg.L)
    k = np.arange(1, cfg.n_harmonics + 1)[:, None]
    clean = (amps[:, None] * np.sin(2.0 * np.pi * k * cfg.heart_cycles * t / cfg.L + phases[:, None])).sum(axis=0)
    subject_id = f"{domain}-{subject_seed:04d}"

    n_total = cfg.n_init + cfg.T
    noise = rng.normal(0.0, 1.0, size=(n_total, cfg.L)) * cfg.noise_sigma
    signals = clean[None, :] + noise

    init = []
    for j in range(cfg.n_init):
        sbp, dbp = bp_from_amplitudes(amps)
        init.append((SignalSegment(signals[j], subject_id, j), BPLabel(sbp, dbp)))

    events = []
    for i in range(cfg.T):
        drift = cfg.drift_delta * i / cfg.T if domain == TARGET else 0.0
        truth = BPLabel(*bp_from_amplitudes(amps, drift))
        seg = SignalSegment(signals[cfg.n_init + i], subject_id, i)
        events.append(StreamEvent(seg, label=truth if domain == SOURCE else None, truth=truth))
    return SubjectStream(subject_id, init, events)


def synth_population(cfg: SynthConfig, domain: str, n_subjects: int, offset: int = 0) -> list:
    return [synth_subject(cfg, domain, offset + s) for s in range(n_subjects)]


def take_initial(stream: SubjectStream, n: int) -> SubjectStream:
    """Move the first ``n`` events (which need ground truth) into ``init_labeled``.

    Used for ingested streams, where the pre-stream calibration samples are the
    leading rows of the recording. Remaining events are re-indexed from 0.
    """
    if n <= len(stream.init_labeled):
        return stream
    need = n - len(stream.init_labeled)
    if need > len(stream.events):
        raise ConfigurationError(f"subject {stream.subject_id}: cannot take {need} initial samples from {stream.T} events")
    head, tail = stream.events[:need], stream.events[need:]
    init = list(stream.init_labeled)
    for ev in head:
        if ev.truth is None:
            raise ConfigurationError(f"subject {stream.subject_id}: initial sample {ev.index} has no ground truth")
        init.append((ev.segment, ev.truth))
    events = [
        StreamEvent(SignalSegment(ev.segment.values, ev.segment.subject_id, i), ev.label, ev.truth)
        for i, ev in enumerate(tail)
    ]
    return SubjectStream(stream.subject_id, init, events)


def with_schedule(stream: SubjectStream, labeled: set) -> SubjectStream:
    """Return a copy whose events carry labels exactly at ``labeled`` positions."""
    events = []
    for ev in stream.events:
        if ev.index in labeled:
            if ev.truth is None:
                raise ConfigurationError(f"subject {stream.subject_id}: event {ev.index} scheduled for a label but has no truth")
            events.append(StreamEvent(ev.segment, ev.truth, ev.truth))
        else:
            events.append(StreamEvent(ev.segment, None, ev.truth))
    return SubjectStream(stream.subject_id, list(stream.init_labeled), events)


def labeled_pairs(streams) -> list:
    """All (segment, label) pairs of labeled events, e.g. a source population."""
    return [(ev.segment, ev.label) for s in streams for ev in s.events if ev.label is not None]
