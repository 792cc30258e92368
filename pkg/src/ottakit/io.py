"""File formats: event-stream CSV and JSON model checkpoints.

Both writers are byte-deterministic: floats are written with ``repr`` (shortest
round-tripping form), keys and subjects in a fixed order, LF line endings.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
from collections import defaultdict

import numpy as np

from .engine import PretrainedModel
from .exceptions import CheckpointError, ParseError
from .model import geometry, init_params, validate_params
from .signals import BPLabel, NormStats, SignalSegment, StreamEvent, SubjectStream

CHECKPOINT_FORMAT = "ottakit-checkpoint"
CHECKPOINT_VERSION = 1
_FIXED_COLS = ["subject_id", "index", "has_label", "sbp", "dbp"]


# ---------------------------------------------------------------------------
# stream CSV
# ---------------------------------------------------------------------------

def _fmt(x) -> str:
    return repr(float(x))


def stream_rows(stream: SubjectStream):
    """CSV records for one stream: pre-stream labeled samples first, then events.

    Rows are numbered consecutively, so a stream with ``n`` initial samples is
    restored by ``take_initial(load(...), n)``.
    """
    k = 0
    for seg, lab in stream.init_labeled:
        yield [stream.subject_id, str(k), "1", _fmt(lab.sbp), _fmt(lab.dbp)] + [_fmt(v) for v in seg.values]
        k += 1
    for ev in stream.events:
        gt = ev.truth if ev.truth is not None else ev.label
        bp = ["", ""] if gt is None else [_fmt(gt.sbp), _fmt(gt.dbp)]
        yield [stream.subject_id, str(k), "1" if ev.label is not None else "0"] + bp + [_fmt(v) for v in ev.segment.values]
        k += 1


def write_stream_csv(streams, path) -> int:
    """Write streams in the ``subject_id,index,has_label,sbp,dbp,s0..`` schema; returns the row count."""
    streams = list(streams)
    lengths = {len(seg.values) for s in streams for seg, _ in s.init_labeled}
    lengths |= {len(ev.segment.values) for s in streams for ev in s.events}
    if len(lengths) > 1:
        raise ValueError(f"segments of different lengths {sorted(lengths)} cannot share one file")
    L = lengths.pop() if lengths else 0
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(_FIXED_COLS + [f"s{j}" for j in range(L)])
    n = 0
    for s in streams:
        for row in stream_rows(s):
            w.writerow(row)
            n += 1
    _write_text(path, buf.getvalue())
    return n


def _write_text(path, text: str):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def _real(cell, line, name, allow_empty=False):
    if cell == "" and allow_empty:
        return None
    try:
        x = float(cell)
    except ValueError:
        raise ParseError(f"column {name}: {cell!r} is not a number", line) from None
    if not math.isfinite(x):
        raise ParseError(f"column {name}: non-finite value {cell!r}", line)
    return x


def load_stream_csv(path) -> list:
    """Parse a stream CSV into SubjectStreams (sorted by subject id, rows by index).

    Labeled rows (``has_label=1``) become labeled events; ``sbp``/``dbp`` of
    unlabeled rows are kept as ground truth, or left out when both are empty.
    Indices are sorted and renumbered from 0 within each subject.
    """
    with open(path, encoding="utf-8", newline="") as fh:
        text = fh.read()
    if not text.strip():
        return []
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    if header[:5] != _FIXED_COLS:
        raise ParseError(f"header must start with {','.join(_FIXED_COLS)}", 1)
    sig_cols = header[5:]
    if not sig_cols or sig_cols != [f"s{j}" for j in range(len(sig_cols))]:
        raise ParseError("signal columns must be s0..s{L-1}", 1)
    L = len(sig_cols)
    by_subject = defaultdict(list)
    for line, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != 5 + L:
            raise ParseError(f"expected {5 + L} columns, got {len(row)}", line)
        sid, idx, has_label, sbp, dbp = row[:5]
        if not sid:
            raise ParseError("empty subject_id", line)
        try:
            index = int(idx)
        except ValueError:
            raise ParseError(f"index {idx!r} is not an integer", line) from None
        if index < 0:
            raise ParseError(f"negative index {index}", line)
        if has_label not in ("0", "1"):
            raise ParseError(f"has_label must be 0 or 1, got {has_label!r}", line)
        sbp_v = _real(sbp, line, "sbp", allow_empty=True)
        dbp_v = _real(dbp, line, "dbp", allow_empty=True)
        if (sbp_v is None) != (dbp_v is None):
            raise ParseError("sbp and dbp must both be present or both empty", line)
        if has_label == "1" and sbp_v is None:
            raise ParseError("labeled row without sbp/dbp", line)
        values = np.array([_real(c, line, f"s{j}") for j, c in enumerate(row[5:])])
        truth = None
        if sbp_v is not None:
            try:
                truth = BPLabel(sbp_v, dbp_v)
            except ValueError as exc:
                raise ParseError(str(exc), line) from None
        by_subject[sid].append((index, line, has_label == "1", truth, values))

    streams = []
    for sid in sorted(by_subject):
        rows = sorted(by_subject[sid], key=lambda r: r[0])
        for a, b in zip(rows, rows[1:]):
            if a[0] == b[0]:
                raise ParseError(f"subject {sid}: duplicate index {b[0]}", b[1])
        events = [
            StreamEvent(SignalSegment(values, sid, i), truth if labeled else None, truth)
            for i, (_, _, labeled, truth, values) in enumerate(rows)
        ]
        streams.append(SubjectStream(sid, [], events))
    return streams


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def checkpoint_document(pretrained: PretrainedModel, meta=None) -> dict:
    params = pretrained.params
    validate_params(params)
    tensors = {}
    for name in sorted(params):
        arr = np.asarray(params[name], dtype=np.float64)
        tensors[name] = {"shape": list(arr.shape), "data": [float(x) for x in arr.ravel()]}
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "geometry": geometry(params),
        "norm": {k: float(v) for k, v in pretrained.stats.to_dict().items()},
        "meta": dict(meta or {}),
        "tensors": tensors,
    }


def dumps_checkpoint(pretrained: PretrainedModel, meta=None) -> str:
    # json writes floats with repr, which round-trips float64 exactly
    return json.dumps(checkpoint_document(pretrained, meta), sort_keys=True, separators=(",", ":"),
                      allow_nan=False) + "\n"


def save_checkpoint(pretrained: PretrainedModel, path, meta=None) -> str:
    """Write a checkpoint; returns its sha256 hex digest."""
    text = dumps_checkpoint(pretrained, meta)
    _write_text(path, text)
    return hashlib.sha256(text.encode()).hexdigest()


def loads_checkpoint(text: str) -> PretrainedModel:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"checkpoint is not valid JSON: {exc}") from None
    if not isinstance(doc, dict) or doc.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError("not an ottakit checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {doc.get('version')!r}")
    try:
        g = doc["geometry"]
        ref = init_params(g["d"], g["h"], g["S"], g["E"], rng=0)
        params = {}
        for name, t in doc["tensors"].items():
            arr = np.array(t["data"], dtype=np.float64)
            if arr.size != math.prod(t["shape"]):
                raise CheckpointError(f"{name}: {arr.size} values for shape {t['shape']}")
            params[name] = arr.reshape(t["shape"])
        if set(params) != set(ref):
            raise CheckpointError("tensor names do not match the recorded geometry")
        validate_params(params)
        stats = NormStats(**doc["norm"])
    except CheckpointError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from None
    return PretrainedModel(params, stats)


def load_checkpoint(path) -> PretrainedModel:
    if not os.path.exists(path):
        raise CheckpointError(f"checkpoint {path} does not exist")
    with open(path, encoding="utf-8") as fh:
        return loads_checkpoint(fh.read())
