"""Dual-queue FIFO memory and the fixed-composition batch sampler."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .exceptions import ConfigurationError, ContractViolation


@dataclass(frozen=True)
class BatchComposition:
    n_unlabel: int = 24
    n_label: int = 8

    def __post_init__(self):
        if self.n_unlabel < 1 or self.n_label < 0:
            raise ConfigurationError("batch composition needs n_unlabel >= 1 and n_label >= 0")

    @property
    def size(self) -> int:
        return self.n_unlabel + self.n_label

    @classmethod
    def from_ratio(cls, batch_size: int = 32, unlabel: int = 3, label: int = 1) -> "BatchComposition":
        if batch_size % (unlabel + label):
            raise ConfigurationError(f"batch size {batch_size} does not split {unlabel}:{label}")
        unit = batch_size // (unlabel + label)
        return cls(unit * unlabel, unit * label)


class DualQueueBuffer:
    """Two bounded FIFO queues: unlabeled events and labeled events.

    ``push`` routes each event to exactly one queue; a full queue drops its
    oldest entry.
    """

    def __init__(self, cap_unlabel: int = 64, cap_label: int = 32, enforce_ratio: bool = True):
        if cap_unlabel < 1 or cap_label < 1:
            raise ConfigurationError("queue capacities must be >= 1")
        if enforce_ratio and cap_unlabel != 2 * cap_label:
            raise ConfigurationError(f"capacities must be 2:1, got {cap_unlabel}:{cap_label}")
        self.q_unlabel = deque(maxlen=cap_unlabel)
        self.q_label = deque(maxlen=cap_label)

    @property
    def cap_unlabel(self) -> int:
        return self.q_unlabel.maxlen

    @property
    def cap_label(self) -> int:
        return self.q_label.maxlen

    def push(self, event) -> "DualQueueBuffer":
        return self.push_item(event, event.label is not None)

    def push_item(self, item, labeled: bool) -> "DualQueueBuffer":
        """Store any handle (e.g. a stream position) in the chosen queue."""
        (self.q_label if labeled else self.q_unlabel).append(item)
        return self

    def sizes(self) -> tuple:
        return len(self.q_unlabel), len(self.q_label)

    def __repr__(self):
        return f"DualQueueBuffer(unlabel={len(self.q_unlabel)}/{self.cap_unlabel}, label={len(self.q_label)}/{self.cap_label})"


def push(buffer: DualQueueBuffer, event) -> DualQueueBuffer:
    return buffer.push(event)


def _draw(queue, quota, newest, rng):
    if quota <= 0:
        return []
    items = list(queue)
    picked = []
    if newest is not None:
        picked.append(newest)
        if items and items[-1] is newest:  # the usual case: it was just pushed
            items.pop()
        else:
            items = [e for e in items if e is not newest]
        quota -= 1
        if quota == 0:
            return picked
        if not items:
            # the newest event is the queue's only member
            return picked + [newest] * quota
    if len(items) >= quota:
        idx = rng.permutation(len(items))[:quota]
    else:
        idx = rng.integers(0, len(items), size=quota)
    return picked + [items[i] for i in idx]


def sample_batch(buffer: DualQueueBuffer, comp: BatchComposition, newest, rng: np.random.Generator,
                 newest_labeled: Optional[bool] = None):
    """Draw ``comp.size`` events: ``(unlabeled_events, labeled_events)``.

    The newest event always takes one slot of its own queue's quota. Quotas are
    filled without replacement when the queue (minus the newest event) is large
    enough, with replacement otherwise. An empty labeled queue hands its quota
    to the unlabeled queue. Queues filled through ``push_item`` hold plain
    handles; pass ``newest_labeled`` to say which queue the newest one is in
    (for events it is read from ``newest.label``).
    """
    if not buffer.q_unlabel:
        raise ContractViolation("cannot sample with an empty unlabeled queue")
    n_u, n_l = comp.n_unlabel, comp.n_label
    if not buffer.q_label:
        n_u, n_l = n_u + n_l, 0
    if newest is None:
        new_is_label = False
    else:
        new_is_label = newest.label is not None if newest_labeled is None else newest_labeled
    unl = _draw(buffer.q_unlabel, n_u, None if new_is_label else newest, rng)
    lab = _draw(buffer.q_label, n_l, newest if new_is_label else None, rng)
    return unl, lab
