"""Online test-time adaptation for cuff-less blood pressure regression.

Modules: ``signals`` (data types, synthesis, normalization), ``model``
(dual-head network, losses, gradients), ``buffer`` (dual-queue memory and
sampler), ``engine`` (online adaptation loop), ``evaluation`` (metrics and
sweeps), ``io`` (CSV and checkpoints), ``config`` and ``pipeline`` (run
configuration), ``cli``.
"""

from .buffer import BatchComposition, DualQueueBuffer, sample_batch
from .engine import AdaptConfig, PredictionLog, PretrainedModel, label_schedule, otta_step, run_group, run_subject
from .estimator import DualHeadRegressor
from .evaluation import ReportTable, SweepGrid, baseline_no_adapt, evaluate, mae, pearson, sweep
from .exceptions import OttaError
from .io import load_checkpoint, load_stream_csv, save_checkpoint, write_stream_csv
from .model import LossWeights, MaskSpec, ShrinkageParams, init_params, pretrain
from .signals import BPLabel, SignalSegment, StreamEvent, SubjectStream, SynthConfig, synth_subject

__version__ = "0.1.0"

__all__ = [
    "AdaptConfig", "BPLabel", "BatchComposition", "DualHeadRegressor", "DualQueueBuffer", "LossWeights",
    "MaskSpec", "OttaError", "PredictionLog", "PretrainedModel", "ReportTable", "ShrinkageParams",
    "SignalSegment", "StreamEvent", "SubjectStream", "SweepGrid", "SynthConfig", "baseline_no_adapt",
    "evaluate", "init_params", "label_schedule", "load_checkpoint", "load_stream_csv", "mae", "otta_step",
    "pearson", "pretrain", "run_group", "run_subject", "sample_batch", "save_checkpoint", "sweep",
    "synth_subject", "write_stream_csv",
]
