"""Config-driven building blocks shared by the CLI and the acceptance suite."""

from __future__ import annotations

from typing import Callable, Optional

from .config import RunConfig
from .engine import PretrainedModel
from .signals import SOURCE, fit_norm, labeled_pairs, synth_population, take_initial
from .exceptions import DegenerateDataError
from .model import init_params, pretrain


def synth_streams(cfg: RunConfig, domain: str, subjects: Optional[int] = None) -> list:
    """Synthetic population for ``domain``; source subjects are short, fully labeled streams."""
    if domain == SOURCE:
        n = cfg.raw["data"]["source_subjects"] if subjects is None else subjects
        return synth_population(cfg.source_synth_config(), SOURCE, n)
    n = cfg.raw["data"]["subjects"] if subjects is None else subjects
    return synth_population(cfg.synth_config(), domain, n)


def pretrain_model(cfg: RunConfig, source, callback: Optional[Callable] = None) -> PretrainedModel:
    """Fit source normalization, initialize with seed ``[seed, 1]`` and pretrain with ``[seed, 2]``."""
    pairs = labeled_pairs(source)
    if not pairs:
        raise DegenerateDataError("no labeled source events to pretrain on")
    stats = fit_norm(pairs)
    geo = cfg.geometry()
    p = cfg.raw["pretrain"]
    params = init_params(geo["d"], geo["h"], geo["S"], geo["E"], rng=[cfg.seed, 1])
    params = pretrain(params, source, stats, epochs=p["epochs"], batch_size=p["batch_size"], lr_ssl=p["lr_ssl"],
                      lr_sl=p["lr_sl"], mask_ratio=p["mask_ratio"], rng=[cfg.seed, 2], callback=callback)
    return PretrainedModel(params, stats)


def with_initial_samples(cfg: RunConfig, streams) -> list:
    """Give every target stream its ``synth.n_init`` pre-stream calibration samples."""
    n_init = cfg.raw["synth"]["n_init"]
    return [take_initial(s, n_init) for s in streams]
