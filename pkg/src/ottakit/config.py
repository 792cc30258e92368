"""Run configuration: one JSON document drives every CLI command.

Unknown keys and out-of-range values raise ConfigurationError naming the
dotted field (``synth.L``), which the CLI turns into exit code 2.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
import re
from dataclasses import dataclass, field
from typing import Optional

from .buffer import BatchComposition
from .engine import AdaptConfig
from .evaluation import SweepGrid
from .exceptions import ConfigurationError, ContractViolation
from .model import LossWeights, ShrinkageParams
from .signals import SynthConfig

DEFAULTS = {
    "seed": 0,
    "synth": {
        "L": 256, "d": 16, "T": 500, "n_harmonics": 3, "noise_sigma": 0.05, "drift_delta": 15.0,
        "heart_cycles": 4.0, "n_init": 50,
        "source_ranges": [[0.5, 1.0], [0.2, 0.5], [0.1, 0.3]],
        "target_ranges": [[0.7, 1.2], [0.3, 0.6], [0.15, 0.35]],
    },
    "data": {"domain": "target", "subjects": 20, "source_subjects": 256, "source_T": 4},
    "model": {"h": 32, "E": 2},
    "pretrain": {"epochs": 100, "batch_size": 32, "lr_ssl": 1e-2, "lr_sl": 1e-2, "mask_ratio": 0.5},
    "adapt": {
        "reps_per_batch": 10, "lr_test": 1e-3, "n_unlabel": 24, "n_label": 8, "cap_unlabel": 64,
        "cap_label": 32, "mask_ratio": 0.5, "lambda_pred": 1.0, "shrink_a": 10.0, "shrink_c": 0.2,
        "init_finetune_epochs": 20, "resample_per_rep": True,
    },
    "sweep": {"frequencies": [None, 100, 50, 20, 10], "init_label_counts": [0, 10, 20, 50], "n_seeds": 1,
              "subjects": None, "group_size": 128},
    "paths": {"source_data": "source.csv", "target_data": "target.csv", "checkpoint": "model.json",
              "report_dir": "report"},
}

_INT = (int,)
_NUM = (int, float)


def _field_of(section: str, values: dict, message: str) -> str:
    """Name the offending field when the message mentions one of the section's keys."""
    for key in sorted(values, key=len, reverse=True):
        if re.search(rf"(?<![\w.]){re.escape(key)}(?![\w])", message):
            return f"field '{section}.{key}'"
    return f"section '{section}'"


def _merge(base: dict, over: dict, prefix: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        name = f"{prefix}{k}"
        if k not in base:
            raise ConfigurationError(f"unknown config field {name!r}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigurationError(f"config field {name!r} must be an object")
            out[k] = _merge(base[k], v, name + ".")
        else:
            out[k] = copy.deepcopy(v)
    return out


def _check_type(doc, path, kinds, optional=False):
    node = doc
    for part in path.split("."):
        node = node[part]
    if node is None and optional:
        return
    if isinstance(node, bool) or not isinstance(node, kinds):
        raise ConfigurationError(f"config field {path!r} has invalid value {node!r}")
    if isinstance(node, float) and not math.isfinite(node):
        raise ConfigurationError(f"config field {path!r} must be finite")


@dataclass
class RunConfig:
    raw: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))

    # ------------------------------------------------------------------ build
    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigurationError("config must be a JSON object")
        cfg = cls(_merge(DEFAULTS, doc))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config {path} is not valid JSON: {exc}") from None
        return cls.from_dict(doc)

    def with_overrides(self, seed: Optional[int] = None, subjects: Optional[int] = None,
                       domain: Optional[str] = None) -> "RunConfig":
        raw = copy.deepcopy(self.raw)
        if seed is not None:
            raw["seed"] = seed
        if subjects is not None:
            raw["data"]["subjects"] = subjects
            raw["sweep"]["subjects"] = subjects
        if domain is not None:
            raw["data"]["domain"] = domain
        out = RunConfig(raw)
        out.validate()
        return out

    # --------------------------------------------------------------- validate
    def validate(self) -> None:
        r = self.raw
        _check_type(r, "seed", _INT)
        if r["seed"] < 0:
            raise ConfigurationError("config field 'seed' must be >= 0")
        for k in ("L", "d", "T", "n_harmonics", "n_init"):
            _check_type(r, f"synth.{k}", _INT)
        for k in ("noise_sigma", "drift_delta", "heart_cycles"):
            _check_type(r, f"synth.{k}", _NUM)
        for k in ("h", "E"):
            _check_type(r, f"model.{k}", _INT)
            if r["model"][k] < 1:
                raise ConfigurationError(f"config field 'model.{k}' must be >= 1")
        for k in ("epochs", "batch_size"):
            _check_type(r, f"pretrain.{k}", _INT)
        for k in ("lr_ssl", "lr_sl", "mask_ratio"):
            _check_type(r, f"pretrain.{k}", _NUM)
        if r["pretrain"]["epochs"] < 0 or r["pretrain"]["batch_size"] < 1:
            raise ConfigurationError("config fields 'pretrain.epochs' >= 0 and 'pretrain.batch_size' >= 1 required")
        if not (r["pretrain"]["lr_ssl"] > 0 and r["pretrain"]["lr_sl"] > 0):
            raise ConfigurationError("config fields 'pretrain.lr_ssl' and 'pretrain.lr_sl' must be > 0")
        if not 0 < r["pretrain"]["mask_ratio"] <= 1:
            raise ConfigurationError("config field 'pretrain.mask_ratio' must be in (0, 1]")
        for k in ("reps_per_batch", "n_unlabel", "n_label", "cap_unlabel", "cap_label", "init_finetune_epochs"):
            _check_type(r, f"adapt.{k}", _INT)
        for k in ("lr_test", "mask_ratio", "lambda_pred", "shrink_a", "shrink_c"):
            _check_type(r, f"adapt.{k}", _NUM)
        if not isinstance(r["adapt"]["resample_per_rep"], bool):
            raise ConfigurationError("config field 'adapt.resample_per_rep' must be true or false")
        if r["data"]["domain"] not in ("source", "target"):
            raise ConfigurationError(f"config field 'data.domain' must be 'source' or 'target', got {r['data']['domain']!r}")
        for k in ("subjects", "source_subjects", "source_T"):
            _check_type(r, f"data.{k}", _INT)
            if r["data"][k] < 1:
                raise ConfigurationError(f"config field 'data.{k}' must be >= 1")
        sw = r["sweep"]
        for name in ("frequencies", "init_label_counts"):
            if not isinstance(sw[name], list) or not sw[name]:
                raise ConfigurationError(f"config field 'sweep.{name}' must be a nonempty list")
        for F in sw["frequencies"]:
            if F is not None and (isinstance(F, bool) or not isinstance(F, int) or F < 2):
                raise ConfigurationError(f"config field 'sweep.frequencies' has invalid entry {F!r} (null or integer >= 2)")
        for n0 in sw["init_label_counts"]:
            if isinstance(n0, bool) or not isinstance(n0, int) or n0 < 0:
                raise ConfigurationError(f"config field 'sweep.init_label_counts' has invalid entry {n0!r}")
        if max(sw["init_label_counts"]) > r["synth"]["n_init"]:
            raise ConfigurationError("config field 'sweep.init_label_counts' exceeds 'synth.n_init'")
        _check_type(r, "sweep.n_seeds", _INT)
        _check_type(r, "sweep.subjects", _INT, optional=True)
        _check_type(r, "sweep.group_size", _INT)
        if sw["n_seeds"] < 1 or sw["group_size"] < 1:
            raise ConfigurationError("config fields 'sweep.n_seeds' and 'sweep.group_size' must be >= 1")
        for k, v in r["paths"].items():
            if not isinstance(v, str) or not v:
                raise ConfigurationError(f"config field 'paths.{k}' must be a nonempty string")
        # delegate the remaining invariants to the typed objects, tagging the section
        for section, build in (("synth", self.synth_config), ("adapt", self.adapt_config), ("sweep", self.grid)):
            try:
                build()
            except (ConfigurationError, ContractViolation) as exc:
                raise ConfigurationError(f"config {_field_of(section, r[section], str(exc))}: {exc}") from None
        if r["synth"]["L"] % r["synth"]["d"]:
            raise ConfigurationError("config field 'synth.L' must be a multiple of 'synth.d'")

    # ------------------------------------------------------------ typed views
    @property
    def seed(self) -> int:
        return self.raw["seed"]

    def synth_config(self) -> SynthConfig:
        s = dict(self.raw["synth"])
        s["source_ranges"] = tuple(tuple(float(x) for x in pair) for pair in s["source_ranges"])
        s["target_ranges"] = tuple(tuple(float(x) for x in pair) for pair in s["target_ranges"])
        cfg = SynthConfig(seed=self.seed, **s)
        cfg.validate()
        return cfg

    def source_synth_config(self) -> SynthConfig:
        """Source population: ``data.source_T`` labeled events per subject, no pre-stream samples."""
        return self.synth_config().replace(T=self.raw["data"]["source_T"], n_init=0)

    def geometry(self) -> dict:
        s = self.raw["synth"]
        return {"d": s["d"], "h": self.raw["model"]["h"], "S": s["L"] // s["d"], "E": self.raw["model"]["E"]}

    def adapt_config(self, injection_frequency=None, init_labels=0, seed=None) -> AdaptConfig:
        a = self.raw["adapt"]
        return AdaptConfig(
            injection_frequency=injection_frequency,
            init_labels=init_labels,
            reps_per_batch=a["reps_per_batch"],
            lr_test=float(a["lr_test"]),
            comp=BatchComposition(a["n_unlabel"], a["n_label"]),
            cap_unlabel=a["cap_unlabel"],
            cap_label=a["cap_label"],
            mask_ratio=float(a["mask_ratio"]),
            weights=LossWeights(float(a["lambda_pred"])),
            shrinkage=ShrinkageParams(float(a["shrink_a"]), float(a["shrink_c"])),
            init_finetune_epochs=a["init_finetune_epochs"],
            resample_per_rep=a["resample_per_rep"],
            seed=self.seed if seed is None else seed,
        )

    def grid(self) -> SweepGrid:
        sw = self.raw["sweep"]
        return SweepGrid(
            frequencies=list(sw["frequencies"]),
            init_label_counts=list(sw["init_label_counts"]),
            subjects=sw["subjects"],
            seeds=[self.seed + k for k in range(sw["n_seeds"])],
        )

    def canonical_json(self) -> str:
        return json.dumps(self.raw, sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:16]
