"""``ottakit`` command line: synth, pretrain, sweep, baseline.

Exit codes: 0 success, 2 configuration or input error, 3 training failure,
4 sweep finished with failed cells (the partial report is still written).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import logging
import os
import sys

from .config import RunConfig
from .evaluation import baseline_no_adapt, sweep
from .exceptions import (
    CheckpointError,
    ConfigurationError,
    ContractViolation,
    DegenerateDataError,
    ParseError,
    TrainingFailure,
)
from .io import load_checkpoint, load_stream_csv, save_checkpoint, write_stream_csv
from .pipeline import pretrain_model, synth_streams, with_initial_samples
from .signals import SOURCE, labeled_pairs

log = logging.getLogger("ottakit")

EXIT_OK, EXIT_INPUT, EXIT_TRAINING, EXIT_PARTIAL = 0, 2, 3, 4


class InputError(Exception):
    """Bad files or incompatible inputs (exit code 2)."""


def _file_sha(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()[:16]


def _load_streams(path, L_expected):
    if not os.path.exists(path):
        raise InputError(f"data file {path} does not exist")
    streams = load_stream_csv(path)
    if not streams:
        raise InputError(f"data file {path} has no rows")
    L = len(streams[0].events[0].segment)
    if L != L_expected:
        raise InputError(f"geometry mismatch: data has L={L}, expected L={L_expected}")
    return streams


def _provenance(cfg: RunConfig, **extra) -> dict:
    return {"config_hash": cfg.config_hash(), "seed": cfg.seed, **extra}


def _ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    return path


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(cfg: RunConfig, args) -> int:
    domain = cfg.raw["data"]["domain"]
    out = args.out or cfg.raw["paths"]["source_data" if domain == SOURCE else "target_data"]
    streams = synth_streams(cfg, domain, args.subjects)
    n_rows = write_stream_csv(streams, out)
    print(f"wrote {out}: {len(streams)} subjects, {n_rows} events ({domain}, config {cfg.config_hash()}, seed {cfg.seed})")
    return EXIT_OK


def cmd_pretrain(cfg: RunConfig, args) -> int:
    geo = cfg.geometry()
    data = args.data or cfg.raw["paths"]["source_data"]
    out = args.out or cfg.raw["paths"]["checkpoint"]
    streams = _load_streams(data, geo["S"] * geo["d"])
    if not labeled_pairs(streams):
        raise InputError(f"data file {data} has no labeled rows to pretrain on")
    losses = {}

    def track(epoch, ssl, sl, _params):
        losses.update(epoch=epoch, ssl=ssl, sl=sl)
        if epoch % 50 == 0:
            log.info("epoch %d: ssl %.5f sl %.5f", epoch, ssl, sl)

    model = pretrain_model(cfg, streams, callback=track)
    meta = _provenance(cfg, data_sha256=_file_sha(data))
    save_checkpoint(model, out, meta)
    if losses:
        print(f"final losses: ssl {losses['ssl']:.6f} sl {losses['sl']:.6f} (epoch {losses['epoch']})")
    print(f"wrote {out} (config {cfg.config_hash()}, seed {cfg.seed})")
    return EXIT_OK


def _target_inputs(cfg: RunConfig, args):
    ckpt_path = args.checkpoint or cfg.raw["paths"]["checkpoint"]
    try:
        pretrained = load_checkpoint(ckpt_path)
    except CheckpointError as exc:
        raise InputError(str(exc)) from None
    g = pretrained.geometry
    data = args.data or cfg.raw["paths"]["target_data"]
    streams = _load_streams(data, g["S"] * g["d"])
    streams = with_initial_samples(cfg, streams)
    return pretrained, streams, ckpt_path, data


def cmd_sweep(cfg: RunConfig, args) -> int:
    pretrained, streams, ckpt_path, data = _target_inputs(cfg, args)
    out_dir = _ensure_dir(args.out or cfg.raw["paths"]["report_dir"])
    grid = cfg.grid()
    report = sweep(grid, pretrained, streams, cfg.adapt_config(), group_size=cfg.raw["sweep"]["group_size"],
                   jobs=args.jobs)
    report.provenance = _provenance(cfg, checkpoint_sha256=_file_sha(ckpt_path), data_sha256=_file_sha(data))
    csv_path = os.path.join(out_dir, "report.csv")
    txt_path = os.path.join(out_dir, "report.txt")
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        fh.write(report.to_csv())
    with open(txt_path, "w", encoding="utf-8", newline="") as fh:
        fh.write(report.to_text())
    print(report.to_text(), end="")
    if report.failed:
        print(f"{len(report.failed)} cell(s) failed; partial report written to {out_dir}", file=sys.stderr)
        return EXIT_PARTIAL
    print(f"wrote {csv_path} and {txt_path}")
    return EXIT_OK


def cmd_baseline(cfg: RunConfig, args) -> int:
    pretrained, streams, ckpt_path, data = _target_inputs(cfg, args)
    out_dir = _ensure_dir(args.out or cfg.raw["paths"]["report_dir"])
    subjects = cfg.raw["sweep"]["subjects"]
    streams = sorted(streams, key=lambda s: s.subject_id)[:subjects]
    m = baseline_no_adapt(pretrained, streams)
    buf = io.StringIO()
    prov = _provenance(cfg, checkpoint_sha256=_file_sha(ckpt_path), data_sha256=_file_sha(data))
    for k, v in sorted(prov.items()):
        buf.write(f"# {k}={v}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", "target", "value", "n_eval", "n_runs"])
    for metric in ("mae", "corr"):
        for target in ("sbp", "dbp"):
            v = getattr(m, f"{metric}_{target}")
            w.writerow([metric, target, "NA" if v is None else repr(float(v)), m.n_eval, len(streams)])
    path = os.path.join(out_dir, "baseline.csv")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(buf.getvalue())
    fmt = lambda v: "NA" if v is None else f"{v:.2f}"  # noqa: E731
    print(f"no adaptation ({len(streams)} subjects): MAE {fmt(m.mae_sbp)}/{fmt(m.mae_dbp)}, "
          f"corr {fmt(m.corr_sbp)}/{fmt(m.corr_dbp)} (SBP/DBP)")
    print(f"wrote {path}")
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "pretrain": cmd_pretrain, "sweep": cmd_sweep, "baseline": cmd_baseline}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ottakit", description="Online test-time adaptation experiments.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "synth": "generate a synthetic stream CSV",
        "pretrain": "pretrain on a labeled source CSV and write a checkpoint",
        "sweep": "run the injection-frequency x initial-label sweep",
        "baseline": "score the frozen (non-adapted) model",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--out", help="output file (synth, pretrain) or directory (sweep, baseline)")
        p.add_argument("--seed", type=int, help="override the global seed")
        p.add_argument("--jobs", type=int, default=1, help="parallel sweep cells (-1: all cores)")
        p.add_argument("--subjects", type=int, help="override the subject count (synth: of the generated domain)")
        if name == "synth":
            p.add_argument("--domain", choices=["source", "target"], help="override data.domain")
        else:
            p.add_argument("--data", help="override the input stream CSV")
        if name in ("sweep", "baseline"):
            p.add_argument("--checkpoint", help="override the checkpoint path")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.jobs == 0 or args.jobs < -1:
            raise ConfigurationError("--jobs must be a positive integer or -1")
        cfg = RunConfig.load(args.config).with_overrides(args.seed, args.subjects, getattr(args, "domain", None))
        return COMMANDS[args.command](cfg, args)
    except TrainingFailure as exc:
        print(f"error: training failed: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except (ConfigurationError, ParseError, ContractViolation, DegenerateDataError, InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
