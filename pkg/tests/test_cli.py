import hashlib
import json

import numpy as np
import pytest

from ottakit import cli
from ottakit import model as M
from ottakit.io import load_checkpoint

BASE = {
    "seed": 1,
    "synth": {"L": 64, "d": 16, "T": 100, "n_init": 0, "drift_delta": 15.0},
    "data": {"subjects": 2, "source_subjects": 4, "source_T": 4},
    "model": {"h": 8, "E": 1},
    "pretrain": {"epochs": 2},
    "adapt": {"reps_per_batch": 1},
    "sweep": {"frequencies": [10], "init_label_counts": [0], "n_seeds": 1},
}


def _config(tmp_path, **sections):
    cfg = json.loads(json.dumps(BASE))
    for name, values in sections.items():
        if isinstance(values, dict):
            cfg[name].update(values)
        else:
            cfg[name] = values
    text = json.dumps(cfg)
    # distinct configs get distinct files, so a test can hold several at once
    path = tmp_path / f"cfg-{hashlib.sha256(text.encode()).hexdigest()[:8]}.json"
    path.write_text(text)
    return str(path)


@pytest.fixture
def pipeline(tmp_path):
    cfg = _config(tmp_path)
    src, tgt, ckpt = (str(tmp_path / n) for n in ("src.csv", "tgt.csv", "model.json"))
    assert cli.main(["synth", "--config", cfg, "--domain", "source", "--out", src]) == 0
    assert cli.main(["synth", "--config", cfg, "--out", tgt]) == 0
    assert cli.main(["pretrain", "--config", cfg, "--data", src, "--out", ckpt]) == 0
    return {"cfg": cfg, "src": src, "tgt": tgt, "ckpt": ckpt, "dir": tmp_path}


def test_synth_row_count(tmp_path, capsys):
    out = tmp_path / "s.csv"
    assert cli.main(["synth", "--config", _config(tmp_path), "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert len(lines) == 1 + 2 * 100
    assert lines[0].startswith("subject_id,index,has_label,sbp,dbp,s0,")
    assert "2 subjects, 200 events" in capsys.readouterr().out


def test_synth_overrides(tmp_path):
    cfg = _config(tmp_path)
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert cli.main(["synth", "--config", cfg, "--out", str(a), "--subjects", "3", "--seed", "9"]) == 0
    assert cli.main(["synth", "--config", cfg, "--out", str(b)]) == 0
    assert len(a.read_text().splitlines()) == 301
    assert a.read_bytes()[:2000] != b.read_bytes()[:2000]


def test_invalid_config_field_exits_2_naming_the_field(tmp_path, capsys):
    assert cli.main(["synth", "--config", _config(tmp_path, synth={"T": -5})]) == 2
    assert "synth.T" in capsys.readouterr().err
    assert cli.main(["synth", "--config", _config(tmp_path, bogus=1)]) == 2
    assert "bogus" in capsys.readouterr().err
    assert cli.main(["synth", "--config", str(tmp_path / "missing.json")]) == 2


def test_pretrain_prints_losses_and_zero_epochs_gives_init(pipeline, tmp_path, capsys):
    assert cli.main(["pretrain", "--config", pipeline["cfg"], "--data", pipeline["src"],
                     "--out", str(tmp_path / "again.json")]) == 0
    assert "final losses" in capsys.readouterr().out
    assert (tmp_path / "again.json").read_bytes() == (tmp_path / "model.json").read_bytes()
    ckpt = tmp_path / "zero.json"
    cfg = _config(tmp_path, pretrain={"epochs": 0})
    assert cli.main(["pretrain", "--config", cfg, "--data", pipeline["src"], "--out", str(ckpt)]) == 0
    params = load_checkpoint(ckpt).params
    # initialization draws from the [seed, 1] stream
    ref = M.init_params(16, 8, 4, 1, rng=np.random.default_rng([1, 1]))
    assert all(np.array_equal(params[k], ref[k]) for k in ref)


def test_pretrain_errors(pipeline, tmp_path):
    cfg = pipeline["cfg"]
    assert cli.main(["pretrain", "--config", cfg, "--data", str(tmp_path / "none.csv")]) == 2
    # the target file has no labels to pretrain on
    assert cli.main(["pretrain", "--config", cfg, "--data", pipeline["tgt"], "--out", str(tmp_path / "x.json")]) == 2
    huge = _config(tmp_path, pretrain={"epochs": 3, "lr_ssl": 1e12, "lr_sl": 1e12})
    with np.errstate(all="ignore"):
        assert cli.main(["pretrain", "--config", huge, "--data", pipeline["src"],
                         "--out", str(tmp_path / "y.json")]) == 3


def test_sweep_and_baseline_write_reports(pipeline, capsys):
    out = pipeline["dir"] / "report"
    common = ["--config", pipeline["cfg"], "--data", pipeline["tgt"], "--checkpoint", pipeline["ckpt"], "--out", str(out)]
    assert cli.main(["sweep", *common]) == 0
    assert cli.main(["baseline", *common]) == 0
    csv_text = (out / "report.csv").read_text()
    assert "# config_hash=" in csv_text and "# seed=1" in csv_text
    assert "# checkpoint_sha256=" in csv_text
    assert "No adaptation" in (out / "report.txt").read_text()
    base = (out / "baseline.csv").read_text().splitlines()
    assert "metric,target,value,n_eval,n_runs" in base
    assert len([l for l in base if l.startswith(("mae", "corr"))]) == 4
    first = (out / "report.csv").read_bytes()
    assert cli.main(["sweep", *common]) == 0
    assert (out / "report.csv").read_bytes() == first


def test_sweep_partial_failure_exits_4(pipeline, tmp_path):
    cfg = _config(tmp_path, adapt={"reps_per_batch": 1, "lr_test": 1e9})
    out = tmp_path / "rep"
    with np.errstate(all="ignore"):
        code = cli.main(["sweep", "--config", cfg, "--data", pipeline["tgt"], "--checkpoint", pipeline["ckpt"],
                         "--out", str(out)])
    assert code == 4
    assert "FAILED" in (out / "report.txt").read_text()


def test_sweep_input_errors_exit_2(pipeline, tmp_path, capsys):
    cfg = pipeline["cfg"]
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    args = ["sweep", "--config", cfg, "--data", pipeline["tgt"], "--out", str(tmp_path / "r")]
    assert cli.main([*args, "--checkpoint", str(bad)]) == 2
    other = _config(tmp_path, synth={"L": 32})
    wrong = tmp_path / "wrong.csv"
    assert cli.main(["synth", "--config", other, "--out", str(wrong)]) == 0
    capsys.readouterr()
    assert cli.main(["sweep", "--config", cfg, "--data", str(wrong), "--checkpoint", pipeline["ckpt"],
                     "--out", str(tmp_path / "r")]) == 2
    err = capsys.readouterr().err
    assert "L=32" in err and "L=64" in err
    assert cli.main([*args, "--checkpoint", pipeline["ckpt"], "--jobs", "0"]) == 2


def test_missing_subcommand_is_a_usage_error():
    with pytest.raises(SystemExit) as exc:
        cli.main([])
    assert exc.value.code == 2
