import csv
import hashlib
import io
import json

import numpy as np
import pytest

from stvfm import autodiff as ad
from stvfm.cli import build_parser, main
from stvfm.config import load
from stvfm.gridio import load_grid
from stvfm.metrics import evaluate
from stvfm.runner import eval_baseline, run_training
from stvfm.train import load_checkpoint, predictor

TINY = {
    "data": {"synthetic": "advection", "synth_params": {"height": 6, "width": 8, "steps": 60, "sigma": 1.0}},
    "train": {"P": 3, "Q": 2, "batch_size": 8, "epochs": 1},
    "model": {"d_temporal": 8, "temporal_blocks": 1, "temporal_heads": 2, "coord_heads": 2, "prompt_len": 2,
              "decoder_blocks": 1, "decoder_heads": 2, "mlp_hidden": 16},
    "backbone": {"depth": 1, "dim": 8, "heads": 2},
    "seed": 3,
}


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture
def tiny_config(tmp_path, monkeypatch):
    monkeypatch.delenv("STVFM_SEED", raising=False)
    p = tmp_path / "tiny.json"
    p.write_text(json.dumps(TINY))
    return p


@pytest.fixture
def grid_file(tmp_path):
    out = tmp_path / "g.stg"
    assert main(["synth", "--height", "6", "--width", "8", "--steps", "60", "--param", "sigma=1.0",
                 "--out", str(out)]) == 0
    return out


def test_help_lists_every_subcommand():
    text = build_parser().format_help()
    for cmd in ("synth", "train", "eval", "forecast", "gradcheck", "sweep"):
        assert cmd in text


def test_synth_writes_grid_and_sidecar(tmp_path, capsys):
    out = tmp_path / "a.stg"
    assert main(["synth", "--kind", "advection", "--steps", "200", "--out", str(out)]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert (summary["C"], summary["H"], summary["W"], summary["T"]) == (1, 16, 20, 200)
    assert load_grid(out).meta.name == "synthetic-advection"
    assert (tmp_path / "a.stg.json").exists()


def test_synth_is_deterministic(tmp_path):
    a, b = tmp_path / "a.stg", tmp_path / "b.stg"
    for p in (a, b):
        main(["synth", "--kind", "diffusion", "--seed", "5", "--out", str(p)])
    assert digest(a) == digest(b)


def test_periodic_grid_keeps_its_period_after_reload(tmp_path):
    out = tmp_path / "p.stg"
    main(["synth", "--kind", "periodic", "--steps", "30", "--param", "period=5", "--out", str(out)])
    v = load_grid(out).values
    np.testing.assert_array_equal(v[5:], v[:-5])


def test_synth_rejects_bad_params(tmp_path, capsys):
    assert main(["synth", "--param", "nope=1", "--out", str(tmp_path / "x.stg")]) == 2
    assert "error" in capsys.readouterr().err


def test_train_echoes_resolved_config_and_writes_artifacts(tiny_config, tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["train", "--config", str(tiny_config), "--out-dir", str(out)]) == 0
    text = capsys.readouterr().out
    echoed = json.loads(text[:text.rindex("}\n{") + 1])
    assert echoed["train"]["lambda"] == 1.0 and echoed["split"]["train_frac"] == 0.7
    assert {p.name for p in out.iterdir()} == {"config.json", "train_log.jsonl", "model.ntc"}


def test_train_lists_all_config_errors(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps({"train": {"lr": -1, "bogus": 1}, "modle": {}}))
    assert main(["train", "--config", str(p)]) == 2
    err = capsys.readouterr().err
    assert all(s in err for s in ("modle", "train.bogus", "data:"))


def test_train_is_reproducible(tiny_config, tmp_path):
    for name in ("a", "b"):
        main(["train", "--config", str(tiny_config), "--out-dir", str(tmp_path / name)])
    assert digest(tmp_path / "a" / "model.ntc") == digest(tmp_path / "b" / "model.ntc")


def test_eval_matches_library_bit_exactly(tiny_config, grid_file, tmp_path, capsys):
    main(["train", "--config", str(tiny_config), "--out-dir", str(tmp_path / "run")])
    capsys.readouterr()
    out = tmp_path / "m.json"
    assert main(["eval", "--checkpoint", str(tmp_path / "run" / "model.ntc"), "--data", str(grid_file),
                 "--out", str(out)]) == 0
    cli = json.loads(out.read_text())
    lib = run_training(load(tiny_config))
    report = evaluate(predictor(lib.model), lib.data.test, lib.data.normalizer)
    assert cli == json.loads(json.dumps(report.to_dict()))
    assert cli["mae"] == report.mae and cli["rmse"] == report.rmse
    assert len(cli["per_step"]) == 2


def test_eval_baseline_needs_no_checkpoint(grid_file, capsys):
    assert main(["eval", "--model", "ha", "--P", "3", "--Q", "2", "--data", str(grid_file)]) == 0
    cli = json.loads(capsys.readouterr().out)
    lib = eval_baseline("ha", load_grid(grid_file), 3, 2)
    assert cli["rmse"] == lib.rmse and cli["mae"] == lib.mae


def test_eval_without_checkpoint_is_an_error(grid_file, capsys):
    assert main(["eval", "--data", str(grid_file)]) == 2
    assert "--checkpoint" in capsys.readouterr().err


def test_forecast_writes_q_frames(tiny_config, grid_file, tmp_path, capsys):
    main(["train", "--config", str(tiny_config), "--out-dir", str(tmp_path / "run")])
    out = tmp_path / "f.stg"
    assert main(["forecast", "--checkpoint", str(tmp_path / "run" / "model.ntc"), "--data", str(grid_file),
                 "--end", "30", "--out", str(out)]) == 0
    pred = load_grid(out)
    assert pred.shape == (1, 6, 8, 2)
    assert np.isfinite(pred.values).all()


def test_forecast_rejects_short_history(tiny_config, grid_file, tmp_path):
    main(["train", "--config", str(tiny_config), "--out-dir", str(tmp_path / "run")])
    ckpt = load_checkpoint(tmp_path / "run" / "model.ntc")
    from stvfm.runner import forecast
    with pytest.raises(ValueError, match="history"):
        forecast(ckpt, load_grid(grid_file), end=2)


def test_sweep_rows_echo_inputs_and_rerun_identically(tiny_config, tmp_path, capsys):
    outs = []
    for name in ("a.csv", "b.csv"):
        assert main(["sweep", "--config", str(tiny_config), "--param", "lambda", "--values", "0.1,0.5,1,2",
                     "--out", str(tmp_path / name)]) == 0
        outs.append(tmp_path / name)
    rows = list(csv.DictReader(io.StringIO(outs[0].read_text())))
    assert [r["lambda"] for r in rows] == ["0.1", "0.5", "1", "2"]
    assert all(float(r["rmse"]) > 0 for r in rows)
    assert digest(outs[0]) == digest(outs[1])


def test_sweep_rejects_other_params_and_negative_lambda(tiny_config):
    assert main(["sweep", "--config", str(tiny_config), "--param", "lr", "--values", "1"]) == 2
    assert main(["sweep", "--config", str(tiny_config), "--values", "1,-2"]) == 2


def test_seed_env_changes_the_checkpoint(tiny_config, tmp_path, monkeypatch):
    main(["train", "--config", str(tiny_config), "--out-dir", str(tmp_path / "a")])
    monkeypatch.setenv("STVFM_SEED", "99")
    main(["train", "--config", str(tiny_config), "--out-dir", str(tmp_path / "b")])
    assert digest(tmp_path / "a" / "model.ntc") != digest(tmp_path / "b" / "model.ntc")
    assert json.loads((tmp_path / "b" / "config.json").read_text())["seed"] == 99


def test_gradcheck_primitives_pass(capsys):
    assert main(["gradcheck", "--scope", "primitives"]) == 0
    assert "20/20 passed" in capsys.readouterr().out


def test_gradcheck_reports_the_broken_op(monkeypatch, capsys):
    monkeypatch.setattr(ad, "_gelu_grad", lambda x, t=None: np.ones_like(x))
    assert main(["gradcheck", "--scope", "primitives"]) == 1
    failed = [line for line in capsys.readouterr().out.splitlines() if line.startswith("FAIL")]
    assert failed and all("gelu" in line for line in failed)
