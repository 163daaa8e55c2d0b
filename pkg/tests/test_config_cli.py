import json

import pytest

from lanequant.cli import EXIT_CONFIG, EXIT_MISSING, EXIT_OK, _config_keys, build_parser, run
from lanequant.config import ConfigError, ExperimentConfig, dump_toml, load_config, parse_override


def write(tmp_path, text, name="c.toml"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_defaults_and_hash_stability():
    a, b = load_config(), ExperimentConfig()
    assert a == b and a.hash() == b.hash() and len(a.hash()) == 16
    assert a.tune.iterations == 5000 and a.tune.lr == 2.5e-5 and a.quant.calib_size == 512
    assert load_config(overrides=["workdir=elsewhere"]).hash() == a.hash()
    assert load_config(overrides=["tune.lr=1e-4"]).hash() != a.hash()


def test_unknown_keys_rejected(tmp_path):
    with pytest.raises(ConfigError, match="itertions"):
        load_config(write(tmp_path, "[tune]\nitertions = 3\n"))
    with pytest.raises(ConfigError, match="nosection"):
        load_config(write(tmp_path, "[nosection]\nx = 1\n"))
    with pytest.raises(ConfigError):
        load_config(overrides=["tune.nope=1"])


@pytest.mark.parametrize("override", ["tune.iterations=1.5", "focus.lam=1.0", "quant.bits=W3A9",
                                      "selection.k=3", "focus.objective=bogus", "quant.calib_size=999999",
                                      "selection.noise_levels=[0.1, 0.2]", "data.train=0"])
def test_invalid_values_rejected(override):
    with pytest.raises(ConfigError):
        load_config(overrides=[override])


def test_override_parsing_and_precedence(tmp_path):
    assert parse_override("quant.bits=W8A8") == (["quant", "bits"], "W8A8")
    assert parse_override("--tune.lr=0.001") == (["tune", "lr"], 0.001)
    assert parse_override("ablate.seeds=[3, 4]") == (["ablate", "seeds"], [3, 4])
    path = write(tmp_path, "seed = 5\n[tune]\niterations = 10\n")
    cfg = load_config(path, ["tune.iterations=20"])
    assert cfg.seed == 5 and cfg.tune.iterations == 20 and cfg.ablate.seeds == (0, 1, 2)
    with pytest.raises(ConfigError):
        parse_override("tune.iterations")


def test_dump_round_trip(tmp_path):
    cfg = load_config(overrides=["tune.iterations=7", "ablate.bits=['W4A4']", "workdir=x y"])
    assert load_config(write(tmp_path, dump_toml(cfg))) == cfg


def test_help_lists_every_config_key(capsys):
    assert run(["--help"]) == EXIT_OK
    out = capsys.readouterr().out
    for key, _ in _config_keys():
        assert f"--{key}" in out
    for flag in ("--config", "--checkpoint", "--out", "--workers"):
        assert flag in out


def test_exit_codes(tmp_path, capsys):
    assert run(["nonsense"]) == EXIT_CONFIG
    assert run(["pretrain", f"--workdir={tmp_path}", "--tune.bogus=1"]) == EXIT_CONFIG
    assert run(["pretrain", "--config", str(tmp_path / "none.toml")]) == EXIT_CONFIG
    assert run(["pretrain", f"--workdir={tmp_path}"]) == EXIT_MISSING
    assert "gen-data" in capsys.readouterr().err
    assert run(["tune", f"--workdir={tmp_path}"]) == EXIT_MISSING
    assert run(["score", str(tmp_path / "a.json")]) == EXIT_CONFIG


def test_score_identity_and_formats(tmp_path, capsys):
    lanes = [[[10, 60], [11, 50], [12, 40]], [[40, 60], [40, 40]]]
    a = write(tmp_path, json.dumps(lanes), "a.json")
    b = write(tmp_path, json.dumps({"lanes": lanes}), "b.json")
    assert run(["score", str(a), str(b), "--out", str(tmp_path / "r.json")]) == EXIT_OK
    report = json.loads((tmp_path / "r.json").read_text())
    assert report["score"] == 0.0 and report["mismatched"] == 0 and report["matched"] == 5
    assert "config_hash" in report and "seed" in report
    assert json.loads(capsys.readouterr().out)["score"] == 0.0


SMALL = ["--data.train=48", "--data.val=12", "--model.epochs=1", "--model.batch_size=16",
         "--quant.calib_size=16", "--quant.bits=W8A8", "--tune.iterations=2", "--tune.batch_size=8",
         "--tune.log_every=1", "--selection.reruns=1", "--selection.curve_images=4",
         "--selection.refresh_interval=1"]


def test_command_chain_writes_stamped_artifacts(tmp_path, capsys):
    base = [f"--workdir={tmp_path}", *SMALL]
    for cmd in ("gen-data", "pretrain", "sensitivity", "calibrate", "tune", "eval"):
        assert run([cmd, *base]) == EXIT_OK, cmd
    cfg = load_config(overrides=[a.lstrip("-") for a in base])
    tuned = tmp_path / "tune" / "W8A8_focus_select_s0"
    metrics = json.loads((tuned / "metrics.json").read_text())
    assert metrics["config_hash"] == cfg.hash() and metrics["seed"] == 0
    assert set(metrics) >= {"fp_f1", "calib_f1", "tuned_f1", "objective", "bits"}
    log = (tuned / "log.csv").read_text().splitlines()
    assert log[0].startswith("iteration,loss") and len(log) == 3
    assert run(["eval", *base, "--checkpoint", str(tuned / "tuned.ckpt")]) == EXIT_OK
    ev = json.loads((tuned / "tuned.eval.json").read_text())
    assert ev["config_hash"] == cfg.hash() and 0.0 <= ev["f1"] <= 1.0
    lanes = tuned / "tuned.eval.lanes.json"
    first = json.loads(lanes.read_text())["images"][0]
    one = write(tmp_path, json.dumps(first), "one.json")
    capsys.readouterr()
    assert run(["score", str(one), str(one)]) == EXIT_OK
    assert json.loads(capsys.readouterr().out)["score"] == 0.0


def test_parser_has_all_commands():
    p = build_parser()
    for cmd in ("gen-data", "pretrain", "calibrate", "tune", "eval", "sensitivity", "score", "ablate"):
        assert p.parse_args([cmd]).command == cmd
