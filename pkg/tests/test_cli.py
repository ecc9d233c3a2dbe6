import json
import subprocess
import sys

from atprobe.cli import main

SMALL = ["--n-train", "60", "--n-val", "40", "--frames", "8", "--dim", "16"]
TINY = ["--n-frames", "8", "--d-model", "16", "--n-heads", "1", "--ff-hidden", "16", "--mlp-hidden", "16",
        "--batch-size", "16"]


def _files(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file() and p.name != "run_config.json"}


def test_synth_gen_is_byte_identical(tmp_path):
    for d in ("a", "b"):
        assert main(["synth-gen", "--preset", "mixed", "--seed", "7", *SMALL, "--out", str(tmp_path / d)]) == 0
    a, b = _files(tmp_path / "a"), _files(tmp_path / "b")
    assert a and a == b
    cfg = json.loads((tmp_path / "a" / "run_config.json").read_text())
    assert cfg["settings"]["seed"] == 7 and cfg["dataset_format_version"] == 1


def test_missing_dataset_names_path(tmp_path, capsys):
    missing = tmp_path / "nope"
    code = main(["train", "--data", str(missing), "--out", str(tmp_path / "run")])
    assert code == 3
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert str(missing) in err["path"] and err["exit_code"] == 3
    assert (tmp_path / "run" / "run_config.json").exists()
    assert (tmp_path / "run" / "error.json").exists()


def test_config_errors(tmp_path, capsys):
    assert main(["synth-gen", "--preset", "nope", "--out", str(tmp_path / "x")]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"not_a_setting": 1}))
    assert main(["synth-gen", "--config", str(bad), "--out", str(tmp_path / "y")]) == 2
    assert main(["synth-gen"]) == 2  # no --out
    assert main(["train", "--n-layers", "7", "--data", str(tmp_path), "--out", str(tmp_path / "z")]) == 2
    assert main(["bogus-command"]) == 2


def test_config_file_with_flag_override(tmp_path):
    conf = tmp_path / "c.json"
    conf.write_text(json.dumps({"preset": "easy", "seed": 3, "n_train": 10, "n_val": 5, "dim": 16,
                                "frames": 4}))
    assert main(["synth-gen", "--config", str(conf), "--seed", "4", "--out", str(tmp_path / "d")]) == 0
    settings = json.loads((tmp_path / "d" / "run_config.json").read_text())["settings"]
    assert settings["seed"] == 4 and settings["preset"] == "easy" and settings["n_train"] == 10


def test_data_root_from_environment(tmp_path, monkeypatch):
    main(["synth-gen", "--preset", "easy", *SMALL, "--out", str(tmp_path / "ds")])
    monkeypatch.setenv("ATP_DATA_ROOT", str(tmp_path / "ds"))
    assert main(["oracle", "--ns", "1,8", "--num-samples", "2", "--out", str(tmp_path / "o")]) == 0
    lines = (tmp_path / "o" / "oracle_curve.csv").read_text().splitlines()
    assert lines[0] == "n,mean_accuracy,stderr" and len(lines) == 3


def test_gradcheck_command(tmp_path):
    assert main(["gradcheck", "--out", str(tmp_path)]) == 0
    res = json.loads((tmp_path / "gradcheck.json").read_text())
    assert res["checked"] == 200 and res["passed"]


def test_pipeline_end_to_end(tmp_path):
    ds = tmp_path / "ds"
    assert main(["synth-gen", "--preset", "mixed", *SMALL, "--out", str(ds)]) == 0
    d = ["--data", str(ds)]
    assert main(["train", *d, *TINY, "--steps", "20", "--lr", "1e-3", "--out", str(tmp_path / "tr")]) == 0
    ck = tmp_path / "tr" / "checkpoint.bin"
    assert (tmp_path / "tr" / "curve.csv").read_text().startswith("step,loss,tau,beta")
    assert main(["eval", *d, "--checkpoint", str(ck), "--out", str(tmp_path / "ev")]) == 0
    metrics = json.loads((tmp_path / "ev" / "metrics.json").read_text())
    assert 0 <= metrics["accuracy"] <= 1 and (tmp_path / "ev" / "accuracy_by_hardness.csv").exists()
    assert main(["ensemble", *d, *TINY, "--E", "2", "--steps", "5", "--out", str(tmp_path / "en")]) == 0
    assert (tmp_path / "en" / "report_val.jsonl").exists()
    assert main(["hard-subset", *d, "--report", str(tmp_path / "en" / "report_val.jsonl"), "--k-folds", "2",
                 "--out", str(tmp_path / "hs")]) == 0
    pr = json.loads((tmp_path / "hs" / "precision_recall.json").read_text())
    assert pr["whole_split"]["recall"] == 1.0
    assert main(["temporal", *d, "--atp", str(ck), "--temporal-d-model", "32", "--temporal-heads", "2",
                 "--ff-hidden", "32", "--steps", "5", "--batch-size", "16", "--out", str(tmp_path / "tm")]) == 0
    assert json.loads((tmp_path / "tm" / "metrics.json").read_text())["frozen_atp_unchanged"]
    assert main(["route", *d, "--ensemble-dir", str(tmp_path / "en"), "--temporal",
                 str(tmp_path / "tm" / "temporal.bin"), "--k-folds", "2", "--out", str(tmp_path / "rt")]) == 0
    assert "atp_skip_fraction" in json.loads((tmp_path / "rt" / "routing.json").read_text())


def test_console_script_runs(tmp_path):
    out = subprocess.run([sys.executable, "-m", "atprobe.cli", "synth-gen", "--preset", "retrieval", *SMALL,
                          "--out", str(tmp_path / "r")], capture_output=True, text=True)
    assert out.returncode == 0, out.stderr
    assert json.loads(out.stdout)["splits"] == {"train": 60, "val": 40}
