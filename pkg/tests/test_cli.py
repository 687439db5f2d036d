import json

import numpy as np
import pytest

from gradshield import cli, pipeline

SMALL = ["--samples-per-class", "150"]


def run(capsys, *args):
    code = cli.main([str(a) for a in args])
    out, err = capsys.readouterr()
    return code, out, err


def test_poison_writes_dataset(tmp_path, capsys):
    code, out, _ = run(capsys, "poison", "--out", tmp_path, "--seed", 1, *SMALL)
    assert code == 0
    for name in ("dataset.pgds", "dataset.pgds.json", "testset.pgds", "report.json"):
        assert (tmp_path / name).exists()
    assert json.loads(out)["poisoned"] == 15


def test_poison_rerun_is_byte_identical(tmp_path, capsys):
    run(capsys, "poison", "--out", tmp_path / "a", "--seed", 2, *SMALL)
    run(capsys, "poison", "--out", tmp_path / "b", "--seed", 2, *SMALL)
    assert (tmp_path / "a/dataset.pgds").read_bytes() == (tmp_path / "b/dataset.pgds").read_bytes()


def test_poison_target_equals_base(tmp_path, capsys):
    code, _, err = run(capsys, "poison", "--out", tmp_path, "--target", 2, "--base", 2)
    assert code != 0
    assert "differ" in err


def test_missing_artifact_names_stage(tmp_path, capsys):
    code, _, err = run(capsys, "train", "--out", tmp_path)
    assert code == cli.EXIT_IO
    assert "'poison' stage" in err
    run(capsys, "poison", "--out", tmp_path, *SMALL)
    code, _, err = run(capsys, "detect", "--out", tmp_path)
    assert code == cli.EXIT_IO and "'train' stage" in err


def test_corrupt_checkpoint(tmp_path, capsys):
    run(capsys, "poison", "--out", tmp_path, *SMALL)
    (tmp_path / "model.pgnn").write_bytes(b"PGNN\x01\x00garbage")
    code, _, err = run(capsys, "detect", "--out", tmp_path)
    assert code == cli.EXIT_IO
    assert "truncated" in err or "unsupported" in err


def test_stagewise_run(tmp_path, capsys):
    assert run(capsys, "poison", "--out", tmp_path, "--seed", 0)[0] == 0
    assert run(capsys, "train", "--out", tmp_path, "--seed", 0)[0] == 0
    code, out, _ = run(capsys, "detect", "--out", tmp_path, "--seed", 0)
    det = json.loads(out)
    assert code == 0 and det["flagged"] and det["correct"]
    assert (tmp_path / f"signal_{det['target_class']}.ppm").exists()
    code, out, _ = run(capsys, "filter", "--out", tmp_path)
    assert code == 0 and json.loads(out)["sensitivity"] >= 0.85
    code, out, _ = run(capsys, "extract", "--out", tmp_path)
    assert code == 0 and json.loads(out)["class"] == det["target_class"]
    code, out, _ = run(capsys, "neutralize", "--out", tmp_path, "--seed", 0)
    acc = json.loads(out)["accuracy_table"]
    assert code == 0 and acc["after"]["poisoned_accuracy"] >= 0.70
    rep = json.loads((tmp_path / "report.json").read_text())
    assert set(rep) >= {"config", "poison", "train", "detect", "filter", "neutralize", "extract"}
    assert rep["config"]["train"]["epochs"] == 10  # resolved defaults written out


def test_run_all(tmp_path, capsys):
    code, out, _ = run(capsys, "run_all", "--out", tmp_path, "--seed", 3)
    assert code == 0
    rep = json.loads((tmp_path / "report.json").read_text())
    assert rep["detect"]["flagged"] and rep["detect"]["correct"]
    assert (tmp_path / "model_neutralized.pgnn").exists()


def test_detect_on_clean_data(tmp_path, capsys):
    run(capsys, "poison", "--out", tmp_path, "--no-poison", "--seed", 0)
    run(capsys, "train", "--out", tmp_path, "--seed", 0)
    code, out, _ = run(capsys, "detect", "--out", tmp_path, "--seed", 0)
    assert code == 0
    assert json.loads(out)["flagged"] is False


def test_output_root_from_environment(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv(pipeline.OUT_ENV, str(tmp_path))
    assert run(capsys, "poison", "--seed", 5, *SMALL)[0] == 0
    assert (tmp_path / "seed5" / "dataset.pgds").exists()


def test_config_file_and_flag_override(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"seed": 1, "data": {"samples_per_class": 100},
                               "poison": {"ratio": 0.2}}))
    code, out, _ = run(capsys, "poison", "--config", cfg, "--out", tmp_path / "r", "--ratio", 0.1)
    assert code == 0 and json.loads(out)["poisoned"] == 10
    rep = json.loads((tmp_path / "r/report.json").read_text())
    assert rep["config"]["seed"] == 1 and rep["config"]["poison"]["ratio"] == 0.1


def test_bad_config_key(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"train": {"epoch": 3}}))
    code, _, err = run(capsys, "poison", "--config", cfg, "--out", tmp_path)
    assert code == cli.EXIT_USAGE and "epoch" in err


def test_overlay_poison(tmp_path, capsys):
    code, out, _ = run(capsys, "poison", "--out", tmp_path, "--poison-kind", "overlay", *SMALL)
    assert code == 0 and json.loads(out)["spec"]["opacity"] == 0.2


def test_verify_prop1(capsys, tmp_path):
    code, out, _ = run(capsys, "verify", "prop1", "--csv", tmp_path / "p.csv")
    assert code == 0
    assert "max_fd_rel_error" in out and out.strip().endswith("PASS")
    assert len((tmp_path / "p.csv").read_text().splitlines()) == 121


def test_verify_thm2(capsys):
    code, out, _ = run(capsys, "verify", "thm2")
    assert code == 0 and "PASS" in out


def test_verify_failure_exit_code(capsys):
    # at N=5000 the second eigenvalue carries ~20% finite-sample bias
    code, out, _ = run(capsys, "verify", "thm2", "--N", 5000, "--seeds", 3)
    assert code == cli.EXIT_VERIFY and "FAIL" in out


def test_verify_unknown_suite(capsys):
    with pytest.raises(SystemExit) as e:
        cli.main(["verify", "thm9"])
    assert e.value.code == cli.EXIT_USAGE


def test_no_command(capsys):
    with pytest.raises(SystemExit) as e:
        cli.main([])
    assert e.value.code == cli.EXIT_USAGE
