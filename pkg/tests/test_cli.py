import json
import shutil

import pytest

from herdsynth.cli import main
from herdsynth.dataset_io import read_image
from herdsynth.pipeline import validate_synthetic


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_missing_config_file_exit_2(capsys, tmp_path):
    code, _, err = run(capsys, "extract", "--config", tmp_path / "absent.yaml", "--out", tmp_path)
    assert code == 2
    assert str(tmp_path / "absent.yaml") in err


def test_invalid_config_exit_2(capsys, tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("compose:\n  cout: 3\n")
    code, _, err = run(capsys, "show-config", "--config", cfg)
    assert code == 2 and "cout" in err


def test_missing_output_root_exit_2(capsys, monkeypatch):
    monkeypatch.delenv("HERDSYNTH__OUTPUT_ROOT", raising=False)
    code, _, err = run(capsys, "recreate")
    assert code == 2 and "output_root" in err


def test_compose_before_recreate_exit_3(capsys, tmp_path):
    code, _, err = run(capsys, "compose", "--out", tmp_path / "out", "--skip-diffusion")
    assert code == 3
    assert "backgrounds/" in err


def test_sample_without_checkpoint_exit_3(capsys, tmp_path):
    code, _, err = run(capsys, "sample", "--out", tmp_path, "--preset", "desk")
    assert code == 3 and "checkpoint.zip" in err


def test_runtime_failure_exit_1(capsys, tmp_path, pasture_root):
    data = tmp_path / "data"
    shutil.copytree(pasture_root, data)
    (data / "labels" / "pasture_02.txt").write_text("0 0.5 0.5 0.1\n")
    code, _, err = run(capsys, "extract", "--data", data, "--out", tmp_path / "out", "--seed", 1)
    assert code == 1
    assert err.startswith("error: ") and "pasture_02.txt" in err


def test_show_config_applies_flags(capsys, tmp_path, monkeypatch):
    monkeypatch.setenv("HERDSYNTH__COMPOSE__JITTER", "0.02")
    code, out, _ = run(capsys, "show-config", "--preset", "desk", "--seed", 9, "--workers", 3)
    assert code == 0
    assert "master_seed: 9" in out and "workers: 3" in out and "jitter: 0.02" in out


def test_make_fixture(capsys, tmp_path):
    code, out, _ = run(capsys, "make-fixture", tmp_path / "fx", "--count", 2)
    assert code == 0
    assert sorted(p.name for p in (tmp_path / "fx" / "images").iterdir()) == ["pasture_00.png", "pasture_01.png"]
    assert read_image(tmp_path / "fx" / "images" / "pasture_00.png").shape == (960, 1280, 3)
    assert any((tmp_path / "fx" / "masks").iterdir())


def test_skip_diffusion_pipeline_on_fixture(capsys, tmp_path, pasture_root):
    out = tmp_path / "out"
    # stale artifacts from an earlier full run must not survive
    (out / "diffusion").mkdir(parents=True)
    (out / "diffusion" / "checkpoint.zip").write_bytes(b"old")
    code, _, err = run(capsys, "pipeline", "--preset", "desk", "--data", pasture_root, "--out", out,
                       "--count", 20, "--skip-diffusion", "--seed", 4)
    assert code == 0, err
    for stage in ("extract", "recreate", "augment", "compose"):
        assert f"{stage}: " in err
    assert "total: " in err and "train-diffusion" not in err
    assert not (out / "diffusion").exists() and not (out / "generated").exists()
    assert sorted(p.stem for p in (out / "stages").glob("*.json")) == ["augment", "compose", "extract", "recreate"]

    record = json.loads((out / "stages" / "compose.json").read_text())
    assert record["notes"]["attempted"] == 20
    assert not any("generated" in k for k in record["inputs"])
    synth = out / "synthetic"
    assert len(list((synth / "images").glob("*.png"))) == record["notes"]["written"]
    assert record["notes"]["written"] + len(record["notes"]["rejected"]) == 20
    assert validate_synthetic(synth) == []
    timing = (out / "logs" / "timing.log").read_text().split()
    assert timing[0::2] == ["extract", "recreate", "augment", "compose"]

    # every stage record names its seed and config hash
    for rec in (out / "stages").glob("*.json"):
        d = json.loads(rec.read_text())
        assert d["master_seed"] == 4 and len(d["config_sha256"]) == 64

    # score the held-out split against itself through the CLI
    test_labels = out / "extract" / "test_labels"
    code, text, _ = run(capsys, "evaluate", "--out", out, "--pred", test_labels)
    assert code == 0 and "f1                1.000" in text
    kv = dict(line.split("=", 1) for line in (out / "eval" / "metrics.kv").read_text().splitlines())
    assert float(kv["f1"]) == 1.0 and int(kv["false_positives"]) == 0


def test_evaluate_without_ground_truth_exit_3(capsys, tmp_path):
    (tmp_path / "pred").mkdir()
    code, _, err = run(capsys, "evaluate", "--out", tmp_path, "--pred", tmp_path / "pred")
    assert code == 3 and "test_labels" in err


@pytest.mark.slow
def test_full_pipeline_on_fixture(capsys, tmp_path, pasture_root):
    out = tmp_path / "out"
    code, _, err = run(capsys, "pipeline", "--preset", "desk", "--data", pasture_root, "--out", out,
                       "--count", 20, "--seed", 4)
    assert code == 0, err
    record = json.loads((out / "stages" / "compose.json").read_text())
    assert record["notes"]["attempted"] == 20
    assert any("generated" in k for k in record["inputs"])
    assert validate_synthetic(out / "synthetic") == []
    assert (out / "diffusion" / "checkpoint.zip").is_file()
    assert "train-diffusion: " in err and "sample: " in err
