import json

import pytest

from ugd.cli import main

TINY = {"m": 4, "s": 16, "h": 8, "d": 8, "n_blocks": 1, "k_nn": 8, "radius": 0.3, "train_patches": 4}


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps(TINY))
    data, model = root / "data", root / "model.ugd"
    assert main(["generate", "--n-clouds", "5", "--n-points", "300", "--out", str(data), "--distorted"]) == 0
    assert main(["train", "--data", str(data), "--config", str(cfg), "--epochs", "1", "--lr", "1e-3",
                 "--out", str(model)]) == 0
    assert main(["fit-prior", "--checkpoint", str(model), "--data", str(data), "--K", "2"]) == 0
    return root, cfg, data, model


def _records(capsys):
    return [json.loads(line) for line in capsys.readouterr().out.splitlines() if line.startswith("{")]


def test_pipeline_outputs(pipeline):
    root, _, data, model = pipeline
    assert (data / "manifest.json").exists()
    assert len(list((data / "distorted").glob("*.xyz"))) == 25
    assert model.exists()
    assert model.with_suffix(".log.jsonl").exists() and model.with_suffix(".curves.svg").exists()


def test_score_deterministic(pipeline, capsys):
    root, _, data, model = pipeline
    cloud = sorted(data.glob("*.xyz"))[0]
    capsys.readouterr()
    assert main(["score", "--checkpoint", str(model), str(cloud), str(cloud), "--seed", "2"]) == 0
    a, b = _records(capsys)
    assert a["ugd"] == b["ugd"] and a["higher_is_better"] is True
    assert main(["score", "--checkpoint", str(model), str(cloud), "--seed", "2",
                 "--out", str(root / "s.jsonl")]) == 0
    assert _records(capsys)[0]["ugd"] == a["ugd"]
    assert json.loads((root / "s.jsonl").read_text())["ugd"] == a["ugd"]


def test_metrics_identity(pipeline, capsys):
    _, _, data, _ = pipeline
    cloud = sorted(data.glob("*.xyz"))[0]
    capsys.readouterr()
    assert main(["metrics", "--eval", str(cloud), "--ref", str(cloud)]) == 0
    rec = _records(capsys)[0]
    assert rec["po2po"]["mse"] == 0 and rec["chamfer"] == 0 and rec["po2po"]["psnr_db"] == "inf"
    assert rec["pl2pl"]["mean"] == pytest.approx(1.0, abs=1e-7)


def test_benchmark_outputs(pipeline, capsys):
    root, cfg, data, model = pipeline
    out = root / "bench"
    assert main(["benchmark", "--checkpoint", str(model), "--data", str(data), "--out", str(out),
                 "--metrics", "UGD,po2po_PSNR,CD", "--mix", "0.25,0.25,0.25,0.25"]) == 0
    text = capsys.readouterr().out
    assert "MEAN" in text and "UGD" in text
    assert (out / "table.txt").read_text().strip() == text.strip()
    assert len((out / "trials.jsonl").read_text().splitlines()) == 5 * 6
    assert (out / "accuracy.svg").exists()


def test_errors_are_one_line(pipeline, capsys, tmp_path):
    bad = tmp_path / "bad.ugd"
    bad.write_bytes(b"nope")
    assert main(["score", "--checkpoint", str(bad), "x.xyz"]) == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("error: CheckpointError:")
    with pytest.raises(SystemExit) as ex:
        main(["score", "--bogus"])
    assert ex.value.code == 2
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("error: UsageError")


def test_unknown_config_key(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text('{"nonsense": 1}')
    assert main(["generate", "--config", str(cfg), "--out", str(tmp_path / "d")]) == 1
    assert "unknown config keys" in capsys.readouterr().err
