import hashlib
import json

import pytest

from domgen.cli import main
from domgen.data import Split, filter_images, generate_synthetic_dataset, load_dataset, write_dataset
from domgen.model import DetectorModel, save_checkpoint

from conftest import tiny_model_config

TINY = {
    "data": {"image_size": 128, "objects_per_image_range": [2, 4]},
    "model": {
        "encoder_widths": [4, 8, 8, 8], "fpn_channels": 8, "head_depth": 1,
        "discriminator_channels": 8, "dropout_p": 0.0, "patch_size": 64,
    },
    "train": {"epochs": 2, "steps_per_epoch": 2, "batch_size": 3, "per_domain": 1, "patch_size": 64, "lr_cycle_epochs": 1},
    "eval": {"n_resamples": 20, "patches_per_image": 30},
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    data = root / "data"
    assert main(["generate", "--config", str(cfg), "--domains", "4", "--unlabeled", "2", "--images", "5",
                 "--seed", "7", "-o", str(data)]) == 0
    run = root / "run"
    assert main(["train", "--config", str(cfg), "--data", str(data), "--holdout", "3", "--mode", "reference",
                 "--seed", "1", "--quiet", "-o", str(run)]) == 0
    return root, cfg, data, run


def test_generate_counts_and_manifest(workspace):
    _, _, data, _ = workspace
    images = load_dataset(data)
    assert len(images) == 20
    assert {im.domain.id for im in images if not im.domain.labeled} == {2}
    assert (data / "config.resolved.json").is_file()


def test_generate_is_deterministic(workspace, tmp_path):
    root, cfg, data, _ = workspace
    out = tmp_path / "again"
    assert main(["generate", "--config", str(cfg), "--domains", "4", "--unlabeled", "2", "--images", "5",
                 "--seed", "7", "-o", str(out)]) == 0
    h = lambda p: hashlib.sha256((p / "dataset.json").read_bytes()).hexdigest()
    assert h(out) == h(data)


def test_generate_usage_errors(tmp_path, capsys):
    with pytest.raises(SystemExit) as e:
        main(["generate", "--images", "0", "-o", str(tmp_path / "x")])
    assert e.value.code == 2
    (tmp_path / "full").mkdir()
    (tmp_path / "full" / "keep.txt").write_text("x")
    assert main(["generate", "--images", "1", "-o", str(tmp_path / "full")]) == 2
    assert "--force" in capsys.readouterr().err


def test_missing_out_is_usage_error():
    with pytest.raises(SystemExit) as e:
        main(["generate", "--images", "1"])
    assert e.value.code == 2


def test_train_outputs(workspace):
    _, _, _, run = workspace
    assert (run / "best.ckpt").is_file()
    assert (run / "history.jsonl").is_file()
    resolved = json.loads((run / "config.resolved.json").read_text())
    assert resolved["holdout"] == [3]
    assert resolved["model"]["num_domains"] == 3
    assert resolved["train"]["seed"] == 1


def test_train_invalid_field_is_runtime_error(workspace, tmp_path, capsys):
    _, _, data, _ = workspace
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({**TINY, "train": {**TINY["train"], "object_fraction": 2.0}}))
    rc = main(["train", "--config", str(bad), "--data", str(data), "--holdout", "3", "-o", str(tmp_path / "r2")])
    assert rc == 1
    assert "object_fraction" in capsys.readouterr().err


def test_train_reproducible_from_resolved_config(workspace, tmp_path):
    _, _, _, run = workspace
    out = tmp_path / "replay"
    assert main(["train", "--config", str(run / "config.resolved.json"), "--quiet", "-o", str(out)]) == 0
    assert (out / "history.jsonl").read_bytes() == (run / "history.jsonl").read_bytes()


def test_evaluate_report(workspace, tmp_path, capsys):
    _, cfg, data, run = workspace
    out = tmp_path / "eval"
    assert main(["evaluate", "--config", str(cfg), "--checkpoint", str(run / "best.ckpt"), "--data", str(data),
                 "-o", str(out)]) == 0
    rep = json.loads((out / "report.json").read_text())
    seen = {k: v["seen"] for k, v in rep["per_domain"].items()}
    assert seen == {"scanner_a": True, "scanner_b": True, "scanner_c": True, "scanner_d": False}
    tp = sum(v["tp"] for v in rep["per_domain"].values())
    assert rep["aggregate"]["tp"] == tp
    for name in ("predictions.json", "pr_curves.png", "bootstrap_f1.png", "config.resolved.json"):
        assert (out / name).is_file()
    assert "unseen" in capsys.readouterr().out


def test_evaluate_without_operating_point_or_validation(tmp_path, capsys):
    test_only = filter_images(generate_synthetic_dataset(2, 3, 64, (1, 2), seed=0), split=Split.TEST)
    write_dataset(test_only, tmp_path / "d")
    ckpt = save_checkpoint(
        tmp_path / "m.ckpt", DetectorModel(tiny_model_config()),
        extra={"domains": [{"id": 0, "name": "scanner_a", "labeled": True}, {"id": 1, "name": "scanner_b", "labeled": True}]},
    )
    rc = main(["evaluate", "--checkpoint", str(ckpt), "--data", str(tmp_path / "d"), "-o", str(tmp_path / "e")])
    assert rc == 2
    assert "--operating-point" in capsys.readouterr().err
    rc = main(["evaluate", "--checkpoint", str(ckpt), "--data", str(tmp_path / "d"), "--operating-point", "0.5",
               "--resamples", "5", "-o", str(tmp_path / "e2")])
    assert rc == 0


def test_features_csv_and_probe(workspace, tmp_path, capsys):
    _, cfg, data, run = workspace
    outs = []
    for name in ("f1", "f2"):
        out = tmp_path / name
        assert main(["features", "--config", str(cfg), "--checkpoint", str(run / "best.ckpt"), "--data", str(data),
                     "--seed", "3", "-o", str(out)]) == 0
        outs.append(out)
    text = capsys.readouterr().out
    assert "chance=1/4" in text
    rows = (outs[0] / "features.csv").read_text().splitlines()
    assert len(rows) == 1 + 4 * 30  # one test image per domain, 30 patches each
    assert (outs[0] / "features.csv").read_bytes() == (outs[1] / "features.csv").read_bytes()
    assert (outs[0] / "features_2d.png").is_file()


def test_features_five_image_test_set(workspace, tmp_path):
    _, cfg, data, run = workspace
    images = load_dataset(data)
    five = [im for im in images if im.split is Split.TEST][:4] + [next(im for im in images if im.split is Split.VALIDATION)]
    five[-1].split = Split.TEST
    write_dataset(five, tmp_path / "five")
    assert main(["features", "--checkpoint", str(run / "best.ckpt"), "--data", str(tmp_path / "five"),
                 "--config", str(cfg), "-o", str(tmp_path / "f")]) == 0
    assert len((tmp_path / "f" / "features.csv").read_text().splitlines()) == 151
