import hashlib
import json
import os
from pathlib import Path

import numpy as np
import pytest

from segshield.cli import build_config, main
from segshield.errors import ConfigurationError

TINY_SYNTH = [
    "--data.n_samples", "12",
    "--data.size", "32",
]
TINY_PROTECT = [
    "--protect.epochs", "2",
    "--protect.batch_size", "4",
    "--protect.net_depth", "2",
    "--protect.net_base", "4",
    "--protect.em_rounds", "1",
    "--protect.em_steps", "2",
]
TINY_TRAIN = [
    "--train.epochs", "2",
    "--train.batch_size", "4",
    "--train.net_depth", "2",
    "--train.net_base", "4",
    "--train.lr", "1e-3",
]


def tree_hash(root):
    digest = hashlib.sha256()
    for path in sorted(Path(root).rglob("*")):
        if path.is_file():
            digest.update(str(path.relative_to(root)).encode())
            digest.update(path.read_bytes())
    return digest.hexdigest()


@pytest.fixture(scope="module")
def clean_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data") / "clean"
    assert main(["synth", "--out", str(out)] + TINY_SYNTH) == 0
    return out


def test_build_config_precedence(tmp_path, monkeypatch):
    cfg_file = tmp_path / "cfg.yaml"
    cfg_file.write_text("train:\n  epochs: 7\n  lr: 0.01\n")
    monkeypatch.setenv("SEGSHIELD_TRAIN__EPOCHS", "9")
    config = build_config(cfg_file, [("train.lr", 0.5)])
    assert config["train"]["epochs"] == 9  # env beats file
    assert config["train"]["lr"] == 0.5  # cli beats both
    assert config["train"]["batch_size"] == 32  # defaults fill the rest


def test_unknown_config_key_rejected(tmp_path):
    cfg_file = tmp_path / "cfg.yaml"
    cfg_file.write_text("train:\n  bogus: 1\n")
    with pytest.raises(ConfigurationError):
        build_config(cfg_file)
    with pytest.raises(ConfigurationError):
        build_config(None, [("no.such.key", 1)])


def test_synth_writes_dataset_and_echo(clean_dir):
    manifest = json.loads((clean_dir / "manifest.json").read_text())
    assert len(manifest["splits"]["train"]) == 10
    assert len(manifest["splits"]["test"]) == 2
    echo = json.loads((clean_dir / "effective_config.json").read_text())
    assert echo["config"]["data"]["n_samples"] == 12


def test_synth_idempotent(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["synth", "--out", str(a)] + TINY_SYNTH) == 0
    assert main(["synth", "--out", str(b)] + TINY_SYNTH) == 0
    assert tree_hash(a) == tree_hash(b)


def test_synth_rejects_zero_samples(tmp_path):
    code = main(["synth", "--out", str(tmp_path / "x"), "--data.n_samples", "0"])
    assert code == 2


def test_protect_none_is_byte_identical_copy(clean_dir, tmp_path):
    out = tmp_path / "none"
    code = main(
        ["protect", "--data", str(clean_dir), "--out", str(out), "--protect.kind", "none"]
        + TINY_PROTECT
    )
    assert code == 0
    for name in sorted(os.listdir(clean_dir / "train" / "images")):
        clean_bytes = (clean_dir / "train" / "images" / name).read_bytes()
        prot_bytes = (out / "train" / "images" / name).read_bytes()
        assert clean_bytes == prot_bytes


def test_protect_umed_writes_artifacts(clean_dir, tmp_path):
    out = tmp_path / "umed"
    code = main(
        ["protect", "--data", str(clean_dir), "--out", str(out), "--protect.kind", "umed"]
        + TINY_PROTECT
    )
    assert code == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["protector"]["kind"] == "umed"
    assert manifest["protector"]["epsilon"] == "4/255"
    assert (out / "gen_contour.npz").exists()
    assert (out / "gen_texture.npz").exists()
    assert (out / "train_log.jsonl").exists()
    # per-pixel change stays within the stacked budget before quantization
    from segshield.dataio import load_split

    clean = {s.sample_id: s for s in load_split(clean_dir, "train")}
    for s in load_split(out, "train"):
        diff = np.abs(s.image - clean[s.sample_id].image).max()
        assert diff <= 2 * (4 / 255) + 2 / 65535


def test_protect_em_writes_delta_sidecars(clean_dir, tmp_path):
    out = tmp_path / "em"
    code = main(
        ["protect", "--data", str(clean_dir), "--out", str(out), "--protect.kind", "em"]
        + TINY_PROTECT
    )
    assert code == 0
    manifest = json.loads((out / "manifest.json").read_text())
    for sid in manifest["splits"]["train"]:
        assert (out / "train" / "deltas" / f"{sid}.f32").exists()


def test_protect_missing_dataset_exits_2(tmp_path):
    code = main(
        ["protect", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]
    )
    assert code == 2


def test_train_eval_defend_report_pipeline(clean_dir, tmp_path):
    run = tmp_path / "run"
    code = main(["train", "--data", str(clean_dir), "--out", str(run)] + TINY_TRAIN)
    assert code == 0
    assert (run / "model.npz").exists()

    cell = tmp_path / "cells" / "none__unet__none"
    code = main(
        [
            "eval",
            "--model", str(run / "model.npz"),
            "--data", str(clean_dir),
            "--protected", str(clean_dir),
            "--out", str(cell),
        ]
    )
    assert code == 0
    metrics = json.loads((cell / "metrics.json").read_text())
    # identical image pairs serialize the infinite-PSNR sentinel
    assert metrics["psnr"] is None and metrics["psnr_infinite"] is True
    assert (cell / "done").exists()

    defended = tmp_path / "defended"
    code = main(
        ["defend", "--data", str(clean_dir), "--out", str(defended),
         "--defense.kind", "jpeg"]
    )
    assert code == 0
    from segshield.dataio import load_split

    for before, after in zip(load_split(clean_dir, "train"), load_split(defended, "train")):
        np.testing.assert_array_equal(before.mask, after.mask)

    cell2 = tmp_path / "cells" / "none__unet__jpeg"
    code = main(
        [
            "eval",
            "--model", str(run / "model.npz"),
            "--data", str(clean_dir),
            "--defense-label", "jpeg",
            "--out", str(cell2),
        ]
    )
    assert code == 0

    report_dir = tmp_path / "report"
    code = main(["report", "--cells", str(tmp_path / "cells"), "--out", str(report_dir)])
    assert code == 0
    lines = (report_dir / "matrix.csv").read_text().strip().split("\n")
    assert len(lines) == 1 + 2 * 4  # header + one row per cell per metric
    assert (report_dir / "dsc_per_cell.png").exists()


def test_report_ignores_incomplete_cells(clean_dir, tmp_path):
    cells = tmp_path / "cells"
    stale = cells / "incomplete"
    stale.mkdir(parents=True)
    (stale / "metrics.json").write_text("{}")  # no done marker
    code = main(["report", "--cells", str(cells), "--out", str(tmp_path / "rep")])
    assert code == 2  # nothing completed


def test_eval_missing_model_exits_2(clean_dir, tmp_path):
    code = main(
        [
            "eval",
            "--model", str(tmp_path / "missing.npz"),
            "--data", str(clean_dir),
            "--out", str(tmp_path / "cell"),
        ]
    )
    assert code == 2


def test_train_idempotent(clean_dir, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert main(["train", "--data", str(clean_dir), "--out", str(out)] + TINY_TRAIN) == 0
    assert tree_hash(a) == tree_hash(b)
