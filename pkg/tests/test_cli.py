"""End-to-end command-line tests on a miniature corpus.

The pipeline test runs generate -> pretrain -> finetune (both modes) ->
evaluate -> segment through ``main()`` with a tiny 4-class config so the
whole chain finishes in seconds.
"""

import csv
import hashlib
import os

import numpy as np
import pytest

import sdnet.autograd as autograd_mod
from sdnet.cli import main
from sdnet.serialize import read_sdt1

MINI_CFG = """\
# miniature end-to-end run
seed = 5
data.n_classes = 4
data.extents = 8,32,32
data.aux_volumes = 2
data.aux_val = 1
data.manual_volumes = 3
data.manual_train = 1
data.manual_val = 1
model.channels = 2
model.kernel_size = 3
train.max_epochs = 2
train.batch_size = 4
train.patience = 0
augment.enabled = false
"""


def write_cfg(tmp_path, data_dir, extra=""):
    path = tmp_path / "run.cfg"
    path.write_text(MINI_CFG + f"data.dir = {data_dir}\n" + extra)
    return str(path)


def tree_digest(root):
    """Order-independent digest of every file under a directory."""
    acc = hashlib.sha256()
    for dirpath, _dirnames, filenames in sorted(os.walk(root)):
        for name in sorted(filenames):
            path = os.path.join(dirpath, name)
            acc.update(os.path.relpath(path, root).encode())
            with open(path, "rb") as fh:
                acc.update(fh.read())
    return acc.hexdigest()


def test_config_value_errors_name_the_key():
    from sdnet.config import ConfigError, build_run_config
    with pytest.raises(ConfigError, match="train.use_dice"):
        build_run_config({"train.use_dice": "maybe"})
    with pytest.raises(ConfigError, match="corrupt.morph"):
        build_run_config({"corrupt.morph": "7"})
    cfg = build_run_config({"corrupt.morph": "1:2,3:-1", "seed": "0x10"})
    assert cfg.corruption.morph == {1: 2, 3: -1}
    assert cfg.seed == 16


def test_flag_override_beats_config_file(tmp_path):
    from sdnet.config import load_run_config
    path = tmp_path / "run.cfg"
    path.write_text("seed = 3\ntrain.max_epochs = 7\n")
    cfg = load_run_config(path, {"seed": "9"})
    assert cfg.seed == 9
    assert cfg.train.max_epochs == 7
    # the root seed reaches both sub-seeded components
    assert cfg.train.seed == 9 and cfg.corruption.seed == 9


def test_unknown_config_key_is_named(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("data.n_clases = 4\n")
    rc = main(["generate", "--config", str(cfg), "--out", str(tmp_path / "d")])
    err = capsys.readouterr().err
    assert rc == 1
    assert "data.n_clases" in err
    assert err.startswith("error: ConfigError:")


def test_generate_rerun_identical_and_seed_changes_bytes(tmp_path, capsys):
    cfg = write_cfg(tmp_path, tmp_path / "unused")
    d1, d2, d3 = (str(tmp_path / n) for n in ("d1", "d2", "d3"))
    assert main(["generate", "--config", cfg, "--out", d1]) == 0
    assert "wrote 5 volumes" in capsys.readouterr().out
    assert main(["generate", "--config", cfg, "--out", d2]) == 0
    assert main(["generate", "--config", cfg, "--seed", "6", "--out", d3]) == 0
    assert tree_digest(d1) == tree_digest(d2)
    assert tree_digest(d1) != tree_digest(d3)


def test_generate_default_config_census(tmp_path, capsys):
    # no config file at all: full defaults -> 60 aux + 30 manual volumes
    out = tmp_path / "default_corpus"
    assert main(["generate", "--out", str(out)]) == 0
    assert "wrote 90 volumes" in capsys.readouterr().out
    vols = sorted(d for d in os.listdir(out) if d.startswith("vol_"))
    assert len(vols) == 90
    for vid in vols:
        for fname in ("image.sdt", "labels_manual.sdt", "labels_aux.sdt"):
            assert (out / vid / fname).is_file()
    manifest = dict(line.split("=", 1)
                    for line in (out / "manifest.txt").read_text().splitlines())
    sizes = {k: len(manifest[k].split(",")) for k in
             ("aux_train", "aux_val", "train", "val", "test")}
    assert sizes == {"aux_train": 54, "aux_val": 6,
                     "train": 15, "val": 5, "test": 10}
    # the rarest class sits in the intended sliver of the label mass
    from sdnet.data import load_dataset
    ds = load_dataset(out)
    counts = np.zeros(ds.n_classes, dtype=np.int64)
    total = 0
    for vol in ds.volumes.values():
        counts += np.bincount(vol.labels_manual.ravel(), minlength=ds.n_classes)
        total += vol.labels_manual.size
    rarest = counts.min() / total
    assert 0.001 <= rarest <= 0.003
    assert counts.argmax() == 0 and counts[0] / total > 0.5


def test_generate_refuses_nonempty_without_force(tmp_path, capsys):
    cfg = write_cfg(tmp_path, tmp_path / "unused")
    out = tmp_path / "occupied"
    out.mkdir()
    (out / "keep.txt").write_text("x")
    rc = main(["generate", "--config", cfg, "--out", str(out)])
    err = capsys.readouterr().err
    assert rc == 1
    assert err.startswith("error: FileExistsError:")
    assert main(["generate", "--config", cfg, "--out", str(out), "--force"]) == 0


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Run the full chain once; tests below inspect its artifacts."""
    root = tmp_path_factory.mktemp("pipeline")
    data = str(root / "data")
    cfg = write_cfg(root, data)
    steps = [
        ["generate", "--config", cfg],
        ["pretrain", "--config", cfg, "--out", str(root / "pre")],
        ["finetune", "--config", cfg, "--init", str(root / "pre" / "pretrain.sdck"),
         "--mode", "normal", "--out", str(root / "ft")],
        ["finetune", "--config", cfg, "--init", str(root / "pre" / "pretrain.sdck"),
         "--mode", "ecb", "--out", str(root / "ft")],
        ["evaluate", "--config", cfg,
         "--checkpoint", str(root / "ft" / "finetune_ecb.sdck"),
         "--out", str(root / "ft")],
        ["segment", "--config", cfg,
         "--checkpoint", str(root / "ft" / "finetune_ecb.sdck"),
         "--volume", "vol_004", "--out", str(root / "seg")],
    ]
    for argv in steps:
        assert main(argv) == 0, f"step failed: {argv[0]}"
    return root


def test_pipeline_artifacts_exist(pipeline):
    for rel in ("pre/pretrain.sdck", "pre/pretrain_log.csv",
                "ft/finetune_normal.sdck", "ft/finetune_normal_log.csv",
                "ft/finetune_ecb.sdck", "ft/finetune_ecb_log.csv",
                "ft/evaluation.csv", "seg/vol_004_labels.sdt"):
        assert (pipeline / rel).is_file(), rel


def test_segment_output_shape_and_labels(pipeline):
    pred = read_sdt1(pipeline / "seg" / "vol_004_labels.sdt")
    assert pred.shape == (8, 32, 32)
    assert pred.dtype == np.float32
    vals = np.unique(pred)
    assert np.all(vals == vals.astype(np.int64))
    assert vals.min() >= 0 and vals.max() < 4


def test_ecb_and_normal_logs_use_different_weights(pipeline):
    def rows(name):
        with open(pipeline / "ft" / name) as fh:
            return list(csv.DictReader(fh))

    def col(row, prefix):
        return np.array([float(row[f"{prefix}_{i}"]) for i in range(4)])

    norm = rows("finetune_normal_log.csv")
    ecb = rows("finetune_ecb_log.csv")
    # normal mode keeps median-frequency weights all the way through
    np.testing.assert_array_equal(col(norm[0], "w"), col(norm[-1], "w"))
    # ecb mode starts from the same standard weights ...
    np.testing.assert_array_equal(col(ecb[0], "w"), col(norm[0], "w"))
    # ... then re-derives epoch 2 weights from epoch 1 validation dice
    from sdnet.losses import ecb_weights
    expect = ecb_weights(col(ecb[0], "a"))
    np.testing.assert_allclose(col(ecb[1], "w"), expect, rtol=1e-4)
    assert not np.array_equal(col(ecb[1], "w"), col(norm[1], "w"))


def test_evaluation_csv_has_aggregate_rows(pipeline):
    with open(pipeline / "ft" / "evaluation.csv") as fh:
        rows = list(csv.DictReader(fh))
    volumes = {r["volume"] for r in rows}
    assert "AGG_MEAN" in volumes and "AGG_STD" in volumes
    assert "vol_004" in volumes


def test_gradcheck_command_passes(capsys):
    assert main(["gradcheck"]) == 0
    out = capsys.readouterr().out
    assert "checks passed" in out
    assert "conv2d" in out


def test_gradcheck_catches_injected_gradient_fault(monkeypatch, capsys):
    real = autograd_mod.conv2d

    def bad_conv2d(x, w, b, **kwargs):
        out = real(x, w, b, **kwargs)
        inner = out._backward

        def tampered():
            inner()
            x.grad *= 1.5  # corrupt only the backward pass

        out._backward = tampered
        return out

    monkeypatch.setattr(autograd_mod, "conv2d", bad_conv2d)
    rc = main(["gradcheck"])
    out = capsys.readouterr().out
    assert rc == 1
    assert "FAILED" in out and "conv2d" in out


def test_missing_checkpoint_is_one_error_line(tmp_path, capsys):
    cfg = write_cfg(tmp_path, tmp_path / "nope")
    rc = main(["evaluate", "--config", cfg,
               "--checkpoint", str(tmp_path / "ghost.sdck"),
               "--out", str(tmp_path / "o")])
    err = capsys.readouterr().err
    assert rc == 1
    assert err.startswith("error: FileNotFoundError:")
    assert err.count("\n") == 1


def test_unknown_volume_is_keyerror(pipeline, tmp_path, capsys):
    cfg = write_cfg(tmp_path, pipeline / "data")
    rc = main(["segment", "--config", cfg,
               "--checkpoint", str(pipeline / "ft" / "finetune_ecb.sdck"),
               "--volume", "vol_999", "--out", str(tmp_path / "s")])
    err = capsys.readouterr().err
    assert rc == 1
    assert err.startswith("error: KeyError:")
    assert "vol_999" in err
