"""End-to-end checks of the command line verbs on a desk-scale grid."""
import json
import os

import numpy as np
import pytest

from sliceseg import analysis, cli, volio
from sliceseg.config import (ConfigError, config_from_dict, config_to_dict,
                             load_config, save_config)


def tiny_config(out_dir: str) -> dict:
    return {
        "source": {"kind": "phantom", "preset": "organ_and_lesion",
                   "num_volumes": 6, "seed": 0, "normalization": "zscore"},
        "grid": {"modes": ["end2end_2d", "proposed"], "backbones": ["unet"],
                 "d_values": [3], "base_filters": 4},
        "train": {"max_epochs": 1, "batch_size": 8,
                  "augment": {"probability": 0.0}},
        "folds": {"count": 2, "seed": 0},
        "output_dir": out_dir,
    }


@pytest.fixture(scope="module")
def grid_run(tmp_path_factory):
    """One completed tiny grid, shared by the layout and resume tests."""
    base = tmp_path_factory.mktemp("grid")
    cfg_path = str(base / "cfg.json")
    out_dir = str(base / "run")
    with open(cfg_path, "w", encoding="utf-8") as fh:
        json.dump(tiny_config(out_dir), fh)
    lines = []
    cli.run_grid(load_config(cfg_path), out_dir, log=lines.append)
    return cfg_path, out_dir, lines


# ---------------------------------------------------------------------------
# config io


def test_config_roundtrip(tmp_path):
    cfg = config_from_dict(tiny_config("somewhere"))
    path = str(tmp_path / "cfg.json")
    save_config(cfg, path)
    assert config_to_dict(load_config(path)) == config_to_dict(cfg)


def test_unknown_key_names_its_path(tmp_path):
    bad = tiny_config("x")
    bad["train"]["learning_rate"] = 0.1
    with pytest.raises(ConfigError, match="train.learning_rate"):
        config_from_dict(bad)


def test_unknown_key_exits_nonzero(tmp_path, capsys):
    path = str(tmp_path / "bad.json")
    bad = tiny_config(str(tmp_path / "out"))
    bad["gridd"] = {}
    del bad["grid"]
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(bad, fh)
    assert cli.main(["run", path]) == 1
    assert "error:" in capsys.readouterr().err


def test_missing_config_file_exits_nonzero(tmp_path, capsys):
    assert cli.main(["run", str(tmp_path / "absent.json")]) == 1
    assert "error:" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# grid runs


def test_grid_artifact_layout(grid_run):
    _, out_dir, lines = grid_run
    assert os.path.exists(os.path.join(out_dir, "config.json"))
    assert os.path.exists(os.path.join(out_dir, "source.fingerprint"))
    for name in ("end2end_2d-unet-d01", "proposed-unet-d03"):
        cell = os.path.join(out_dir, "cells", name)
        assert os.path.exists(os.path.join(cell, "cell.json"))
        assert os.path.exists(os.path.join(cell, "cost.csv"))
        for fold in (0, 1):
            fold_dir = os.path.join(cell, f"fold{fold}")
            for artifact in ("metrics.json", "history.csv", "done.marker"):
                assert os.path.exists(os.path.join(fold_dir, artifact))
    assert len([l for l in lines if l.startswith("[done]")]) == 4


def test_aggregate_has_one_row_per_cell(grid_run):
    _, out_dir, _ = grid_run
    with open(os.path.join(out_dir, "aggregate.csv"), "r", encoding="utf-8") as fh:
        rows = fh.read().splitlines()
    assert rows[0] == "mode,backbone,d,folds,mean_dsc,std_dsc"
    assert len(rows) == 3
    assert rows[1].startswith("end2end_2d,unet,1,2,")
    assert rows[2].startswith("proposed,unet,3,2,")


def test_rerun_skips_every_fold_and_keeps_bytes(grid_run):
    cfg_path, out_dir, _ = grid_run
    with open(os.path.join(out_dir, "aggregate.csv"), "rb") as fh:
        before = fh.read()
    lines = []
    cli.run_grid(load_config(cfg_path), out_dir, log=lines.append)
    assert lines and all(l.startswith("[skip]") for l in lines)
    with open(os.path.join(out_dir, "aggregate.csv"), "rb") as fh:
        assert fh.read() == before


def test_deleted_fold_is_retrained_identically(grid_run, tmp_path):
    cfg_path, out_dir, _ = grid_run
    fold_dir = os.path.join(out_dir, "cells", "proposed-unet-d03", "fold1")
    metrics_path = os.path.join(fold_dir, "metrics.json")
    with open(metrics_path, "rb") as fh:
        before = fh.read()
    os.remove(os.path.join(fold_dir, "done.marker"))
    os.remove(metrics_path)
    lines = []
    cli.run_grid(load_config(cfg_path), out_dir, log=lines.append)
    assert sum(l.startswith("[done]") for l in lines) == 1
    with open(metrics_path, "rb") as fh:
        assert fh.read() == before


def test_metrics_record_expected_fields(grid_run):
    _, out_dir, _ = grid_run
    path = os.path.join(out_dir, "cells", "end2end_2d-unet-d01", "fold0",
                        "metrics.json")
    with open(path, "r", encoding="utf-8") as fh:
        metrics = json.load(fh)
    assert set(metrics) >= {"per_class_dsc", "mean_foreground_dsc", "epochs",
                            "stop_reason", "best_val_loss", "test_patients"}
    assert len(metrics["per_class_dsc"]) == 3
    assert metrics["epochs"] == 1


def test_aggregate_verb_reprints_table(grid_run, capsys):
    _, out_dir, _ = grid_run
    assert cli.main(["aggregate", out_dir]) == 0
    out = capsys.readouterr().out
    assert out.startswith("mode,backbone,d,folds,mean_dsc,std_dsc\n")


def test_aggregate_refuses_incomplete_run(tmp_path, capsys):
    out_dir = str(tmp_path / "partial")
    os.makedirs(out_dir)
    save_config(config_from_dict(tiny_config(out_dir)),
                os.path.join(out_dir, "config.json"))
    assert cli.main(["aggregate", out_dir]) == 1
    assert "missing result" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# rendering


def test_render_background_only_stays_gray():
    rng = np.random.default_rng(0)
    img = rng.normal(size=(6, 7))
    data = cli.render_slice(img, np.zeros((6, 7), dtype=np.uint8))
    assert data.startswith(b"P6\n7 6\n255\n")
    pixels = np.frombuffer(data.rsplit(b"255\n", 1)[1], dtype=np.uint8)
    pixels = pixels.reshape(6, 7, 3)
    assert (pixels[..., 0] == pixels[..., 1]).all()
    assert (pixels[..., 1] == pixels[..., 2]).all()


def test_render_single_class_gives_two_colors():
    img = np.full((8, 8), 3.0)
    labels = np.zeros((8, 8), dtype=np.uint8)
    labels[2:5, 2:5] = 1
    data = cli.render_slice(img, labels)
    pixels = np.frombuffer(data.rsplit(b"255\n", 1)[1], dtype=np.uint8).reshape(-1, 3)
    colors = {tuple(p) for p in pixels}
    assert len(colors) == 2
    assert (0, 0, 0) in colors  # constant image renders as black background


def test_render_deterministic_bytes():
    rng = np.random.default_rng(1)
    img = rng.normal(size=(5, 5))
    labels = (rng.random((5, 5)) < 0.3).astype(np.uint8)
    assert cli.render_slice(img, labels) == cli.render_slice(img, labels)


def test_render_shape_mismatch():
    with pytest.raises(ValueError):
        cli.render_slice(np.zeros((4, 4)), np.zeros((4, 5), dtype=np.uint8))


def test_render_verb_and_slice_range(tmp_path, capsys):
    assert cli.main(["generate", "organ_and_lesion", "1", str(tmp_path),
                     "--seed", "3"]) == 0
    capsys.readouterr()
    case = str(tmp_path / "p000")
    out = str(tmp_path / "slice.ppm")
    assert cli.main(["render", case, "5", out]) == 0
    with open(out, "rb") as fh:
        assert fh.read(2) == b"P6"
    assert cli.main(["render", case, "99", out]) == 1
    assert "out of range" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# generate / features / profile


def test_generate_writes_loadable_cases(tmp_path, capsys):
    assert cli.main(["generate", "multi_modal_lesions", "2", str(tmp_path)]) == 0
    stems = volio.list_case_stems(str(tmp_path))
    assert stems == ["p000", "p001"]
    volume = volio.load_case(str(tmp_path), "p000")
    assert volume.image.shape == (32, 32, 16, 4)


def test_generate_unknown_preset(tmp_path, capsys):
    assert cli.main(["generate", "nonesuch", "1", str(tmp_path)]) == 1
    assert "available:" in capsys.readouterr().err


def test_features_verb_matches_direct_analysis(tmp_path, capsys):
    cli.main(["generate", "organ_and_lesion", "3", str(tmp_path), "--seed", "7"])
    capsys.readouterr()
    out = str(tmp_path / "features.csv")
    assert cli.main(["features", str(tmp_path), "--out", out]) == 0
    with open(out, "r", encoding="utf-8") as fh:
        rows = fh.read().splitlines()
    assert rows[0] == "class_id,depth,size_fraction,displacement"
    assert len(rows) == 6  # two classes plus min/mean/max

    labels = [volio.load_case(str(tmp_path), s).labels
              for s in volio.list_case_stems(str(tmp_path))]
    expected = analysis.class_feature_table(labels, 3)
    for line, want in zip(rows[1:3], expected):
        cid, depth, size, disp = line.split(",")
        assert int(cid) == want["class_id"]
        assert float(depth) == want["depth"]
        assert float(size) == want["size_fraction"]
        assert float(disp) == want["displacement"]


def test_profile_csv_shape(grid_run, tmp_path):
    cfg_path, _, _ = grid_run
    out = str(tmp_path / "profile.csv")
    assert cli.main(["profile", cfg_path, "--out", out]) == 0
    with open(out, "r", encoding="utf-8") as fh:
        rows = fh.read().splitlines()
    assert rows[0].split(",")[:4] == ["mode", "backbone", "d", "parameter_count"]
    assert len(rows) == 3
    for line in rows[1:]:
        fields = line.split(",")
        assert int(fields[3]) > 0 and int(fields[4]) > 0 and int(fields[5]) > 0
        assert float(fields[6]) > 0 and float(fields[7]) > 0
