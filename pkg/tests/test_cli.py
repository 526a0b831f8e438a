import csv
import json

import numpy as np
import pytest

from xview.cli import GT_COLOR, PRED_COLOR, main, overlay_pixels, render_overlay, resolve_config
from xview.errors import ConfigError
from xview.masks import BinaryMask, boundary
from xview.synthgen import make_dataset, read_ppm, tree_digest

TINY = {
    "n_train": 16, "n_val": 8,
    "train": {"model": {"dim": 8}, "epochs_s1": 1, "epochs_s2": 1, "batch_size": 8,
              "s1_fraction": 0.5},
}


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "c.json").write_text(json.dumps(TINY))
    assert main(["gen-data", "--config", str(d / "c.json"), "--out", str(d / "data")]) == 0
    assert main(["train", "--config", str(d / "c.json"), "--data", str(d / "data"),
                 "--out", str(d / "m.ckpt")]) == 0
    return d


@pytest.fixture(scope="module")
def sample():
    return next(s for s in make_dataset(0, 8, 8).samples("val") if s.visible_target)


class TestConfig:
    def test_defaults(self):
        cfg = resolve_config()
        assert cfg["seed"] == 42 and cfg["n_train"] == 2000 and cfg["n_val"] == 500
        assert len(cfg["grid"]["cells"]) == 4

    @pytest.mark.parametrize("raw", [{"colour": 1}, {"train": {"lr": 1}}, {"generator": {"zoom": 1}},
                                     {"direction": "up"}, {"train": 3},
                                     {"train": {"epochs_s2": "four"}}])
    def test_rejects_bad_keys(self, raw):
        with pytest.raises(ConfigError):
            resolve_config(raw)


class TestExitCodes:
    def test_unknown_command(self, capsys):
        assert main(["frobnicate"]) == 1
        assert "usage" in capsys.readouterr().err

    def test_unknown_flag(self, capsys, tmp_path):
        assert main(["gen-data", "--out", str(tmp_path), "--bogus"]) == 1
        assert "usage" in capsys.readouterr().err

    def test_missing_required(self):
        assert main(["eval", "--out", "x.json"]) == 1

    def test_bad_config_key(self, tmp_path):
        (tmp_path / "c.json").write_text('{"nope": 1}')
        assert main(["gen-data", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / "d")]) == 1

    def test_runtime_error(self, tmp_path):
        (tmp_path / "bad.ckpt").write_text('{"version": 99}')
        rc = main(["eval", "--checkpoint", str(tmp_path / "bad.ckpt"), "--out", str(tmp_path / "r.json")])
        assert rc == 2
        assert not (tmp_path / "r.json").exists()

    def test_missing_data_dir(self, workdir, tmp_path):
        rc = main(["eval", "--checkpoint", str(workdir / "m.ckpt"), "--data", str(tmp_path / "none"),
                   "--out", str(tmp_path / "r.json")])
        assert rc == 2


class TestCommands:
    def test_gen_data_rerun_identical(self, workdir, tmp_path):
        assert main(["gen-data", "--config", str(workdir / "c.json"), "--out", str(tmp_path / "again")]) == 0
        assert tree_digest(tmp_path / "again") == tree_digest(workdir / "data")
        manifest = json.loads((tmp_path / "again" / "manifest.json").read_text())
        assert manifest["resolved_config"]["n_train"] == 16

    def test_train_rerun_identical(self, workdir, tmp_path):
        assert main(["train", "--config", str(workdir / "c.json"), "--data", str(workdir / "data"),
                     "--out", str(tmp_path / "m.ckpt")]) == 0
        assert (tmp_path / "m.ckpt").read_bytes() == (workdir / "m.ckpt").read_bytes()

    def test_train_creates_output_directory(self, workdir, tmp_path):
        out = tmp_path / "nested" / "run" / "m.ckpt"
        assert main(["train", "--config", str(workdir / "c.json"), "--data", str(workdir / "data"),
                     "--out", str(out)]) == 0
        assert out.read_bytes() == (workdir / "m.ckpt").read_bytes()

    def test_seed_override_changes_checkpoint(self, workdir, tmp_path):
        assert main(["train", "--config", str(workdir / "c.json"), "--data", str(workdir / "data"),
                     "--seed", "7", "--out", str(tmp_path / "m.ckpt")]) == 0
        obj = json.loads((tmp_path / "m.ckpt").read_text())
        assert obj["resolved_config"]["seed"] == 7
        assert (tmp_path / "m.ckpt").read_bytes() != (workdir / "m.ckpt").read_bytes()

    @pytest.mark.parametrize("mode", ["dual", "visual_only", "memory"])
    def test_eval_schema_and_determinism(self, workdir, tmp_path, mode):
        argv = ["eval", "--checkpoint", str(workdir / "m.ckpt"), "--data", str(workdir / "data"),
                "--mode", mode]
        assert main(argv + ["--out", str(tmp_path / "a.json")]) == 0
        assert main(argv + ["--out", str(tmp_path / "b.json")]) == 0
        a = (tmp_path / "a.json").read_bytes()
        assert a == (tmp_path / "b.json").read_bytes()
        report = json.loads(a)
        assert list(report)[:6] == ["iou", "le", "ca", "va", "n_samples", "n_visible_pairs"]
        assert report["mode"] == mode and report["resolved_config"]["seed"] == 42

    def test_ablate_rows(self, workdir, tmp_path):
        grid = dict(TINY, grid={"cells": [{"run_id": "a", "mcfuse": False},
                                          {"run_id": "b", "fixed_k": 0.5}]})
        (tmp_path / "g.json").write_text(json.dumps(grid))
        out = tmp_path / "t.csv"
        assert main(["ablate", "--config", str(tmp_path / "g.json"), "--data", str(workdir / "data"),
                     "--out", str(out)]) == 0
        rows = list(csv.DictReader(out.open()))
        assert [r["run_id"] for r in rows] == ["a", "b"]
        assert rows[1]["fusion"] == "fixed_k(0.5)"
        side = json.loads(out.with_suffix(".json").read_text())
        assert side["resolved_config"]["grid"] == grid["grid"]

    def test_infer(self, workdir, tmp_path):
        assert main(["infer", "--checkpoint", str(workdir / "m.ckpt"), "--data", str(workdir / "data"),
                     "--out", str(tmp_path / "p.json")]) == 0
        obj = json.loads((tmp_path / "p.json").read_text())
        assert obj["predictions"] and set(obj["predictions"][0]["mask"]) == {"w", "h", "runs"}

    def test_render(self, workdir, tmp_path):
        assert main(["render", "--checkpoint", str(workdir / "m.ckpt"), "--data", str(workdir / "data"),
                     "--index", "1", "--out", str(tmp_path / "o.ppm")]) == 0
        assert read_ppm(tmp_path / "o.ppm").shape == (64, 128, 3)
        assert json.loads((tmp_path / "o.ppm.json").read_text())["index"] == 1

    def test_render_bad_index(self, workdir, tmp_path):
        rc = main(["render", "--checkpoint", str(workdir / "m.ckpt"), "--data", str(workdir / "data"),
                   "--index", "999", "--out", str(tmp_path / "o.ppm")])
        assert rc == 1 and not (tmp_path / "o.ppm").exists()


class TestOverlay:
    def test_layout(self, sample, tmp_path):
        pixels = render_overlay(sample, sample.target_mask, tmp_path / "o.ppm")
        assert pixels.shape == (64, 128, 3)
        assert np.array_equal(pixels[:, :64], sample.query_pixels)
        assert np.array_equal(read_ppm(tmp_path / "o.ppm"), pixels)

    def test_empty_prediction(self, sample):
        right = overlay_pixels(sample, BinaryMask.empty(64, 64))[:, 64:]
        edge = boundary(sample.target_mask)
        assert np.all(right[edge] == GT_COLOR)
        assert np.array_equal(right[~edge], sample.target_pixels[~edge])

    def test_fill_matches_gt(self, sample):
        right = overlay_pixels(sample, sample.target_mask)[:, 64:].astype(int)
        t = sample.target_pixels.astype(int)
        fill = sample.target_mask.bits & ~boundary(sample.target_mask)
        assert np.array_equal(right[fill], (t[fill] + PRED_COLOR) // 2)
        untouched = ~sample.target_mask.bits
        assert np.array_equal(right[untouched], t[untouched])

    def test_dimension_mismatch(self, sample):
        with pytest.raises(ConfigError):
            overlay_pixels(sample, BinaryMask.empty(32, 32))
