import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from mfrecon.cli import main
from mfrecon.mesh import icosphere, save_obj


def tree_digest(root: Path) -> dict:
    out = {}
    for p in sorted(root.rglob("*")):
        if p.is_file():
            out[str(p.relative_to(root))] = hashlib.sha256(p.read_bytes()).hexdigest()
    return out


GEN_ARGS = ["gen-data", "--frames", "4", "--size", "32", "--seed", "1"]


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("ds") / "data"
    assert main(GEN_ARGS + ["--out", str(d)]) == 0
    return d


@pytest.fixture(scope="module")
def trained(data_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = {
        "preset": "desk", "seed": 3,
        "mft": {"image_channels": 8, "geom_channels": 4, "model_dim": 8, "heads": 2,
                "occupancy_hidden": [16, 8], "shift_hidden": [16, 8],
                "color_hidden": [16, 8], "encoder_width": 8, "geom_encoder_width": 4,
                "geom_resolution": 8, "image_size": 32},
        "train": {"steps": 6, "points_surface": 32, "points_uniform": 16,
                  "n_refs": 2, "log_every": 1, "checkpoint_every": 0},
    }
    cfg_path = out / "cfg.json"
    cfg_path.write_text(json.dumps(cfg))
    code = main(["train", "--data", str(data_dir), "--out", str(out / "run"),
                 "--config", str(cfg_path), "--seed", "3"])
    assert code == 0
    return out / "run" / "model.ckpt", cfg_path


class TestGenData:
    def test_deterministic_trees(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(GEN_ARGS + ["--out", str(a)]) == 0
        assert main(GEN_ARGS + ["--out", str(b)]) == 0
        da, db = tree_digest(a), tree_digest(b)
        assert da == db and len(da) > 8

    def test_files_exist(self, data_dir):
        assert (data_dir / "manifest.json").exists()
        assert (data_dir / "body.xbody").exists()
        assert (data_dir / "images" / "frame_000.png").exists()
        assert (data_dir / "gt" / "frame_003.obj").exists()


class TestSelect:
    def test_writes_cache(self, data_dir, tmp_path):
        out = tmp_path / "sel.json"
        assert main(["select", "--data", str(data_dir), "--n", "2",
                     "--out", str(out)]) == 0
        cache = json.loads(out.read_text())
        assert set(cache) == {"0", "1", "2", "3"}
        assert all(len(v) == 2 for v in cache.values())

    def test_missing_data_dir_exit_code(self, tmp_path):
        assert main(["select", "--data", str(tmp_path / "nope"), "--n", "2"]) == 4


class TestEval:
    def test_identical_meshes_zero(self, tmp_path, capsys):
        mesh = icosphere(2, radius=0.5)
        p = tmp_path / "m.obj"
        save_obj(mesh, p)
        out = tmp_path / "report.json"
        assert main(["eval", "--pred", str(p), "--gt", str(p), "--samples", "500",
                     "--seed", "2", "--out", str(out)]) == 0
        report = json.loads(out.read_text())
        assert report["chamfer_cm"] == pytest.approx(0.0, abs=1e-6)
        assert report["p2s_cm"] == pytest.approx(0.0, abs=1e-6)
        assert report["samples"] == 500

    def test_usage_error_without_inputs(self, capsys):
        with pytest.raises(SystemExit) as err:
            main(["eval"])
        assert err.value.code == 2


class TestTrainReconstruct:
    def test_reconstruct_and_report(self, data_dir, trained, tmp_path):
        ckpt, _ = trained
        out = tmp_path / "recon"
        code = main(["reconstruct", "--data", str(data_dir), "--ckpt", str(ckpt),
                     "--out", str(out), "--frame", "0", "--resolution", "12",
                     "--refs", "2", "--format", "both"])
        assert code == 0
        assert (out / "frame_000_report.json").exists()
        report = json.loads((out / "frame_000_report.json").read_text())
        assert "timings" not in report          # timings stay out of artifacts
        assert report["resolution"] == 12

    def test_reconstruct_deterministic(self, data_dir, trained, tmp_path):
        ckpt, _ = trained
        a, b = tmp_path / "a", tmp_path / "b"
        args = ["reconstruct", "--data", str(data_dir), "--ckpt", str(ckpt),
                "--frame", "1", "--resolution", "10", "--refs", "2"]
        assert main(args + ["--out", str(a)]) == 0
        assert main(args + ["--out", str(b)]) == 0
        assert tree_digest(a) == tree_digest(b)

    def test_eval_sweep_csv(self, data_dir, trained, tmp_path):
        ckpt, _ = trained
        out = tmp_path / "curve.csv"
        code = main(["eval", "--data", str(data_dir), "--ckpt", str(ckpt),
                     "--frame", "0", "--sweep-refs", "1,2", "--resolution", "10",
                     "--samples", "400", "--out", str(out)])
        assert code == 0
        lines = out.read_text().strip().splitlines()
        assert lines[0] == "n_refs,chamfer_cm,p2s_cm"
        assert len(lines) == 3

    def test_texture_subcommand(self, data_dir, trained, tmp_path):
        ckpt, _ = trained
        gt = data_dir / "gt" / "frame_000.obj"
        out = tmp_path / "tex.obj"
        code = main(["texture", "--data", str(data_dir), "--ckpt", str(ckpt),
                     "--mesh", str(gt), "--frame", "0", "--out", str(out),
                     "--refs", "2"])
        assert code == 0
        assert out.exists()
        line = out.read_text().splitlines()[0].split()
        assert len(line) == 7   # v x y z r g b

    def test_missing_checkpoint_exit(self, data_dir, tmp_path):
        code = main(["reconstruct", "--data", str(data_dir),
                     "--ckpt", str(tmp_path / "none.ckpt"),
                     "--out", str(tmp_path / "o"), "--resolution", "8"])
        assert code == 4


class TestFit:
    def test_fit_round_trip(self, data_dir, tmp_path):
        # frame 1 is yawed a quarter turn, so the zero init starts misaligned
        out = tmp_path / "fit.json"
        code = main(["fit", "--body", str(data_dir / "body.xbody"),
                     "--scan", str(data_dir / "gt" / "frame_001.obj"),
                     "--out", str(out), "--steps", "40", "--samples", "600",
                     "--seed", "5"])
        assert code == 0
        doc = json.loads(out.read_text())
        assert "theta" in doc and "report" in doc
        assert doc["report"]["residuals"][-1] < doc["report"]["residuals"][0]


class TestErrorsAndHelp:
    def test_unknown_flag_exit_2(self):
        with pytest.raises(SystemExit) as err:
            main(["gen-data", "--nonsense", "x", "--out", "y"])
        assert err.value.code == 2

    def test_bad_config_exit_3(self, data_dir, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text('{"preset": "desk", "bogus_key": 1}')
        code = main(["train", "--data", str(data_dir), "--out", str(tmp_path / "o"),
                     "--config", str(bad), "--steps", "1"])
        assert code == 3

    @pytest.mark.parametrize("sub", ["gen-data", "select", "fit", "train",
                                     "reconstruct", "texture", "eval", "gradcheck"])
    def test_help_documents_flags(self, sub, capsys):
        with pytest.raises(SystemExit) as err:
            main([sub, "--help"])
        assert err.value.code == 0
        out = capsys.readouterr().out
        assert "--seed" in out


class TestGradcheckCommand:
    def test_single_seed_run(self, tmp_path, capsys):
        out = tmp_path / "grad.json"
        code = main(["gradcheck", "--seeds", "1", "--out", str(out)])
        assert code == 0
        doc = json.loads(out.read_text())
        assert doc["passed"] is True
        assert doc["max_rel_err"] < 1e-3
