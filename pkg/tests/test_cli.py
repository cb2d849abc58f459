import json

import numpy as np
import pytest

from bodyfit.cli import EXIT_INVALID, EXIT_NUMERICAL, EXIT_OK, run
from bodyfit.io import read_json, read_pgm
from bodyfit.metrics import MetricReport
from bodyfit.model import BodyParams, VirtualJointConfig
from bodyfit.synth import load_scene


def write(path, text):
    path.write_text(text)
    return str(path)


KEYPOINT_CFG = "[stage]\nlambda_k = 1.0\nw_pose = 0.0\nw_shape = 0.0\niterations = 20\n"


@pytest.fixture(scope="module")
def scenes(tmp_path_factory):
    root = tmp_path_factory.mktemp("scenes")
    noise = write(root / "noise.json", json.dumps(
        {"keypoint_sigma": 1.0, "dilation_radius": 2.0, "dropout_prob": 0.0}))
    assert run(["synth", "--out", str(root / "d"), "--seed", "7", "--count", "2", "--noise", noise]) == EXIT_OK
    return root


class TestSynth:
    def test_writes_dirs(self, scenes):
        names = sorted(p.name for p in (scenes / "d").iterdir())
        assert names == ["scene_0000", "scene_0001"]
        s = load_scene(scenes / "d" / "scene_0001")
        assert s.seed == 8 and s.noise.keypoint_sigma == 1.0

    def test_byte_identical_reruns(self, scenes, tmp_path):
        assert run(["synth", "--out", str(tmp_path), "--seed", "7", "--count", "2",
                    "--noise", str(scenes / "noise.json")]) == EXIT_OK
        for name in ("scene.json", "keypoints.json", "mask.pgm", "gt_mask.pgm"):
            a = (scenes / "d" / "scene_0000" / name).read_bytes()
            assert a == (tmp_path / "scene_0000" / name).read_bytes()

    def test_partial(self, tmp_path):
        assert run(["synth", "--out", str(tmp_path), "--seed", "1", "--count", "1", "--partial", "0.5"]) == EXIT_OK
        assert (tmp_path / "scene_0000" / "extrapolated.json").exists()

    def test_bad_count(self, tmp_path):
        assert run(["synth", "--out", str(tmp_path), "--seed", "1", "--count", "0"]) == EXIT_INVALID

    def test_bad_fraction(self, tmp_path):
        assert run(["synth", "--out", str(tmp_path), "--seed", "1", "--count", "1", "--partial", "2"]) == EXIT_INVALID


class TestFitEval:
    def test_round_trip(self, scenes, tmp_path):
        scene = str(scenes / "d" / "scene_0000")
        cfg = write(tmp_path / "k.cfg", KEYPOINT_CFG)
        out, rep, met = (str(tmp_path / n) for n in ("p.json", "r.json", "m.json"))
        assert run(["fit", "--scene", scene, "--config", cfg, "--out", out, "--report", rep]) == EXIT_OK
        params = BodyParams.from_dict(read_json(out))
        assert params.to_dict() == read_json(out)
        report = read_json(rep)
        assert len(report["stages"]) == 1
        assert run(["eval", "--scene", scene, "--params", out, "--out", met]) == EXIT_OK
        m = MetricReport.from_dict(read_json(met))
        assert m.to_dict() == read_json(met)
        assert m.keypoint_rmse < 3.0 and 0.0 < m.iou <= 1.0
        first = (tmp_path / "p.json").read_bytes()
        assert run(["fit", "--scene", scene, "--config", cfg, "--out", out]) == EXIT_OK
        assert (tmp_path / "p.json").read_bytes() == first

    def test_missing_mask_named(self, scenes, tmp_path, capsys):
        import shutil
        scene = tmp_path / "s"
        shutil.copytree(scenes / "d" / "scene_0000", scene)
        (scene / "mask.pgm").unlink()
        code = run(["fit", "--scene", str(scene), "--config", "configs/default.cfg",
                    "--out", str(tmp_path / "p.json")])
        assert code == EXIT_INVALID
        assert "mask.pgm" in capsys.readouterr().err

    def test_keypoint_config_needs_no_mask(self, scenes, tmp_path):
        import shutil
        scene = tmp_path / "s"
        shutil.copytree(scenes / "d" / "scene_0000", scene)
        (scene / "mask.pgm").unlink()
        cfg = write(tmp_path / "k.cfg", KEYPOINT_CFG)
        assert run(["fit", "--scene", str(scene), "--config", cfg, "--out", str(tmp_path / "p.json")]) == EXIT_OK

    def test_missing_config(self, scenes, tmp_path, capsys):
        code = run(["fit", "--scene", str(scenes / "d" / "scene_0000"), "--config", str(tmp_path / "nope.cfg"),
                    "--out", str(tmp_path / "p.json")])
        assert code == EXIT_INVALID and "nope.cfg" in capsys.readouterr().err

    def test_bad_config(self, scenes, tmp_path):
        cfg = write(tmp_path / "bad.cfg", "[stage]\nlambda_q = 1\n")
        assert run(["fit", "--scene", str(scenes / "d" / "scene_0000"), "--config", cfg,
                    "--out", str(tmp_path / "p.json")]) == EXIT_INVALID

    def test_extrapolated(self, tmp_path):
        d = tmp_path / "d"
        assert run(["synth", "--out", str(d), "--seed", "3", "--count", "1", "--partial", "0.5"]) == EXIT_OK
        scene = d / "scene_0000"
        cfg = write(tmp_path / "k.cfg", KEYPOINT_CFG)
        assert run(["fit", "--scene", str(scene), "--config", cfg, "--out", str(tmp_path / "p.json"),
                    "--extrapolated", str(scene / "extrapolated.json")]) == EXIT_OK

    def test_eval_missing_params(self, scenes, tmp_path, capsys):
        code = run(["eval", "--scene", str(scenes / "d" / "scene_0000"), "--params", str(tmp_path / "x.json"),
                    "--out", str(tmp_path / "m.json")])
        assert code == EXIT_INVALID and "x.json" in capsys.readouterr().err

    def test_overlay(self, scenes, tmp_path):
        scene = scenes / "d" / "scene_0000"
        cfg = write(tmp_path / "k.cfg", KEYPOINT_CFG)
        p = str(tmp_path / "p.json")
        assert run(["fit", "--scene", str(scene), "--config", cfg, "--out", p]) == EXIT_OK
        assert run(["overlay", "--scene", str(scene), "--params", p, "--out", str(tmp_path / "o.pgm")]) == EXIT_OK
        img = read_pgm(tmp_path / "o.pgm")
        assert img.shape == (512, 512) and set(np.unique(img)) <= {0, 128, 255}


class TestCalibrate:
    def test_coarse_single_scene(self, tmp_path, monkeypatch):
        import bodyfit.cli as cli
        d = tmp_path / "d"
        assert run(["synth", "--out", str(d), "--seed", "2", "--count", "1"]) == EXIT_OK
        calls = []
        real = cli.calibrate_virtual_joints

        def short(model, scenes, grid, levels):
            calls.append(levels)
            return real(model, scenes, grid[:2], levels=levels)
        monkeypatch.setattr(cli, "calibrate_virtual_joints", short)
        out = tmp_path / "vj.json"
        assert run(["calibrate-vj", "--scenes", str(d), "--grid", "coarse", "--out", str(out)]) == EXIT_OK
        assert calls == [1]
        cfg = VirtualJointConfig.from_list(read_json(out))
        assert len(cfg.entries) == 4 and set(read_json(out)[0]) == {"keypoint_id", "triangle", "b"}

    def test_empty_dir(self, tmp_path):
        assert run(["calibrate-vj", "--scenes", str(tmp_path), "--grid", "fine",
                    "--out", str(tmp_path / "vj.json")]) == EXIT_INVALID

    def test_bad_grid(self, tmp_path):
        assert run(["calibrate-vj", "--scenes", str(tmp_path), "--grid", "medium",
                    "--out", str(tmp_path / "vj.json")]) == EXIT_INVALID


class TestUsage:
    def test_unknown_flag(self, capsys):
        assert run(["synth", "--bogus"]) == EXIT_INVALID
        assert "usage" in capsys.readouterr().err

    def test_unknown_command(self):
        assert run(["frobnicate"]) == EXIT_INVALID

    def test_no_command(self):
        assert run([]) == EXIT_INVALID

    def test_gradcheck_small(self, capsys):
        assert run(["gradcheck", "--seed", "1", "--states", "2", "--bodies", "1", "--pixels", "5"]) == EXIT_OK
        out = capsys.readouterr().out
        assert out.count("ok") == 6 and "FAIL" not in out

    def test_gradcheck_failure_exit(self, monkeypatch):
        import bodyfit.gradcheck as gc
        monkeypatch.setattr(gc, "run_all", lambda *a, **k: [gc.CheckResult("mask", 1.0, 1)])
        assert run(["gradcheck", "--seed", "1"]) == EXIT_NUMERICAL
