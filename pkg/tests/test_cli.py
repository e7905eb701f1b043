import json

import numpy as np
import pytest

from uformer360 import cli
from uformer360.imageio import load_image, save_image

TINY = """\
# two-stage model on 32x64 data
height = 32
base_channels = 8
depths = 1, 1
window_size = 4
head_dim = 4
steps = 2
batch_size = 2
val_every = 1
checkpoint_every = 0
"""


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    assert cli.main(["synth-data", "--scenes", "3", "--out", str(d), "--height", "32"]) == 0
    return d


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    d = tmp_path_factory.mktemp("run")
    (d / "cfg.txt").write_text(TINY)
    assert cli.main(["train", "--config", str(d / "cfg.txt"), "--data", str(dataset), "--out", str(d / "out")]) == 0
    return d / "out"


class TestConfig:
    def test_parse(self):
        cfg = cli.parse_config(TINY + "freeze_discriminator = yes\n")
        assert cfg["depths"] == (1, 1) and cfg["freeze_discriminator"] is True and cfg["steps"] == 2

    @pytest.mark.parametrize("text", ["colour = red", "steps = 1\nsteps = 2", "steps", "steps = two",
                                      "use_rel_pos_bias = maybe"])
    def test_rejects(self, text):
        with pytest.raises(cli.CliError):
            cli.parse_config(text)

    def test_build(self):
        g, d, o = cli.build_from_config(cli.parse_config(TINY), seed=3)
        assert (g.height, g.width, g.seed, d.seed, o.seed) == (32, 64, 3, 4, 3)

    def test_unknown_preset(self):
        with pytest.raises(cli.CliError):
            cli.build_from_config({"preset": "huge"})


class TestCommands:
    def test_synth_data_manifest(self, dataset):
        m = json.loads((dataset / "manifest.json").read_text())
        assert len(m["scenes"]) == 3 and m["height"] == 32

    def test_train_outputs(self, trained):
        recs = [json.loads(s) for s in (trained / "losses.jsonl").read_text().splitlines()]
        assert [r["step"] for r in recs] == [1, 2]
        assert (trained / "final.ckpt").exists()
        vals = [json.loads(s) for s in (trained / "val.jsonl").read_text().splitlines()]
        assert [v["step"] for v in vals] == [0, 1, 2]

    def test_infer(self, trained, tmp_path, capsys):
        save_image(tmp_path / "view.ppm", np.random.default_rng(0).random((16, 16, 3)))
        code, out, _ = run(capsys, "infer", "--ckpt", trained / "final.ckpt", "--input", tmp_path / "view.ppm",
                           "--fov", 60, "--out", tmp_path / "pred")
        assert code == 0
        hdr = load_image(tmp_path / "pred.hdr")
        assert hdr.shape == (32, 64, 3) and hdr.min() >= 0

    def test_eval_generator(self, dataset, trained, tmp_path, capsys):
        code, out, _ = run(capsys, "eval", "--ckpt", trained / "final.ckpt", "--data", dataset,
                           "--mode", "outdoor", "--out", tmp_path / "m.json")
        assert code == 0
        rep = json.loads((tmp_path / "m.json").read_text())
        assert rep["count"] == 3 * rep["panoramas"] and np.isfinite(rep["si_rmse"])

    def test_eval_identity_is_perfect(self, dataset, tmp_path, capsys):
        code, _, _ = run(capsys, "eval", "--model", "identity", "--data", dataset, "--split", "all",
                         "--mode", "indoor", "--out", tmp_path / "m.json")
        rep = json.loads((tmp_path / "m.json").read_text())
        assert code == 0 and rep["count"] == 30
        assert (rep["si_rmse"], rep["rmse"], rep["rgb_angular"]) == (0.0, 0.0, 0.0)

    def test_eval_needs_a_model(self, dataset, tmp_path, capsys):
        code, _, err = run(capsys, "eval", "--data", dataset, "--mode", "indoor", "--out", tmp_path / "m.json")
        assert code == 1 and err.startswith("error: CliError")

    def test_inspect_twice_restores_input(self, dataset, tmp_path, capsys):
        src = dataset / "scenes" / "scene_00000" / "pano.hdr"
        assert run(capsys, "inspect", "--input", src, "--out", tmp_path / "a")[0] == 0
        assert run(capsys, "inspect", "--input", tmp_path / "a_yaw180.hdr", "--out", tmp_path / "b")[0] == 0
        assert (tmp_path / "b_yaw180.hdr").read_bytes() == src.read_bytes()
        assert (tmp_path / "a_pitch_p90.hdr").exists() and (tmp_path / "a_pitch_m90.hdr").exists()

    def test_erp_roundtrip_ops(self, dataset, tmp_path, capsys):
        src = dataset / "scenes" / "scene_00001" / "pano.hdr"
        assert run(capsys, "erp", "--op", "to-persp", "--input", src, "--out", tmp_path / "p.pfm",
                   "--size", 24)[0] == 0
        assert load_image(tmp_path / "p.pfm").shape == (24, 24, 3)
        assert run(capsys, "erp", "--op", "from-persp", "--input", tmp_path / "p.pfm", "--out", tmp_path / "e.pfm",
                   "--height", 16, "--mask-out", tmp_path / "m.pfm")[0] == 0
        assert load_image(tmp_path / "m.pfm").shape == (16, 32)
        assert run(capsys, "erp", "--op", "yaw", "--angle", 90, "--input", src, "--out", tmp_path / "y.hdr")[0] == 0

    def test_render_diffuse(self, dataset, tmp_path, capsys):
        src = dataset / "scenes" / "scene_00002" / "pano.hdr"
        assert run(capsys, "render-diffuse", "--env", src, "--out", tmp_path / "r")[0] == 0
        assert load_image(tmp_path / "r.pfm").shape == (96, 128, 3)

    def test_selftest(self, capsys):
        code, out, _ = run(capsys, "selftest")
        assert code == 0 and "FAIL" not in out

    def test_seed_accepted_after_subcommand(self, capsys, tmp_path):
        code, _, _ = run(capsys, "synth-data", "--scenes", 1, "--out", tmp_path, "--height", 16, "--seed", 4)
        assert code == 0
        assert json.loads((tmp_path / "manifest.json").read_text())["seed"] == 4


class TestErrors:
    @pytest.mark.parametrize("argv", [["nope"], ["synth-data"], ["--jobs", "0", "selftest"],
                                      ["inspect", "--input", "missing.hdr", "--out", "x"],
                                      ["erp", "--op", "yaw", "--input", "a.png", "--out", "b.png"]])
    def test_one_line_error(self, capsys, argv):
        code, _, err = run(capsys, *argv)
        assert code == 1
        assert err.startswith("error: ") and err.count("\n") == 1
