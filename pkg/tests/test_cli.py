"""CLI subcommands: workflow smoke, exit codes, published-row impro."""

import json

import numpy as np
import pytest

from promptmatte.cli import main
from promptmatte.images import load_gray, save_rgb
from promptmatte.synth import list_scene_dirs, load_scene

TINY_CONFIG = {
    "unet": {"base_channels": 8, "channel_mults": [1, 2], "blocks_per_level": 1,
             "heads": 2, "d_cond": 32, "context_channels": 8, "norm_groups": 4},
    "codec": {"downsample_factor": 4, "latent_channels": 4, "mode": "fixed"},
    "train": {"epochs": 1, "scenes_per_epoch": 2, "image_size": 32, "seed": 5,
              "warmup_steps": 10},
    "mask_sigma": 0.1,
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A tiny config, dataset and trained checkpoint shared by CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    config = root / "config.json"
    config.write_text(json.dumps(TINY_CONFIG))
    assert main(["gen-data", "--out", str(root / "data"), "--count", "3",
                 "--seed", "4", "--size", "32"]) == 0
    assert main(["train", "--config", str(config), "--out", str(root / "ckpt")]) == 0
    return root


class TestImproCommand:
    def test_published_row(self, capsys):
        code = main(["impro",
                     "--baseline", "0.0302,0.0388,66.27,46.63,18.77",
                     "--method", "0.0109,0.0189,31.80,26.84,17.51"])
        assert code == 0
        out = capsys.readouterr().out.strip()
        assert abs(float(out) - 43.27) <= 0.05

    def test_malformed_values(self, capsys):
        assert main(["impro", "--baseline", "1,junk", "--method", "1,2"]) == 2


class TestGenData:
    def test_empty_dataset_has_manifest(self, tmp_path, capsys):
        assert main(["gen-data", "--out", str(tmp_path / "d"), "--count", "0"]) == 0
        assert (tmp_path / "d" / "manifest.json").exists()
        assert list_scene_dirs(tmp_path / "d") == []

    def test_scene_layout(self, workspace):
        dirs = list_scene_dirs(workspace / "data")
        assert len(dirs) == 3
        for d in dirs:
            assert (d / "image.png").exists()
            assert (d / "alpha.png").exists()
            assert (d / "prompt.txt").exists()
            assert (d / "meta.txt").exists()


class TestTrainEval:
    def test_checkpoint_contents(self, workspace):
        ckpt = workspace / "ckpt"
        manifest = json.loads((ckpt / "manifest.json").read_text())
        assert manifest["step"] == 2
        assert manifest["seed"] == 5
        assert manifest["config"]["unet"]["base_channels"] == 8
        assert (ckpt / "loss.csv").exists()
        header, *rows = (ckpt / "loss.csv").read_text().strip().splitlines()
        assert header == "step,lr,loss"
        assert len(rows) == 2

    def test_eval_writes_reports(self, workspace, capsys):
        out = workspace / "report"
        code = main(["eval", "--ckpt", str(workspace / "ckpt"),
                     "--data", str(workspace / "data"), "--prompt", "box",
                     "--baseline", "1.0,1.0,10.0,5.0,5.0", "--out", str(out)])
        assert code == 0
        stdout = capsys.readouterr().out
        assert "MSE" in stdout
        from promptmatte.training import eval_report_from_csv

        report = eval_report_from_csv((out / "report.csv").read_text())
        assert report.prompt_type == "box"
        assert report.impro_percent is not None

    def test_bad_baseline_length(self, workspace, capsys):
        assert main(["eval", "--ckpt", str(workspace / "ckpt"),
                     "--data", str(workspace / "data"), "--prompt", "box",
                     "--baseline", "1.0,2.0"]) == 2

    def test_missing_checkpoint_is_runtime_error(self, workspace, capsys):
        assert main(["eval", "--ckpt", str(workspace / "nope"),
                     "--data", str(workspace / "data"), "--prompt", "box"]) == 3


class TestInfer:
    def test_oracle_fixture_roundtrip(self, workspace, monkeypatch, capsys):
        scene_dir = list_scene_dirs(workspace / "data")[0]
        scene = load_scene(scene_dir)

        from promptmatte.tensor import Tensor

        def oracle(params, run, image, prompt, opacity=1, record=None, dtype=np.float32):
            h, w = image.shape[:2]
            alpha = np.zeros((h, w))
            gt = scene.gt_alpha[:, :, 0]
            alpha[:gt.shape[0], :gt.shape[1]] = gt
            return Tensor(alpha[None, None])

        monkeypatch.setattr("promptmatte.cli.predict_alpha", oracle)
        out = workspace / "alpha_out.png"
        code = main(["infer", "--ckpt", str(workspace / "ckpt"),
                     "--image", str(scene_dir / "image.png"),
                     "--prompt", str(scene_dir / "prompt.txt"),
                     "--out", str(out)])
        assert code == 0
        got = load_gray(out)
        assert got.shape == scene.gt_alpha.shape
        assert np.abs(got - scene.gt_alpha).max() <= 1.0 / 255 + 1e-9

    def test_real_model_runs(self, workspace, capsys):
        scene_dir = list_scene_dirs(workspace / "data")[0]
        out = workspace / "alpha_real.png"
        code = main(["infer", "--ckpt", str(workspace / "ckpt"),
                     "--image", str(scene_dir / "image.png"),
                     "--prompt", str(scene_dir / "prompt.txt"),
                     "--opacity", "1", "--out", str(out)])
        assert code == 0
        alpha = load_gray(out)
        assert alpha.shape == (32, 32, 1)

    def test_nonsquare_image_padded_and_cropped(self, workspace, tmp_path, capsys):
        g = np.random.default_rng(0)
        save_rgb(tmp_path / "odd.png", g.random((37, 45, 3)))
        (tmp_path / "p.txt").write_text("box 0.2 0.2 0.8 0.8\n")
        out = tmp_path / "odd_alpha.png"
        code = main(["infer", "--ckpt", str(workspace / "ckpt"),
                     "--image", str(tmp_path / "odd.png"),
                     "--prompt", str(tmp_path / "p.txt"), "--out", str(out)])
        assert code == 0
        assert load_gray(out).shape == (37, 45, 1)


class TestVizAttn:
    def test_writes_map(self, workspace, capsys):
        scene_dir = list_scene_dirs(workspace / "data")[0]
        out = workspace / "attn.png"
        code = main(["viz-attn", "--ckpt", str(workspace / "ckpt"),
                     "--image", str(scene_dir / "image.png"),
                     "--prompt", str(scene_dir / "prompt.txt"), "--out", str(out)])
        assert code == 0
        grid = load_gray(out)
        assert grid.shape == (32, 32, 1)
        assert grid.min() >= 0.0 and grid.max() <= 1.0


class TestParams:
    def test_tiny_config_count(self, workspace, capsys):
        code = main(["params", "--config", str(workspace / "config.json")])
        assert code == 0
        printed = int(capsys.readouterr().out.strip())

        from promptmatte.config import load_run_config
        from promptmatte.unet import init_model, param_count

        run = load_run_config(workspace / "config.json")
        assert printed == param_count(init_model(run.unet, run.codec, seed=5))


class TestConfigValidation:
    def test_unknown_key_rejected(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"unet": {"base_channels": 8, "kernel_flavor": "spicy"}}))
        assert main(["params", "--config", str(bad)]) == 2
        assert "kernel_flavor" in capsys.readouterr().err

    def test_unknown_top_level_key_rejected(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"uent": {}}))
        assert main(["params", "--config", str(bad)]) == 2
