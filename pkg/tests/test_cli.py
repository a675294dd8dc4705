import json
from pathlib import Path

import pytest

from uidsc.cli import main


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Synthetic corpus plus one tiny trained checkpoint, via the CLI itself."""
    root = tmp_path_factory.mktemp("cli")
    data_dir = root / "data"
    assert main([
        "prepare-data", "--synth", "8", "--synth-test", "3", "--size", "32",
        "--seed", "3", "--out", str(data_dir),
    ]) == 0
    ckpt_dir = root / "model"
    assert main([
        "train", "--stage", "1", "--channel", "awgn",
        "--data", str(data_dir / "train" / "ori.jsonl"),
        "--out", str(ckpt_dir), "--seed", "1", "--epochs", "1",
        "--batch-size", "4", "--lr", "0.001", "--image-size", "32",
        "--set", "codec.stage_channels=[4,4]",
        "--set", "codec.downsample_factors=[2,2]",
        "--set", "codec.first_kernel_size=3",
    ]) == 0
    return root


class TestPrepareData:
    def test_synth_deterministic(self, tmp_path):
        for name in ("a", "b"):
            assert main([
                "prepare-data", "--synth", "4", "--size", "32",
                "--seed", "9", "--out", str(tmp_path / name),
            ]) == 0
        a_files = sorted((tmp_path / "a").rglob("*.png"))
        for pa in a_files:
            pb = tmp_path / "b" / pa.relative_size if False else Path(str(pa).replace("/a/", "/b/"))
            assert pa.read_bytes() == pb.read_bytes()

    def test_split_wiring(self, tmp_path):
        (tmp_path / "imgs").mkdir()
        from uidsc.data import save_image
        import numpy as np

        save_image(tmp_path / "imgs" / "x.png", np.random.default_rng(0).random((24, 24, 3)))
        ann = {
            "images": [{"id": 1, "file_name": "x.png", "height": 24, "width": 24}],
            "annotations": [{"id": 5, "image_id": 1, "category_id": 1,
                             "segmentation": [[2.0, 2.0, 12.0, 2.0, 12.0, 12.0, 2.0, 12.0]]}],
            "categories": [{"id": 1, "name": "thing"}],
        }
        with open(tmp_path / "ann.json", "w") as fh:
            json.dump(ann, fh)
        assert main([
            "prepare-data", "--annotations", str(tmp_path / "ann.json"),
            "--images", str(tmp_path / "imgs"), "--out", str(tmp_path / "out"),
        ]) == 0
        assert (tmp_path / "out" / "seg_train.jsonl").exists()

    def test_corrupt_annotations_exit_3(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{broken")
        code = main([
            "prepare-data", "--annotations", str(bad), "--images", str(tmp_path),
            "--out", str(tmp_path / "out"),
        ])
        assert code == 3

    def test_missing_args_usage_error(self, tmp_path):
        assert main(["prepare-data", "--out", str(tmp_path)]) == 2


class TestTrain:
    def test_stage2_requires_init_from(self, workspace):
        code = main([
            "train", "--stage", "2",
            "--data", str(workspace / "data" / "train" / "seg.jsonl"),
            "--out", str(workspace / "nope"), "--epochs", "1",
        ])
        assert code == 2

    def test_unknown_config_key_rejected(self, workspace, tmp_path):
        code = main([
            "train", "--stage", "1",
            "--data", str(workspace / "data" / "train" / "ori.jsonl"),
            "--out", str(tmp_path), "--epochs", "1",
            "--set", "train.warp_speed=9",
        ])
        assert code == 2

    def test_fixed_snr_trains_unconditioned_model(self, workspace, tmp_path):
        assert main([
            "train", "--stage", "1", "--fixed-snr", "10",
            "--data", str(workspace / "data" / "train" / "ori.jsonl"),
            "--out", str(tmp_path), "--seed", "2", "--epochs", "1",
            "--batch-size", "4", "--image-size", "32",
            "--set", "codec.stage_channels=[4,4]",
            "--set", "codec.downsample_factors=[2,2]",
            "--set", "codec.first_kernel_size=3",
        ]) == 0
        import torch

        from uidsc.codec import load_checkpoint

        codec, _ = load_checkpoint(tmp_path / "stage1.ckpt")
        assert codec.config.use_cse is False
        codec.eval()
        s = torch.rand(1, 3, 32, 32)
        with torch.no_grad():
            a, _ = codec(s, None, 0.0, None)
            b, _ = codec(s, None, 25.0, None)
        assert torch.equal(a, b)  # the model ignores the SNR input entirely

    def test_stage2_via_cli(self, workspace, tmp_path):
        assert main([
            "train", "--stage", "2", "--init-from", str(workspace / "model" / "stage1.ckpt"),
            "--data", str(workspace / "data" / "train" / "seg.jsonl"),
            "--out", str(tmp_path), "--seed", "4", "--epochs", "1",
            "--batch-size", "4", "--image-size", "32",
        ]) == 0
        assert (tmp_path / "stage2.ckpt").exists()


class TestEval:
    def test_sweep_and_plot_data(self, workspace, tmp_path):
        ckpt = workspace / "model" / "stage1.ckpt"
        assert main([
            "eval", "--model", f"ours={ckpt}", "--model", f"fix0={ckpt}",
            "--data", str(workspace / "data" / "test" / "seg.jsonl"),
            "--channel", "awgn", "--snrs", "0", "10",
            "--realizations", "2", "--seed", "5", "--image-size", "32",
            "--combine", "0=fix0", "--plot",
            "--out", str(tmp_path),
        ]) == 0
        table = (tmp_path / "sweep.csv").read_text().splitlines()
        assert table[0].startswith("model,channel,snr_db,region,metric,mean,stderr,n")
        assert any("djscc_combination" in line for line in table)
        assert (tmp_path / "curve_psnr_awgn_full.csv").exists()

    def test_missing_checkpoint_exit_3(self, workspace, tmp_path):
        code = main([
            "eval", "--model", "ghost=/nonexistent.ckpt",
            "--data", str(workspace / "data" / "test" / "seg.jsonl"),
            "--out", str(tmp_path),
        ])
        assert code == 3

    def test_seed_reproducible_table(self, workspace, tmp_path):
        ckpt = workspace / "model" / "stage1.ckpt"
        tables = []
        for run in ("r1", "r2"):
            assert main([
                "eval", "--model", f"m={ckpt}",
                "--data", str(workspace / "data" / "test" / "seg.jsonl"),
                "--snrs", "5", "--realizations", "2", "--seed", "8",
                "--image-size", "32", "--out", str(tmp_path / run),
            ]) == 0
            tables.append((tmp_path / run / "sweep.csv").read_text())
        assert tables[0] == tables[1]


class TestTransmit:
    def test_oracle_panel(self, workspace, tmp_path):
        data = workspace / "data"
        ann = data / "test" / "annotations.json"
        with open(ann) as fh:
            first_cat = {c["id"]: c["name"] for c in json.load(fh)["categories"]}
        import json as _json

        with open(ann) as fh:
            ds = _json.load(fh)
        cat = first_cat[ds["annotations"][0]["category_id"]]
        image = ds["images"][0]["file_name"]
        assert main([
            "transmit", "--image", str(data / "test" / "ori" / image),
            "--image-id", "0", "--instruction", f"transmit:{cat}",
            "--snr", "10", "--channel", "awgn",
            "--checkpoint", str(workspace / "model" / "stage1.ckpt"),
            "--provider", "oracle", "--annotations", str(ann),
            "--out", str(tmp_path), "--seed", "3",
        ]) == 0
        for name in ("original", "mask", "masked_input", "reconstruction"):
            assert (tmp_path / f"{name}.png").exists()
        assert (tmp_path / "metrics.json").exists()

    def test_free_text_with_oracle_exit_3(self, workspace, tmp_path):
        data = workspace / "data"
        with open(data / "test" / "annotations.json") as fh:
            ds = json.load(fh)
        image = ds["images"][0]["file_name"]
        code = main([
            "transmit", "--image", str(data / "test" / "ori" / image),
            "--image-id", "0", "--instruction", "Please transmit the player",
            "--checkpoint", str(workspace / "model" / "stage1.ckpt"),
            "--provider", "oracle", "--annotations", str(data / "test" / "annotations.json"),
            "--out", str(tmp_path),
        ])
        assert code == 3


class TestPlot:
    def test_renders_pngs(self, workspace, tmp_path):
        ckpt = workspace / "model" / "stage1.ckpt"
        assert main([
            "eval", "--model", f"m={ckpt}",
            "--data", str(workspace / "data" / "test" / "seg.jsonl"),
            "--snrs", "0", "10", "--realizations", "1", "--image-size", "32",
            "--out", str(tmp_path), "--seed", "0",
        ]) == 0
        assert main([
            "plot", "--table", str(tmp_path / "sweep.csv"), "--out", str(tmp_path / "plots"),
        ]) == 0
        assert (tmp_path / "plots" / "plot_psnr_full.png").exists()
