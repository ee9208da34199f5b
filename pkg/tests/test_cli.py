import json
from pathlib import Path

import pytest
import torch
import yaml
from click.testing import CliRunner

from imshield.checkpoints import save_model
from imshield.cli import main
from imshield.detectors import ForgeryDetector
from imshield.imaging import load_image, load_mask, save_image
from imshield.inn import ImmunizerINN


RES = 32


def synth(seed, size=48):
    g = torch.Generator().manual_seed(seed)
    yy, xx = torch.meshgrid(torch.linspace(0, 1, size), torch.linspace(0, 1, size),
                            indexing="ij")
    base = torch.stack([yy, xx, 0.5 * (yy + xx)])
    for _ in range(3):
        cy, cx = torch.rand(2, generator=g)
        r = 0.1 + 0.2 * torch.rand(1, generator=g)
        blob = ((yy - cy) ** 2 + (xx - cx) ** 2 < r ** 2).float()
        base = base * (1 - blob) + torch.rand(3, 1, 1, generator=g) * blob
    return (base + 0.02 * torch.randn(3, size, size, generator=g)).clamp(0, 1)


def run_ok(args):
    result = CliRunner().invoke(main, args, catch_exceptions=False)
    assert result.exit_code == 0, result.output
    return result


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Inputs, tiny models, and one full immunize -> attack -> recover chain."""
    root = tmp_path_factory.mktemp("cli")
    inputs = root / "inputs"
    for i in range(3):
        save_image(synth(i), inputs / f"img{i}.png")
    models = root / "models"
    torch.manual_seed(0)
    extra = {"resolution": RES,
             "mask_postprocess": {"threshold": 0.2, "erode_kernel": 2, "dilate_kernel": 4}}
    save_model(ImmunizerINN(hidden=8), models / "immunizer.pt", "immunizer", extra=extra)
    save_model(ForgeryDetector(base=8), models / "detector.pt", "detector", extra=extra)
    run_ok(["immunize", "--input-dir", str(inputs),
            "--model-dir", str(models), "--out", str(root / "immunized")])
    run_ok(["attack", "--immunized-dir", str(root / "immunized"),
            "--out", str(root / "attacked"), "--seed", "7"])
    run_ok(["localize-recover", "--attacked-dir", str(root / "attacked"),
            "--model-dir", str(models), "--out", str(root / "recovered")])
    return root


class TestImmunizeCommand:
    def test_outputs_and_manifest(self, workspace):
        out = workspace / "immunized"
        bmps = sorted(out.glob("*.bmp"))
        edges = sorted(out.glob("*_edge.png"))
        assert len(bmps) == 3 and len(edges) == 3
        manifest = json.loads((out / "immunize_manifest.json").read_text())
        assert len(manifest["entries"]) == 3
        assert manifest["entries"][0]["model_hash"]
        img = load_image(bmps[0])
        assert img.shape == (3, RES, RES)

    def test_written_file_reproduces_protected_image_bitwise(self, workspace):
        from imshield.checkpoints import load_model
        from imshield.data import fit_resolution
        from imshield.imaging import canny_edge, quantize_8bit
        from imshield.inn import immunize as run_immunize
        out = workspace / "immunized"
        manifest = json.loads((out / "immunize_manifest.json").read_text())
        entry = manifest["entries"][0]
        model, extra = load_model(workspace / "models" / "immunizer.pt", "immunizer")
        image = fit_resolution(load_image(entry["original"]), extra["resolution"])
        with torch.no_grad():
            protected, _ = run_immunize(model, image, canny_edge(image))
        assert torch.equal(load_image(out / entry["immunized"]),
                           quantize_8bit(protected))

    def test_missing_model_fatal(self, workspace, tmp_path):
        result = CliRunner().invoke(main, [
            "immunize", "--input-dir", str(workspace / "inputs"),
            "--model-dir", str(tmp_path), "--out", str(tmp_path / "o")])
        assert result.exit_code != 0
        assert "not found" in result.output

    def test_unreadable_input_skipped(self, workspace, tmp_path):
        bad = tmp_path / "in"
        bad.mkdir()
        (bad / "junk.png").write_bytes(b"junk")
        save_image(synth(9), bad / "ok.png")
        out = tmp_path / "out"
        run_ok(["immunize", "--input-dir", str(bad),
                "--model-dir", str(workspace / "models"), "--out", str(out)])
        assert len(list(out.glob("*.bmp"))) == 1


class TestAttackCommand:
    def test_attack_writes_outputs(self, workspace):
        out = workspace / "attacked"
        manifest = json.loads((out / "attack_manifest.json").read_text())
        assert len(manifest["entries"]) == 3
        for entry in manifest["entries"]:
            assert (out / entry["attacked"]).exists()
            assert (out / entry["mask"]).exists()
            assert "plan" in entry

    def test_none_tamper_zero_mask(self, workspace, tmp_path):
        out = tmp_path / "atk"
        run_ok(["attack", "--immunized-dir", str(workspace / "immunized"),
                "--out", str(out), "--tamper", "none", "--post", "identity"])
        manifest = json.loads((out / "attack_manifest.json").read_text())
        for entry in manifest["entries"]:
            mask = load_mask(out / entry["mask"])
            assert mask.abs().sum() == 0

    def test_replay_byte_identical(self, workspace, tmp_path):
        first = workspace / "attacked"
        replay_dir = tmp_path / "replayed"
        run_ok(["attack", "--immunized-dir", str(workspace / "immunized"),
                "--out", str(replay_dir),
                "--replay", str(first / "attack_manifest.json")])
        prior = json.loads((first / "attack_manifest.json").read_text())["entries"]
        for entry in prior:
            if Path(entry["attacked"]).suffix == ".png":
                a = (first / entry["attacked"]).read_bytes()
                b = (replay_dir / entry["attacked"]).read_bytes()
                assert a == b
            assert ((first / entry["mask"]).read_bytes()
                    == (replay_dir / entry["mask"]).read_bytes())

    def test_same_seed_reproduces(self, workspace, tmp_path):
        out1, out2 = tmp_path / "a1", tmp_path / "a2"
        for out in (out1, out2):
            run_ok(["attack", "--immunized-dir", str(workspace / "immunized"),
                    "--out", str(out), "--seed", "123"])
        m1 = json.loads((out1 / "attack_manifest.json").read_text())["entries"]
        for entry in m1:
            assert ((out1 / entry["attacked"]).read_bytes()
                    == (out2 / entry["attacked"]).read_bytes())


class TestLocalizeRecoverCommand:
    def test_outputs_and_report(self, workspace):
        out = workspace / "recovered"
        assert len(list(out.glob("*_pred_mask.png"))) == 3
        assert len(list(out.glob("*_recovered.png"))) == 3
        # ground truth is available via the attack manifest -> report written
        assert (out / "report.csv").exists()
        assert (out / "summary.csv").exists()

    def test_resolution_mismatch_fatal(self, workspace, tmp_path):
        wrong = tmp_path / "wrong"
        save_image(synth(5, 64), wrong / "big.png")
        result = CliRunner().invoke(main, [
            "localize-recover", "--attacked-dir", str(wrong),
            "--model-dir", str(workspace / "models"), "--out", str(tmp_path / "o")])
        assert result.exit_code != 0
        assert "resolution" in result.output


class TestEvaluateCommand:
    def test_manifest_evaluation(self, workspace, tmp_path):
        attacked = workspace / "attacked"
        recovered = workspace / "recovered"
        manifest = json.loads((attacked / "attack_manifest.json").read_text())["entries"]
        rows = ["name,original,immunized,attacked,gt_mask,pred_mask,recovered,tamper_kind,post_kind"]
        for entry in manifest:
            stem = Path(entry["attacked"]).stem
            rows.append(",".join([
                stem, entry["original"], entry["source"], "",
                str(attacked / entry["mask"]),
                str(recovered / f"{stem}_pred_mask.png"),
                str(recovered / f"{stem}_recovered.png"),
                entry["plan"]["tamper_kind"], entry["plan"]["post_kind"]]))
        manifest_csv = tmp_path / "pairs.csv"
        manifest_csv.write_text("\n".join(rows) + "\n")
        out = tmp_path / "report"
        result = run_ok(["evaluate", "--manifest", str(manifest_csv), "--out", str(out)])
        assert "evaluated" in result.output
        assert (out / "report.csv").exists()
        assert (out / "summary.csv").exists()

    def test_incomplete_rows_skipped(self, tmp_path):
        manifest_csv = tmp_path / "pairs.csv"
        manifest_csv.write_text(
            "name,original,immunized,attacked,gt_mask,pred_mask,recovered\n"
            "ghost,/nope.png,/nope2.png,,,,\n")
        out = tmp_path / "rep"
        result = run_ok(["evaluate", "--manifest", str(manifest_csv), "--out", str(out)])
        assert "0 pairs" in result.output or "(1 skipped)" in result.output


class TestTrainingCommands:
    def write_config(self, root, **overrides):
        data_dir = root / "train_data"
        if not data_dir.exists():
            for i in range(4):
                save_image(synth(20 + i), data_dir / f"t{i}.png")
        cfg = {
            "resolution": RES, "seed": 0, "data_dir": str(data_dir),
            "steps_stage1": 2, "steps_stage2": 2, "checkpoint_every": 2,
            "inn_hidden": 8, "detector_base": 8, "d_a_ndf": 8, "d_b_base": 8,
            "hp": {"batch_size": 1},
            "kdjpeg": {"base": 8, "predictor_width": 8, "batch_size": 4,
                       "predictor_epochs": 1, "teacher_warmup_epochs": 0,
                       "joint_epochs": 1},
        }
        cfg.update(overrides)
        path = root / "config.yaml"
        path.write_text(yaml.safe_dump(cfg))
        return path

    def test_train_requires_kdjpeg_checkpoint(self, tmp_path):
        cfg = self.write_config(tmp_path)
        result = CliRunner().invoke(main, ["train", "--config", str(cfg),
                                           "--out", str(tmp_path / "run")])
        assert result.exit_code != 0
        assert "kdjpeg" in result.output.lower()

    def test_train_kdjpeg_then_train(self, tmp_path):
        cfg_path = self.write_config(tmp_path)
        kd_out = tmp_path / "kd"
        run_ok(["train-kdjpeg", "--config", str(cfg_path), "--out", str(kd_out)])
        assert (kd_out / "kdjpeg.pt").exists()
        assert (kd_out / "kdjpeg_history.csv").exists()

        cfg_path = self.write_config(tmp_path,
                                     kdjpeg_checkpoint=str(kd_out / "kdjpeg.pt"))
        run_dir = tmp_path / "run"
        run_ok(["train", "--config", str(cfg_path), "--out", str(run_dir)])
        for name in ("immunizer.pt", "detector.pt", "patch_discriminator.pt",
                     "pixel_discriminator.pt", "metrics.csv", "trainer_checkpoint.pt"):
            assert (run_dir / name).exists(), name
        import csv as _csv
        steps = [int(r["step"]) for r in _csv.DictReader(open(run_dir / "metrics.csv"))]
        assert steps == sorted(steps) and len(steps) == 4

    def test_resume_reaches_same_step_count(self, tmp_path):
        cfg_path = self.write_config(tmp_path)
        kd_out = tmp_path / "kd"
        run_ok(["train-kdjpeg", "--config", str(cfg_path), "--out", str(kd_out)])
        cfg_path = self.write_config(tmp_path,
                                     kdjpeg_checkpoint=str(kd_out / "kdjpeg.pt"))
        run_dir = tmp_path / "resume_run"
        run_ok(["train", "--config", str(cfg_path), "--out", str(run_dir)])
        # resuming a finished run performs no extra steps
        result = run_ok(["train", "--config", str(cfg_path), "--out", str(run_dir),
                         "--resume"])
        assert "trained 4 steps" in result.output

    def test_resume_config_mismatch_fatal(self, tmp_path):
        cfg_path = self.write_config(tmp_path)
        kd_out = tmp_path / "kd"
        run_ok(["train-kdjpeg", "--config", str(cfg_path), "--out", str(kd_out)])
        cfg_path = self.write_config(tmp_path,
                                     kdjpeg_checkpoint=str(kd_out / "kdjpeg.pt"))
        run_dir = tmp_path / "mismatch_run"
        run_ok(["train", "--config", str(cfg_path), "--out", str(run_dir)])
        cfg2 = self.write_config(tmp_path, seed=99,
                                 kdjpeg_checkpoint=str(kd_out / "kdjpeg.pt"))
        result = CliRunner().invoke(main, ["train", "--config", str(cfg2),
                                           "--out", str(run_dir), "--resume"])
        assert result.exit_code != 0
        assert "config hash" in result.output


class TestExampleConfig:
    def test_prints_parseable_yaml(self):
        result = run_ok(["example-config"])
        data = yaml.safe_load(result.output)
        assert data["resolution"] == 256
        assert data["hp"]["alpha"] == 3.0
