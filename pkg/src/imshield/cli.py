"""Batch command-line interface.

Verbs: immunize, attack, localize-recover, train, train-kdjpeg, evaluate,
example-config. All commands are deterministic given (inputs, config, seed)
on lossless paths, never mutate their input directories, and write manifests
that let any output be traced to its exact attack plan and model checkpoints.
"""

import csv
import json
import logging
import os
from dataclasses import asdict
from pathlib import Path

import click
import numpy as np
import torch

from . import __version__
from .attacks import (
    POST_KINDS,
    TAMPER_KINDS,
    AttackPlan,
    CropGeometry,
    postprocess,
    sample_attack_plan,
    sample_post_params,
    tamper_from_plan,
)
from .checkpoints import (
    CheckpointError,
    file_digest,
    load_model,
    load_trainer_state,
    save_model,
    save_trainer,
)
from .config import EXAMPLE_CONFIG, config_hash, load_config
from .data import fit_resolution, list_images, load_folder
from .detectors import postprocess_mask
from .evaluate import EvalRow, EvaluationReport
from .imaging import (
    canny_edge,
    f1_score,
    load_image,
    load_mask,
    psnr,
    quantize_8bit,
    save_image,
    save_mask,
    ssim,
)
from .inn import immunize as run_immunize
from .inn import recover as run_recover
from .jpegsim import jpeg_encode_bytes, train_kdjpeg
from .training import PipelineTrainer

log = logging.getLogger("imshield")

IMMUNIZE_MANIFEST = "immunize_manifest.json"
ATTACK_MANIFEST = "attack_manifest.json"


def cache_dir() -> Path | None:
    """Optional cache directory from $IMSHIELD_CACHE."""
    value = os.environ.get("IMSHIELD_CACHE")
    return Path(value) if value else None


def _load_corpus_cached(data_dir, resolution: int):
    """Load a resized corpus, caching the tensors under $IMSHIELD_CACHE."""
    cache = cache_dir()
    key = None
    if cache:
        import hashlib
        paths = list_images(data_dir)
        sig = "|".join(f"{p.name}:{p.stat().st_size}" for p in paths)
        key = cache / (hashlib.sha256(f"{sig}|{resolution}".encode()).hexdigest()[:16]
                       + ".pt")
        if key.exists():
            log.info("corpus cache hit: %s", key)
            return torch.load(key, weights_only=True)
    corpus, _ = load_folder(data_dir, resolution)
    if key and corpus:
        key.parent.mkdir(parents=True, exist_ok=True)
        torch.save(corpus, key)
        log.info("corpus cached: %s", key)
    return corpus


def _fatal(message: str) -> "click.ClickException":
    return click.ClickException(message)


@click.group()
@click.version_option(__version__)
@click.option("-v", "--verbose", is_flag=True, help="Enable debug logging.")
def main(verbose):
    """Image immunization: protect, attack-simulate, localize, recover."""
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")


# ---------------------------------------------------------------------------
# immunize
# ---------------------------------------------------------------------------

@main.command()
@click.option("--input-dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--model-dir", required=True, type=click.Path(file_okay=False))
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--format", "container", type=click.Choice(["bmp", "png"]), default="bmp",
              show_default=True, help="Lossless container for the protected images.")
def immunize(input_dir, model_dir, out, container):
    """Embed recovery information into every image of a directory."""
    model_path = Path(model_dir) / "immunizer.pt"
    try:
        model, extra = load_model(model_path, "immunizer")
    except CheckpointError as err:
        raise _fatal(str(err))
    resolution = int(extra.get("resolution", 256))
    model_hash = file_digest(model_path)
    out = Path(out)
    entries = []
    for path in list_images(input_dir):
        try:
            image = fit_resolution(load_image(path), resolution)
        except Exception:
            log.warning("skipping unreadable image %s", path, exc_info=True)
            continue
        edge = canny_edge(image)
        with torch.no_grad():
            protected, _ = run_immunize(model, image, edge)
        protected = quantize_8bit(protected)
        dst = out / f"{path.stem}.{container}"
        edge_dst = out / f"{path.stem}_edge.png"
        save_image(protected, dst)
        save_mask(edge, edge_dst, binary=True)
        entries.append({"original": str(path), "immunized": dst.name,
                        "edge": edge_dst.name, "resolution": resolution,
                        "model_hash": model_hash})
        log.info("immunized %s -> %s", path.name, dst.name)
    with open(out / IMMUNIZE_MANIFEST, "w") as fh:
        json.dump({"version": 1, "entries": entries}, fh, indent=2)
    click.echo(f"immunized {len(entries)} images into {out}")


# ---------------------------------------------------------------------------
# attack
# ---------------------------------------------------------------------------

def _write_attacked(x_tmp, plan, out_stem):
    """Post-process and store one attacked image; returns (file, mask_geom).

    A JPEG post-processing IS the file encoding: the stored bytes are the
    compression of the tampered image, so no double compression occurs.
    """
    if plan.post_kind == "jpeg":
        dst = out_stem.with_suffix(".jpg")
        dst.parent.mkdir(parents=True, exist_ok=True)
        dst.write_bytes(jpeg_encode_bytes(x_tmp, plan.post_params["qf"]))
        return dst, None
    x_atk, geometry = postprocess(x_tmp, plan.post_kind, plan.post_params, jpeg_sim=None)
    dst = out_stem.with_suffix(".png")
    save_image(quantize_8bit(x_atk), dst)
    return dst, geometry


def _run_attack_entries(entries, out: Path, donors):
    manifest = []
    for entry in entries:
        src = Path(entry["source"])
        plan = AttackPlan.from_dict(entry["plan"])
        image = load_image(src)
        x_tmp, mask = tamper_from_plan(image, plan, donors=donors)
        stem = out / f"{src.stem}_atk"
        dst, geometry = _write_attacked(x_tmp, plan, stem)
        if geometry is not None:
            mask = geometry.apply(mask)
        mask_dst = out / f"{src.stem}_mask.png"
        save_mask(mask, mask_dst, binary=True)
        record = {
            "source": str(src),
            "original": entry.get("original", ""),
            "attacked": dst.name,
            "mask": mask_dst.name,
            "plan": plan.to_dict(),
            "tamper_rate": float(mask.mean()),
        }
        if geometry is not None:
            record["crop"] = asdict(geometry)
        manifest.append(record)
        log.info("attacked %s -> %s (%s + %s)", src.name, dst.name,
                 plan.tamper_kind, plan.post_kind)
    return manifest


@main.command()
@click.option("--immunized-dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--tamper", type=click.Choice([*TAMPER_KINDS, "random"]), default="random",
              show_default=True)
@click.option("--post", type=click.Choice([*POST_KINDS, "random"]), default="random",
              show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--donor-dir", type=click.Path(exists=True, file_okay=False),
              help="Clean images for splicing (defaults to the immunized inputs).")
@click.option("--replay", type=click.Path(exists=True, dir_okay=False),
              help="Reproduce attacks from an existing manifest; ignores the plan options.")
def attack(immunized_dir, out, tamper, post, seed, donor_dir, replay):
    """Tamper + post-process protected images; writes ground truth and a manifest."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    src_dir = Path(immunized_dir)

    sources = [p for p in list_images(src_dir) if not p.stem.endswith("_edge")]
    if not sources:
        raise _fatal(f"no images found in {immunized_dir}")
    originals = {}
    src_manifest = src_dir / IMMUNIZE_MANIFEST
    if src_manifest.exists():
        with open(src_manifest) as fh:
            for e in json.load(fh)["entries"]:
                originals[e["immunized"]] = e.get("original", "")

    if donor_dir:
        donor_paths = list_images(donor_dir)
        donors = [load_image(p) for p in donor_paths]
    else:
        donors = [load_image(p) for p in sources]
    if not donors:
        raise _fatal("splicing needs at least one donor image")

    if replay:
        with open(replay) as fh:
            prior = json.load(fh)["entries"]
        entries = [{"source": e["source"], "original": e.get("original", ""),
                    "plan": e["plan"]} for e in prior]
    else:
        entries = []
        for index, path in enumerate(sources):
            image_seed = int(np.random.SeedSequence([seed, index]).generate_state(1)[0])
            h, w = load_image(path).shape[-2:]
            if tamper == "random" and post == "random":
                plan = sample_attack_plan(h, w, image_seed, donor_count=len(donors))
            else:
                rng = np.random.default_rng(image_seed)
                t_kind = tamper if tamper != "random" else str(
                    rng.choice(["copy_move", "splicing", "inpainting"]))
                p_kind = post if post != "random" else str(rng.choice(POST_KINDS[:6]))
                t_params = {}
                if t_kind != "none":
                    t_params["target_rate"] = float(rng.uniform(0.05, 0.45))
                    if t_kind == "copy_move":
                        t_params["shift"] = [int(rng.integers(h // 8, h // 2)),
                                             int(rng.integers(w // 8, w // 2))]
                    elif t_kind == "splicing":
                        t_params["donor_id"] = int(rng.integers(0, len(donors)))
                plan = AttackPlan(t_kind, t_params, p_kind,
                                  sample_post_params(p_kind, h, w, rng), seed=image_seed)
            entries.append({"source": str(path),
                            "original": originals.get(path.name, ""),
                            "plan": plan.to_dict()})

    manifest = _run_attack_entries(entries, out, donors)
    with open(out / ATTACK_MANIFEST, "w") as fh:
        json.dump({"version": 1, "entries": manifest}, fh, indent=2)
    click.echo(f"attacked {len(manifest)} images into {out}")


# ---------------------------------------------------------------------------
# localize-recover
# ---------------------------------------------------------------------------

@main.command(name="localize-recover")
@click.option("--attacked-dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--model-dir", required=True, type=click.Path(file_okay=False))
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--threshold", type=float, default=None,
              help="Override the mask binarization threshold.")
def localize_recover(attacked_dir, model_dir, out, threshold):
    """Predict tamper masks and reconstruct the original content."""
    model_dir = Path(model_dir)
    try:
        inn, inn_extra = load_model(model_dir / "immunizer.pt", "immunizer")
        detector, det_extra = load_model(model_dir / "detector.pt", "detector")
    except CheckpointError as err:
        raise _fatal(str(err))
    model_hashes = {"immunizer": file_digest(model_dir / "immunizer.pt"),
                    "detector": file_digest(model_dir / "detector.pt")}
    resolution = int(inn_extra.get("resolution", 256))
    mask_params = _mask_params_from(det_extra, threshold)

    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    attacked_dir = Path(attacked_dir)
    manifest_path = attacked_dir / ATTACK_MANIFEST
    entries = None
    if manifest_path.exists():
        with open(manifest_path) as fh:
            entries = {e["attacked"]: e for e in json.load(fh)["entries"]}

    rows = []
    outputs = []
    for path in sorted(attacked_dir.iterdir()):
        if path.suffix.lower() not in (".png", ".bmp", ".jpg", ".jpeg"):
            continue
        if path.stem.endswith("_mask") or path.stem.endswith("_edge"):
            continue
        meta = entries.get(path.name) if entries else None
        x_atk = load_image(path)
        h, w = x_atk.shape[-2:]
        if h % 8 or w % 8:
            raise _fatal(f"{path.name}: dimensions {h}x{w} not divisible by 8")
        cropped = bool(meta and meta.get("crop"))
        if not cropped and (h, w) != (resolution, resolution):
            raise _fatal(f"{path.name}: resolution {h}x{w} does not match the "
                         f"model resolution {resolution}")
        with torch.no_grad():
            soft = detector(x_atk.unsqueeze(0))[0]
            pred = postprocess_mask(soft, mask_params)
            rect = x_atk * (1 - pred)
            recovered, _ = run_recover(inn, rect)
        recovered = quantize_8bit(recovered)
        mask_dst = out / f"{path.stem}_pred_mask.png"
        soft_dst = out / f"{path.stem}_soft_mask.png"
        rec_dst = out / f"{path.stem}_recovered.png"
        save_mask(pred, mask_dst, binary=True)
        save_mask(soft, soft_dst, binary=False)
        save_image(recovered, rec_dst)
        outputs.append({"attacked": path.name, "pred_mask": mask_dst.name,
                        "soft_mask": soft_dst.name, "recovered": rec_dst.name})
        log.info("localized + recovered %s", path.name)

        row = EvalRow(name=path.stem)
        if meta:
            plan = meta.get("plan", {})
            row.tamper_kind = plan.get("tamper_kind", "")
            row.post_kind = plan.get("post_kind", "")
            gt_path = attacked_dir / meta["mask"]
            if gt_path.exists():
                gt = load_mask(gt_path)
                row.f1 = f1_score(pred, gt)
                row.tamper_rate = float(gt.mean())
            original = meta.get("original", "")
            if original and Path(original).exists():
                ref = fit_resolution(load_image(original), resolution)
                if cropped:
                    c = meta["crop"]
                    ref = CropGeometry(**c).apply(ref)
                row.psnr_recovered = psnr(recovered, ref)
                row.ssim_recovered = ssim(recovered, ref)
                source = Path(meta.get("source", ""))
                if source.exists() and not cropped:
                    protected = load_image(source)
                    row.psnr_protected = psnr(protected, ref)
                    row.ssim_protected = ssim(protected, ref)
        rows.append(row)

    with open(out / "localize_manifest.json", "w") as fh:
        json.dump({"version": 1, "models": model_hashes, "entries": outputs},
                  fh, indent=2)
    if any(r.f1 is not None or r.psnr_recovered is not None for r in rows):
        artifacts = EvaluationReport(rows).write(out)
        click.echo("report: " + ", ".join(str(p) for p in artifacts.values()))
    click.echo(f"processed {len(outputs)} images into {out}")


def _mask_params_from(extra: dict, threshold_override):
    from .detectors import MaskPostprocessParams
    params = extra.get("mask_postprocess", {})
    kwargs = {k: params[k] for k in ("threshold", "erode_kernel", "dilate_kernel")
              if k in params}
    if threshold_override is not None:
        kwargs["threshold"] = threshold_override
    return MaskPostprocessParams(**kwargs)


# ---------------------------------------------------------------------------
# training commands
# ---------------------------------------------------------------------------

@main.command(name="train-kdjpeg")
@click.option("--config", "config_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(file_okay=False))
def train_kdjpeg_cmd(config_path, out):
    """Train the JPEG simulator (QF predictor, then teacher/student)."""
    cfg = load_config(config_path)
    if not cfg.data_dir:
        raise _fatal("config.data_dir is required")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    corpus = _load_corpus_cached(cfg.data_dir, cfg.resolution)
    if not corpus:
        raise _fatal(f"no readable images under {cfg.data_dir}")
    from .jpegsim import KDJpegTrainConfig
    kcfg = KDJpegTrainConfig(seed=cfg.seed, epsilon=cfg.hp.epsilon,
                             **asdict(cfg.kdjpeg))
    kd, history = train_kdjpeg(corpus, kcfg, log_fn=log.info)
    dst = out / "kdjpeg.pt"
    save_model(kd, dst, "kdjpeg",
               extra={"resolution": cfg.resolution, "config_hash": config_hash(cfg)})
    with open(out / "kdjpeg_history.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "predictor_accuracy", "teacher_loss", "student_loss"])
        n = max(len(v) for v in history.values())
        for i in range(n):
            writer.writerow([i] + [history[k][i] if i < len(history[k]) else ""
                                   for k in ("predictor_accuracy", "teacher_loss",
                                             "student_loss")])
    click.echo(f"saved {dst} (predictor accuracy "
               f"{history['predictor_accuracy'][-1]:.3f})")


@main.command()
@click.option("--config", "config_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--resume", is_flag=True, help="Continue from the latest checkpoint.")
def train(config_path, out, resume):
    """Run the two-stage pipeline training (needs a KD-JPEG checkpoint)."""
    cfg = load_config(config_path)
    if not cfg.kdjpeg_checkpoint:
        raise _fatal("config.kdjpeg_checkpoint is required: train the JPEG "
                     "simulator first (imshield train-kdjpeg)")
    try:
        kd, _ = load_model(cfg.kdjpeg_checkpoint, "kdjpeg")
    except CheckpointError as err:
        raise _fatal(f"cannot start without a usable KD-JPEG checkpoint: {err}")
    kd.requires_grad_(False)
    kd.eval()
    if not cfg.data_dir:
        raise _fatal("config.data_dir is required")
    images, _ = load_folder(cfg.data_dir, cfg.resolution)
    if not images:
        raise _fatal(f"no readable images under {cfg.data_dir}")

    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    digest = config_hash(cfg)
    trainer = PipelineTrainer(images, kd.student_simulator(), cfg.trainer_config(),
                              metrics_path=out / "metrics.csv")
    total = cfg.steps_stage1 + cfg.steps_stage2
    trainer.init_schedulers(total)
    ckpt_path = out / "trainer_checkpoint.pt"
    if resume:
        try:
            payload = load_trainer_state(ckpt_path, digest)
        except CheckpointError as err:
            raise _fatal(str(err))
        trainer.load_state_dict(payload["trainer"])
        log.info("resumed at step %d (stage %d)", trainer.step_count, trainer.stage)

    def checkpoint(tr, _bundle):
        if tr.step_count % cfg.checkpoint_every == 0:
            save_trainer(tr, ckpt_path, digest)

    stage1_left = max(0, cfg.steps_stage1 - trainer.step_count)
    if trainer.stage == 1 and stage1_left:
        log.info("stage 1: %d steps", stage1_left)
        # stage 1 may end early once the localization loss has converged
        trainer.train_stage1(stage1_left, allow_early_exit=True, callback=checkpoint)
    stage2_left = max(0, total - trainer.step_count)
    if stage2_left:
        log.info("stage 2: %d steps", stage2_left)
        trainer.train_stage2(stage2_left, callback=checkpoint)
    save_trainer(trainer, ckpt_path, digest)

    extra = {"resolution": cfg.resolution, "config_hash": digest,
             "mask_postprocess": asdict(cfg.mask_postprocess)}
    save_model(trainer.inn, out / "immunizer.pt", "immunizer", extra=extra)
    save_model(trainer.detector, out / "detector.pt", "detector", extra=extra)
    save_model(trainer.d_a, out / "patch_discriminator.pt", "patch_discriminator", extra=extra)
    save_model(trainer.d_b, out / "pixel_discriminator.pt", "pixel_discriminator", extra=extra)
    click.echo(f"trained {trainer.step_count} steps; models in {out}")


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------

@main.command()
@click.option("--manifest", "manifest_path", required=True,
              type=click.Path(exists=True, dir_okay=False),
              help="CSV with columns: name, original, immunized, attacked, "
                   "gt_mask, pred_mask, recovered, tamper_kind, post_kind.")
@click.option("--out", required=True, type=click.Path(file_okay=False))
def evaluate(manifest_path, out):
    """Aggregate metrics over evaluation pairs; writes tables and figures."""
    rows = []
    skipped = 0
    with open(manifest_path) as fh:
        for record in csv.DictReader(fh):
            name = record.get("name") or Path(record.get("original", "?")).stem
            row = EvalRow(name=name, tamper_kind=record.get("tamper_kind", ""),
                          post_kind=record.get("post_kind", ""))
            try:
                original = record.get("original", "")
                immunized = record.get("immunized", "")
                attacked_or_rec = record.get("recovered", "")
                gt_mask = record.get("gt_mask", "")
                pred_mask = record.get("pred_mask", "")
                if gt_mask and pred_mask:
                    gt = load_mask(gt_mask)
                    row.f1 = f1_score(load_mask(pred_mask), gt)
                    row.tamper_rate = float(gt.mean())
                if original and immunized:
                    ref = load_image(original)
                    prot = load_image(immunized)
                    row.psnr_protected = psnr(prot, ref)
                    row.ssim_protected = ssim(prot, ref)
                if original and attacked_or_rec:
                    ref = load_image(original)
                    rec = load_image(attacked_or_rec)
                    row.psnr_recovered = psnr(rec, ref)
                    row.ssim_recovered = ssim(rec, ref)
            except (OSError, ValueError) as err:
                skipped += 1
                log.warning("skipping incomplete pair %s: %s", name, err)
                continue
            if all(getattr(row, m) is None for m in
                   ("f1", "psnr_protected", "psnr_recovered")):
                skipped += 1
                log.warning("skipping pair %s: nothing to evaluate", name)
                continue
            rows.append(row)
    report = EvaluationReport(rows)
    artifacts = report.write(out)
    overall = report.overall()
    click.echo(f"evaluated {len(rows)} pairs ({skipped} skipped)")
    for metric in ("f1", "psnr_recovered", "ssim_recovered", "psnr_protected"):
        if overall.get(metric) is not None:
            click.echo(f"  {metric}: {overall[metric]:.4f}")
    click.echo("artifacts: " + ", ".join(str(p) for p in artifacts.values()))


@main.command(name="example-config")
def example_config():
    """Print a fully annotated configuration file."""
    click.echo(EXAMPLE_CONFIG, nl=False)


if __name__ == "__main__":
    main()
