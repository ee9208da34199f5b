"""Versioned model persistence.

A checkpoint file carries a format version, the model kind, its architecture
metadata, and the parameter arrays. Loading rebuilds the network from the
metadata and fails loudly when the stored architecture does not match.
"""

import hashlib
from pathlib import Path

import torch

CHECKPOINT_FORMAT = 1


class CheckpointError(RuntimeError):
    pass


def _builders():
    from .detectors import ForgeryDetector, PatchDiscriminator, PixelDiscriminator
    from .inn import ImmunizerINN
    from .jpegsim import KDJpeg
    return {
        "immunizer": lambda arch: ImmunizerINN(
            levels=arch["levels"], couplings_per_level=arch["couplings_per_level"],
            hidden=arch["hidden"], clamp=arch["clamp"]),
        "detector": lambda arch: ForgeryDetector(base=arch["base"]),
        "patch_discriminator": lambda arch: PatchDiscriminator(ndf=arch["ndf"]),
        "pixel_discriminator": lambda arch: PixelDiscriminator(base=arch["base"]),
        "kdjpeg": lambda arch: KDJpeg(base=arch["base"],
                                      predictor_width=arch["predictor_width"]),
    }


def save_model(model, path, kind: str, extra: dict | None = None) -> None:
    """Write a model checkpoint with its architecture metadata."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "kind": kind,
        "arch": model.arch_meta(),
        "state": model.state_dict(),
        "extra": dict(extra or {}),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_model(path, kind: str):
    """Rebuild a model from a checkpoint; returns (model, extra metadata).

    Raises :class:`CheckpointError` on a missing file, wrong kind, unknown
    format, or parameter arrays inconsistent with the stored architecture.
    """
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"unsupported checkpoint format {payload.get('format')!r}")
    if payload.get("kind") != kind:
        raise CheckpointError(f"expected a {kind!r} checkpoint, found {payload.get('kind')!r}")
    model = _builders()[kind](payload["arch"])
    if model.arch_meta() != payload["arch"]:
        raise CheckpointError("architecture metadata mismatch after rebuild")
    try:
        model.load_state_dict(payload["state"])
    except RuntimeError as err:
        raise CheckpointError(f"parameter arrays do not fit the architecture: {err}") from err
    model.eval()
    return model, payload.get("extra", {})


def save_trainer(trainer, path, config_hash: str, extra: dict | None = None) -> None:
    """Write a resumable training checkpoint (models + optimizers + step)."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "kind": "trainer",
        "config_hash": config_hash,
        "trainer": trainer.state_dict(),
        "extra": dict(extra or {}),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_trainer_state(path, config_hash: str) -> dict:
    """Read a trainer checkpoint, refusing to resume under a changed config."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("kind") != "trainer":
        raise CheckpointError(f"expected a trainer checkpoint, found {payload.get('kind')!r}")
    if payload.get("config_hash") != config_hash:
        raise CheckpointError(
            "config hash mismatch: this checkpoint was written under a different "
            f"configuration ({payload.get('config_hash')} != {config_hash})")
    return payload


def file_digest(path) -> str:
    """Short content hash used to pin checkpoints inside manifests."""
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()[:16]
