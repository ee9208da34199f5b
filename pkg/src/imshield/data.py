"""Dataset ingestion: image folders resized to the model resolution."""

import logging
from pathlib import Path

import torch
import torch.nn.functional as F

from .imaging import IMAGE_EXTENSIONS, load_image

log = logging.getLogger(__name__)


def list_images(directory) -> list:
    """Sorted image paths under a directory (non-recursive)."""
    root = Path(directory)
    if not root.is_dir():
        raise NotADirectoryError(f"not a directory: {directory}")
    return sorted(p for p in root.iterdir()
                  if p.suffix.lower() in IMAGE_EXTENSIONS)


def fit_resolution(image: torch.Tensor, resolution: int) -> torch.Tensor:
    """Resize the shorter side to ``resolution`` and center-crop square."""
    _, h, w = image.shape
    scale = resolution / min(h, w)
    nh, nw = max(resolution, round(h * scale)), max(resolution, round(w * scale))
    resized = F.interpolate(image.unsqueeze(0), size=(nh, nw), mode="bilinear",
                            antialias=scale < 1.0, align_corners=False).squeeze(0)
    top = (nh - resolution) // 2
    left = (nw - resolution) // 2
    return resized[:, top:top + resolution, left:left + resolution].contiguous()


def load_folder(directory, resolution: int, limit: int | None = None):
    """Load a folder of images at the model resolution; returns (tensors, paths).

    Unreadable files are skipped with a logged warning.
    """
    tensors, kept = [], []
    for path in list_images(directory)[:limit]:
        try:
            tensors.append(fit_resolution(load_image(path), resolution))
            kept.append(path)
        except Exception:
            log.warning("skipping unreadable image %s", path, exc_info=True)
    return tensors, kept
