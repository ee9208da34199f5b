"""Forgery detector, deterministic mask post-processing, and the two
adversarial discriminators."""

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .blocks import UShapedNet, warmup_spectral_norm
from .imaging import haar_upsample
from .imaging import ShapeError


class ForgeryDetector(nn.Module):
    """Predicts a soft tamper mask in [0, 1] from a 3-channel attacked image.

    Same U-shaped backbone as the JPEG simulator generators, without the
    quality-conditioning MLP. The mask head taps the decoder feature at H/2
    (four logit sub-bands, Haar-upsampled to one sigmoid channel at input
    resolution): the 3-channel image-domain output cannot carry enough mask
    evidence.
    """

    def __init__(self, base: int = 32):
        super().__init__()
        self.base = base
        self.backbone = UShapedNet(base=base)
        self.head = nn.Conv2d(base, 4, 1)

    def arch_meta(self) -> dict:
        return {"base": self.base}

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-3] != 3:
            raise ShapeError(f"detector expects 3-channel input, got {x.shape[-3]}")
        _, _, d0 = self.backbone.features_and_output(x)
        return torch.sigmoid(haar_upsample(self.head(d0)))


class PixelDiscriminator(nn.Module):
    """Pixel-wise real/fake discriminator (U-shaped), probabilities per pixel."""

    def __init__(self, base: int = 32):
        super().__init__()
        self.base = base
        self.backbone = UShapedNet(base=base)
        self.head = nn.Conv2d(base, 4, 1)

    def arch_meta(self) -> dict:
        return {"base": self.base}

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _, _, d0 = self.backbone.features_and_output(x)
        return torch.sigmoid(haar_upsample(self.head(d0)))


class PatchDiscriminator(nn.Module):
    """70x70-receptive-field patch discriminator, probabilities per patch.

    Deliberately weaker than the pixel-wise discriminator (patch-level output,
    fewer parameters at the default widths): a too-strict critic on the
    protected image leaves no room for information embedding.
    """

    def __init__(self, ndf: int = 16):
        super().__init__()
        self.ndf = ndf

        def block(cin, cout, stride):
            conv = nn.Conv2d(cin, cout, 4, stride=stride, padding=1)
            return [nn.utils.spectral_norm(conv), nn.LeakyReLU(0.2)]

        layers = block(3, ndf, 2) + block(ndf, 2 * ndf, 2) + block(2 * ndf, 4 * ndf, 2)
        layers += block(4 * ndf, 8 * ndf, 1)
        layers.append(nn.Conv2d(8 * ndf, 1, 4, stride=1, padding=1))
        self.body = nn.Sequential(*layers)
        warmup_spectral_norm(self, torch.zeros(1, 3, 32, 32))

    def arch_meta(self) -> dict:
        return {"ndf": self.ndf}

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.body(x))


# ---------------------------------------------------------------------------
# Mask post-processing (inference-side, deterministic)
# ---------------------------------------------------------------------------

@dataclass
class MaskPostprocessParams:
    threshold: float = 0.2
    erode_kernel: int = 8
    dilate_kernel: int = 16

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise ValueError(f"threshold must be in (0, 1); got {self.threshold}")
        if self.erode_kernel < 1 or self.dilate_kernel < 1:
            raise ValueError("morphology kernels must be positive")


def _window_filter(mask: np.ndarray, k: int, reduce_fn) -> np.ndarray:
    # Square structuring element; for even k the window for output pixel i
    # covers offsets [-k//2, k - k//2 - 1]. Borders are zero-padded.
    before = k // 2
    after = k - before - 1
    padded = np.pad(mask, ((before, after), (before, after)), constant_values=0)
    windows = np.lib.stride_tricks.sliding_window_view(padded, (k, k))
    return reduce_fn(windows, axis=(-1, -2))


def erode(mask: torch.Tensor, k: int) -> torch.Tensor:
    """Binary erosion with a k x k square element, zero padding at borders."""
    arr = mask.detach().squeeze(0).cpu().numpy() > 0.5
    out = _window_filter(arr, k, np.min)
    return torch.from_numpy(out.astype(np.float32)).unsqueeze(0)


def dilate(mask: torch.Tensor, k: int) -> torch.Tensor:
    """Binary dilation with a k x k square element, zero padding at borders."""
    arr = mask.detach().squeeze(0).cpu().numpy() > 0.5
    out = _window_filter(arr, k, np.max)
    return torch.from_numpy(out.astype(np.float32)).unsqueeze(0)


def binarize(soft: torch.Tensor, threshold: float) -> torch.Tensor:
    return (soft >= threshold).to(soft.dtype)


def postprocess_mask(soft: torch.Tensor,
                     params: MaskPostprocessParams = MaskPostprocessParams()) -> torch.Tensor:
    """Binarize a soft mask, erode away isolated noise, dilate to full coverage."""
    hard = binarize(soft.detach(), params.threshold)
    hard = erode(hard, params.erode_kernel)
    return dilate(hard, params.dilate_kernel)


def postprocess_mask_ste(soft: torch.Tensor,
                         params: MaskPostprocessParams = MaskPostprocessParams()) -> torch.Tensor:
    """Post-processed mask whose gradient passes straight through to ``soft``.

    Used in joint training, where the rectification consumes the binary mask
    but the detector still learns through its soft prediction.
    """
    if soft.dim() == 3:
        hard = postprocess_mask(soft, params)
    else:
        hard = torch.stack([postprocess_mask(item, params) for item in soft])
    return soft + (hard.to(soft.dtype) - soft).detach()


def rectify(x_atk: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Zero out the predicted-tampered pixels: the input to recovery."""
    if mask.shape[-2:] != x_atk.shape[-2:]:
        raise ShapeError(
            f"mask {tuple(mask.shape)} does not match image {tuple(x_atk.shape)}")
    return x_atk * (1 - mask)
