"""Core image math: Haar transforms, 8-bit quantization, edge maps, metrics, I/O.

All image tensors are float32, channel-first (C, H, W) or batched (B, C, H, W),
with values in [0, 1]. Masks and edge maps are single-channel in the same layout.
"""

import math
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from scipy import ndimage

PSNR_CAP_DB = 99.0

# Rec. 601 luma weights, used for SSIM and Canny.
_LUMA = (0.299, 0.587, 0.114)


class ShapeError(ValueError):
    """Input violates a documented shape/divisibility precondition."""


def to_luminance(image: torch.Tensor) -> torch.Tensor:
    """Collapse a (..., 3, H, W) image to a (..., 1, H, W) luma channel."""
    if image.shape[-3] != 3:
        raise ShapeError(f"expected 3 channels, got {image.shape[-3]}")
    w = image.new_tensor(_LUMA).view(3, 1, 1)
    return (image * w).sum(dim=-3, keepdim=True)


# ---------------------------------------------------------------------------
# Orthonormal Haar transform
# ---------------------------------------------------------------------------

def haar_downsample(x: torch.Tensor) -> torch.Tensor:
    """One level of the orthonormal 2x2 Haar analysis transform.

    Maps (..., C, H, W) to (..., 4C, H/2, W/2). Output channels are stacked
    sub-band-major: all LL channels first, then LH, HL, HH. Each 2x2 block
    [[a, b], [c, d]] produces

        LL = (a + b + c + d) / 2      LH = (a - b + c - d) / 2
        HL = (a + b - c - d) / 2      HH = (a - b - c + d) / 2

    which is an isometry (a constant image c maps to LL = 2c, rest zero).
    """
    h, w = x.shape[-2], x.shape[-1]
    if h % 2 or w % 2:
        raise ShapeError(f"haar_downsample needs even H, W; got {h}x{w}")
    a = x[..., 0::2, 0::2]
    b = x[..., 0::2, 1::2]
    c = x[..., 1::2, 0::2]
    d = x[..., 1::2, 1::2]
    ll = (a + b + c + d) * 0.5
    lh = (a - b + c - d) * 0.5
    hl = (a + b - c - d) * 0.5
    hh = (a - b - c + d) * 0.5
    return torch.cat([ll, lh, hl, hh], dim=-3)


def haar_upsample(x: torch.Tensor) -> torch.Tensor:
    """Exact inverse of :func:`haar_downsample`: (..., 4C, h, w) -> (..., C, 2h, 2w)."""
    c4 = x.shape[-3]
    if c4 % 4:
        raise ShapeError(f"haar_upsample needs channels divisible by 4; got {c4}")
    c = c4 // 4
    ll, lh, hl, hh = x[..., 0:c, :, :], x[..., c:2 * c, :, :], x[..., 2 * c:3 * c, :, :], x[..., 3 * c:, :, :]
    a = (ll + lh + hl + hh) * 0.5
    b = (ll - lh + hl - hh) * 0.5
    cc = (ll + lh - hl - hh) * 0.5
    d = (ll - lh - hl + hh) * 0.5
    out_shape = x.shape[:-3] + (c, x.shape[-2] * 2, x.shape[-1] * 2)
    out = x.new_empty(out_shape)
    out[..., 0::2, 0::2] = a
    out[..., 0::2, 1::2] = b
    out[..., 1::2, 0::2] = cc
    out[..., 1::2, 1::2] = d
    return out


# ---------------------------------------------------------------------------
# Differentiable 8-bit quantization
# ---------------------------------------------------------------------------

class _Quantize8Bit(torch.autograd.Function):
    # Forward: snap to the 1/255 grid. Backward: identity (straight-through).

    @staticmethod
    def forward(ctx, x):
        # floor(x*255 + 0.5) is round-half-away-from-zero for non-negative x,
        # avoiding torch.round's half-to-even behaviour.
        return torch.floor(x * 255.0 + 0.5) / 255.0

    @staticmethod
    def backward(ctx, grad_output):
        return grad_output


def quantize_8bit(x: torch.Tensor) -> torch.Tensor:
    """Simulate 8-bit storage: clamp to [0, 1], round to the 1/255 grid.

    The rounding is round-half-away-from-zero; the gradient is passed through
    unchanged so quantization can sit inside a trained pipeline.
    """
    return _Quantize8Bit.apply(x.clamp(0.0, 1.0))


# ---------------------------------------------------------------------------
# Canny edge detection
# ---------------------------------------------------------------------------

def canny_edge(image: torch.Tensor, sigma: float = 1.0,
               low: float = 0.1, high: float = 0.2) -> torch.Tensor:
    """Binary edge map of a 3-channel image via Canny on the luma channel.

    Hysteresis thresholds are ``low``/``high`` fractions of the maximum
    smoothed gradient magnitude. Returns a {0, 1} float tensor (1, H, W).
    """
    if image.dim() != 3 or image.shape[0] != 3:
        raise ShapeError(f"canny_edge expects (3, H, W); got {tuple(image.shape)}")
    gray = to_luminance(image)[0].detach().cpu().numpy().astype(np.float64)

    smoothed = ndimage.gaussian_filter(gray, sigma=sigma, mode="nearest")
    gy = ndimage.sobel(smoothed, axis=0, mode="nearest")
    gx = ndimage.sobel(smoothed, axis=1, mode="nearest")
    mag = np.hypot(gx, gy)
    peak = mag.max()
    if peak <= 0.0:
        return torch.zeros(1, *gray.shape, dtype=torch.float32)

    keep = _nonmax_suppress(mag, gx, gy)
    strong = keep & (mag >= high * peak)
    weak = keep & (mag >= low * peak)
    edges = ndimage.binary_propagation(strong, mask=weak, structure=np.ones((3, 3)))
    return torch.from_numpy(edges.astype(np.float32)).unsqueeze(0)


def _nonmax_suppress(mag: np.ndarray, gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    # Keep pixels that are local maxima along the (4-way quantized) gradient
    # direction. Neighbours outside the image count as zero magnitude.
    padded = np.pad(mag, 1, mode="constant")
    angle = np.mod(np.arctan2(gy, gx), np.pi)

    h, w = mag.shape
    center = padded[1:h + 1, 1:w + 1]
    east = padded[1:h + 1, 2:]
    west = padded[1:h + 1, :w]
    south = padded[2:, 1:w + 1]
    north = padded[:h, 1:w + 1]
    se = padded[2:, 2:]
    nw = padded[:h, :w]
    sw = padded[2:, :w]
    ne = padded[:h, 2:]

    bins = np.digitize(angle, [np.pi / 8, 3 * np.pi / 8, 5 * np.pi / 8, 7 * np.pi / 8])
    bins = np.mod(bins, 4)  # 0: horizontal grad, 1: diag, 2: vertical grad, 3: anti-diag
    n1 = np.choose(bins, [east, se, south, sw])
    n2 = np.choose(bins, [west, nw, north, ne])
    return (center >= n1) & (center >= n2)


# ---------------------------------------------------------------------------
# Quality metrics
# ---------------------------------------------------------------------------

def psnr(a: torch.Tensor, b: torch.Tensor) -> float:
    """Peak signal-to-noise ratio in dB on the 0-255 scale, capped at 99 dB."""
    if a.shape != b.shape:
        raise ShapeError(f"psnr shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    diff = (a.double() - b.double()) * 255.0
    mse = float((diff * diff).mean())
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(20.0 * math.log10(255.0 / math.sqrt(mse)), PSNR_CAP_DB)


_SSIM_WIN = 11
_SSIM_SIGMA = 1.5


def _ssim_window() -> np.ndarray:
    r = _SSIM_WIN // 2
    g = np.exp(-0.5 * (np.arange(-r, r + 1) / _SSIM_SIGMA) ** 2)
    return g / g.sum()


def ssim(a: torch.Tensor, b: torch.Tensor) -> float:
    """Mean local SSIM over the luma channel (11x11 Gaussian window, K1=0.01, K2=0.03)."""
    if a.shape != b.shape:
        raise ShapeError(f"ssim shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.shape[-1] < _SSIM_WIN or a.shape[-2] < _SSIM_WIN:
        raise ShapeError(f"ssim needs images at least {_SSIM_WIN}x{_SSIM_WIN}")
    xa = a if a.shape[-3] == 1 else to_luminance(a)
    xb = b if b.shape[-3] == 1 else to_luminance(b)
    x = xa.squeeze(-3).detach().cpu().numpy().astype(np.float64)
    y = xb.squeeze(-3).detach().cpu().numpy().astype(np.float64)

    win = _ssim_window()

    def filt(img):
        out = ndimage.correlate1d(img, win, axis=-2, mode="reflect")
        return ndimage.correlate1d(out, win, axis=-1, mode="reflect")

    c1 = 0.01 ** 2
    c2 = 0.03 ** 2
    mu_x = filt(x)
    mu_y = filt(y)
    sxx = filt(x * x) - mu_x * mu_x
    syy = filt(y * y) - mu_y * mu_y
    sxy = filt(x * y) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (sxx + syy + c2)
    ssim_map = num / den
    # Drop the window radius at the borders where the filter sees padding.
    r = _SSIM_WIN // 2
    return float(ssim_map[..., r:-r, r:-r].mean())


def f1_score(pred: torch.Tensor, gt: torch.Tensor) -> float:
    """Pixel F1 of a predicted binary mask against the ground-truth binary mask.

    Degenerate cases: both masks empty -> 1.0 (correct no-alarm); exactly one
    empty -> 0.0.
    """
    if pred.shape != gt.shape:
        raise ShapeError(f"f1_score shape mismatch: {tuple(pred.shape)} vs {tuple(gt.shape)}")
    for name, m in (("pred", pred), ("gt", gt)):
        vals = torch.unique(m)
        if not bool(((vals == 0) | (vals == 1)).all()):
            raise ValueError(f"f1_score: {name} mask is not binary")
    p = pred.double()
    g = gt.double()
    tp = float((p * g).sum())
    fp = float((p * (1 - g)).sum())
    fn = float(((1 - p) * g).sum())
    if tp + fp + fn == 0.0:
        return 1.0
    if tp == 0.0:
        return 0.0
    return 2.0 * tp / (2.0 * tp + fp + fn)


# ---------------------------------------------------------------------------
# Image and mask I/O
# ---------------------------------------------------------------------------

LOSSLESS_EXTENSIONS = (".png", ".bmp")
IMAGE_EXTENSIONS = LOSSLESS_EXTENSIONS + (".jpg", ".jpeg")


def load_image(path) -> torch.Tensor:
    """Read an image file as a float32 (3, H, W) tensor in [0, 1]."""
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def save_image(image: torch.Tensor, path) -> None:
    """Write a (3, H, W) [0, 1] tensor as PNG/BMP (by extension)."""
    arr = image.detach().clamp(0, 1).mul(255.0).add(0.5).floor().to(torch.uint8)
    arr = arr.permute(1, 2, 0).cpu().numpy()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, mode="RGB").save(path)


def save_mask(mask: torch.Tensor, path, binary: bool = True) -> None:
    """Write a (1, H, W) mask: 1-bit PNG if binary, 8-bit grayscale otherwise."""
    arr = mask.detach().clamp(0, 1).squeeze(0).cpu().numpy()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    if binary:
        Image.fromarray(arr > 0.5).save(path, bits=1)
    else:
        Image.fromarray((arr * 255.0 + 0.5).astype(np.uint8), mode="L").save(path)


def load_mask(path, binary: bool = True) -> torch.Tensor:
    """Read a mask file as a float32 (1, H, W) tensor."""
    with Image.open(path) as img:
        arr = np.asarray(img.convert("L"), dtype=np.float32) / 255.0
    if binary:
        arr = (arr > 0.5).astype(np.float32)
    return torch.from_numpy(arr).unsqueeze(0)
