"""Attack simulation: malicious tampering plus benign post-processing.

Everything here is deterministic given explicit parameters and seeds, so an
attack can be replayed bit-exactly from its recorded plan. Post-processing
stays differentiable with respect to the input image (straight-through
gradients where the forward operation is inherently discrete).
"""

import logging
import math
from dataclasses import dataclass, field, asdict

import numpy as np
import torch
import torch.nn.functional as F

from .imaging import ShapeError, quantize_8bit

log = logging.getLogger(__name__)

TAMPER_KINDS = ("copy_move", "splicing", "inpainting", "none")
POST_KINDS = ("awgn", "gaussian_blur", "median_blur", "rescale", "jpeg",
              "crop", "dropout", "identity")
# The six post-processing kinds applied to every batch item during training.
TRAINING_POST_KINDS = ("awgn", "gaussian_blur", "median_blur", "rescale", "jpeg", "crop")

JPEG_ATTACK_QUALITIES = (10, 30, 50, 70, 90)


class MaskRateError(RuntimeError):
    """Free-form mask generation could not hit the requested coverage."""


# ---------------------------------------------------------------------------
# Free-form tamper masks (random brush strokes + optional rectangles)
# ---------------------------------------------------------------------------

@dataclass
class MaskSpec:
    """Parameters of the free-form stroke mask generator.

    ``target_rate`` is the requested fraction of tampered pixels in [0, 0.5];
    the generated mask lands within +-0.05 of it (regenerated otherwise).
    """

    target_rate: float = 0.2
    max_strokes: int = 8
    vertex_range: tuple = (4, 10)
    brush_width_range: tuple = (0.04, 0.1)   # relative to min(H, W)
    rect_probability: float = 0.3
    rate_tolerance: float = 0.05
    max_attempts: int = 20

    def __post_init__(self):
        if not 0.0 <= self.target_rate <= 0.5:
            raise ValueError(f"target_rate must be in [0, 0.5]; got {self.target_rate}")


def _stamp_disk(canvas: np.ndarray, cy: float, cx: float, radius: float) -> None:
    h, w = canvas.shape
    y0, y1 = max(0, int(cy - radius)), min(h, int(cy + radius) + 2)
    x0, x1 = max(0, int(cx - radius)), min(w, int(cx + radius) + 2)
    if y0 >= y1 or x0 >= x1:
        return
    yy, xx = np.mgrid[y0:y1, x0:x1]
    canvas[y0:y1, x0:x1] |= (yy - cy) ** 2 + (xx - cx) ** 2 <= radius ** 2


def _draw_stroke(canvas: np.ndarray, rng: np.random.Generator, spec: MaskSpec) -> None:
    h, w = canvas.shape
    scale = min(h, w)
    if rng.random() < spec.rect_probability:
        rh = int(rng.uniform(0.08, 0.25) * h)
        rw = int(rng.uniform(0.08, 0.25) * w)
        top = rng.integers(0, max(1, h - rh))
        left = rng.integers(0, max(1, w - rw))
        canvas[top:top + rh, left:left + rw] = True
        return
    n_vertices = int(rng.integers(spec.vertex_range[0], spec.vertex_range[1] + 1))
    radius = rng.uniform(*spec.brush_width_range) * scale / 2.0
    cy, cx = rng.uniform(0, h), rng.uniform(0, w)
    _stamp_disk(canvas, cy, cx, radius)
    for _ in range(n_vertices):
        angle = rng.uniform(0, 2 * math.pi)
        length = rng.uniform(0.05, 0.2) * scale
        ny = float(np.clip(cy + length * math.sin(angle), 0, h - 1))
        nx = float(np.clip(cx + length * math.cos(angle), 0, w - 1))
        steps = max(2, int(math.hypot(ny - cy, nx - cx)))
        for t in np.linspace(0.0, 1.0, steps):
            _stamp_disk(canvas, cy + t * (ny - cy), cx + t * (nx - cx), radius)
        cy, cx = ny, nx


def generate_freeform_mask(h: int, w: int, spec: MaskSpec, seed: int) -> torch.Tensor:
    """Random brush-stroke tamper mask of shape (1, h, w), values in {0, 1}.

    Deterministic for a given (h, w, spec, seed). Strokes accumulate until the
    coverage enters the tolerance window around ``spec.target_rate``; attempts
    that overshoot are discarded and retried with a derived seed.
    """
    if spec.target_rate == 0.0:
        return torch.zeros(1, h, w)
    lo = max(0.0, spec.target_rate - spec.rate_tolerance)
    hi = min(0.5, spec.target_rate + spec.rate_tolerance)
    for attempt in range(spec.max_attempts):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), attempt]))
        canvas = np.zeros((h, w), dtype=bool)
        for _ in range(spec.max_strokes * 4):
            _draw_stroke(canvas, rng, spec)
            rate = canvas.mean()
            if rate >= lo:
                break
        if lo <= canvas.mean() <= hi:
            return torch.from_numpy(canvas.astype(np.float32)).unsqueeze(0)
    raise MaskRateError(
        f"could not reach coverage {spec.target_rate}+-{spec.rate_tolerance} "
        f"on a {h}x{w} mask after {spec.max_attempts} attempts")


# ---------------------------------------------------------------------------
# Tampering
# ---------------------------------------------------------------------------

def tamper_copy_move(x: torch.Tensor, mask: torch.Tensor, shift) -> torch.Tensor:
    """Replace masked pixels with a spatially shifted copy of the image itself.

    ``shift`` is (dy, dx); the shift wraps toroidally so the source region is
    always in bounds: output[i, j] == x[i - dy, j - dx] inside the mask.
    """
    dy, dx = int(shift[0]), int(shift[1])
    donor = torch.roll(x, shifts=(dy, dx), dims=(-2, -1))
    return x * (1 - mask) + donor * mask


def tamper_splice(x: torch.Tensor, mask: torch.Tensor, donor: torch.Tensor) -> torch.Tensor:
    """Replace masked pixels with the matching pixels of a donor image."""
    if donor.shape != x.shape:
        raise ShapeError(f"donor shape {tuple(donor.shape)} != image shape {tuple(x.shape)}")
    return x * (1 - mask) + donor * mask


# Inpainting providers fill (image_with_hole, mask) -> full image; the masked
# region of the input is zeroed.
_INPAINT_PROVIDERS: dict = {}


def register_inpaint_provider(name: str, fn) -> None:
    _INPAINT_PROVIDERS[name] = fn


def get_inpaint_provider(name: str):
    try:
        return _INPAINT_PROVIDERS[name]
    except KeyError:
        raise KeyError(f"no inpaint provider registered under {name!r}; "
                       f"known: {sorted(_INPAINT_PROVIDERS)}") from None


@torch.no_grad()
def diffusion_fill(image_with_hole: torch.Tensor, mask: torch.Tensor,
                   iterations: int = 60) -> torch.Tensor:
    """Built-in inpainting surrogate: iterative diffusion from the hole boundary.

    Repeatedly replaces masked pixels by their 3x3 neighbourhood average while
    keeping unmasked pixels fixed; a constant image is a fixed point. Like an
    external inpainting model, the fill carries no gradient; the compositing
    in :func:`tamper_inpaint` keeps the gradient of the unmasked pixels.
    """
    kernel = image_with_hole.new_ones(1, 1, 3, 3) / 9.0
    x = image_with_hole.detach().clone()
    c = x.shape[-3]
    k = kernel.expand(c, 1, 3, 3)
    m = mask if mask.dim() == x.dim() else mask.expand_as(x[..., :1, :, :])
    batched = x.dim() == 4
    xb = x if batched else x.unsqueeze(0)
    mb = (m if batched else m.unsqueeze(0)).expand_as(xb)
    # seed the hole with the unmasked mean so a constant image is an exact
    # fixed point and general fills converge quickly
    keep = 1 - mb
    denom = keep.sum(dim=(-1, -2), keepdim=True).clamp(min=1.0)
    mean = (xb * keep).sum(dim=(-1, -2), keepdim=True) / denom
    xb = xb * keep + mean * mb
    for _ in range(iterations):
        smoothed = F.conv2d(F.pad(xb, (1, 1, 1, 1), mode="replicate"), k, groups=c)
        xb = xb * keep + smoothed * mb
    return xb if batched else xb.squeeze(0)


register_inpaint_provider("diffusion", diffusion_fill)


def tamper_inpaint(x: torch.Tensor, mask: torch.Tensor, provider=None) -> torch.Tensor:
    """Replace masked pixels with generated content from an inpainting provider.

    ``provider`` may be a callable or a registered provider name; on provider
    failure the built-in diffusion surrogate takes over with a logged warning.
    """
    hole = x * (1 - mask)
    fn = provider if callable(provider) else get_inpaint_provider(provider or "diffusion")
    try:
        filled = fn(hole, mask)
    except Exception:  # provider contract: any failure falls back
        log.warning("inpaint provider %r failed; falling back to diffusion surrogate",
                    provider, exc_info=True)
        filled = diffusion_fill(hole, mask)
    return x * (1 - mask) + filled * mask


# ---------------------------------------------------------------------------
# Benign post-processing
# ---------------------------------------------------------------------------

def _gaussian_kernel1d(sigma: float, dtype, device):
    radius = max(1, int(math.ceil(3.0 * sigma)))
    t = torch.arange(-radius, radius + 1, dtype=dtype, device=device)
    k = torch.exp(-0.5 * (t / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(x: torch.Tensor, sigma: float) -> torch.Tensor:
    """Separable Gaussian blur with reflect padding (unit-sum kernel)."""
    k = _gaussian_kernel1d(sigma, x.dtype, x.device)
    r = (k.numel() - 1) // 2
    batched = x.dim() == 4
    xb = x if batched else x.unsqueeze(0)
    c = xb.shape[1]
    kh = k.view(1, 1, 1, -1).expand(c, 1, 1, -1)
    kv = k.view(1, 1, -1, 1).expand(c, 1, -1, 1)
    xb = F.conv2d(F.pad(xb, (r, r, 0, 0), mode="reflect"), kh, groups=c)
    xb = F.conv2d(F.pad(xb, (0, 0, r, r), mode="reflect"), kv, groups=c)
    return xb if batched else xb.squeeze(0)


def median_blur(x: torch.Tensor, kernel: int = 3) -> torch.Tensor:
    """Median filter with a straight-through gradient (backward is identity)."""
    r = kernel // 2
    batched = x.dim() == 4
    xb = x if batched else x.unsqueeze(0)
    padded = F.pad(xb, (r, r, r, r), mode="reflect")
    patches = padded.unfold(2, kernel, 1).unfold(3, kernel, 1)
    med = patches.reshape(*patches.shape[:4], -1).median(dim=-1).values
    med = med if batched else med.squeeze(0)
    return x + (med - x).detach()


def rescale(x: torch.Tensor, factor: float) -> torch.Tensor:
    """Resize by ``factor`` (bilinear, antialiased when shrinking), then back."""
    batched = x.dim() == 4
    xb = x if batched else x.unsqueeze(0)
    h, w = xb.shape[-2], xb.shape[-1]
    nh, nw = max(1, round(h * factor)), max(1, round(w * factor))
    down = F.interpolate(xb, size=(nh, nw), mode="bilinear",
                         antialias=factor < 1.0, align_corners=False)
    back = F.interpolate(down, size=(h, w), mode="bilinear",
                         antialias=factor > 1.0, align_corners=False)
    return back if batched else back.squeeze(0)


def awgn(x: torch.Tensor, sigma: float, seed: int) -> torch.Tensor:
    g = torch.Generator().manual_seed(int(seed))
    noise = torch.randn(x.shape, generator=g, dtype=x.dtype)
    return x + sigma * noise


def pixel_dropout(x: torch.Tensor, rate: float, seed: int) -> torch.Tensor:
    """Zero a random fraction of pixels (all channels of a pixel together)."""
    g = torch.Generator().manual_seed(int(seed))
    keep = (torch.rand(*x.shape[:-3], 1, *x.shape[-2:], generator=g) >= rate).to(x.dtype)
    return x * keep


@dataclass(frozen=True)
class CropGeometry:
    top: int
    left: int
    height: int
    width: int

    def apply(self, x: torch.Tensor) -> torch.Tensor:
        return x[..., self.top:self.top + self.height, self.left:self.left + self.width]


def crop(x: torch.Tensor, geometry: CropGeometry) -> torch.Tensor:
    return geometry.apply(x)


def sample_crop_geometry(h: int, w: int, rng: np.random.Generator,
                         min_area: float = 0.5, multiple: int = 8) -> CropGeometry:
    """Random crop window retaining at least ``min_area`` of the image.

    Output side lengths snap to ``multiple`` so downstream networks keep their
    divisibility preconditions on the cropped plane.
    """
    side = math.sqrt(rng.uniform(min_area, 1.0))
    # snap UP to the divisibility multiple so the retained area stays >= min_area
    ch = min(h, math.ceil(h * side / multiple) * multiple)
    cw = min(w, math.ceil(w * side / multiple) * multiple)
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    return CropGeometry(top, left, ch, cw)


class _RealJpegSTE(torch.autograd.Function):
    # Evaluation-path JPEG: forward through the real codec, identity backward.

    @staticmethod
    def forward(ctx, x, qf):
        from .jpegsim import real_jpeg
        return real_jpeg(x.detach(), int(qf))

    @staticmethod
    def backward(ctx, grad_output):
        return grad_output, None


def postprocess(x: torch.Tensor, kind: str, params: dict, jpeg_sim=None):
    """Apply one benign post-processing attack.

    Returns (processed image, crop geometry or None). The JPEG kind delegates
    to ``jpeg_sim`` (the trained differentiable simulator) when given, or the
    real codec (straight-through gradient) otherwise.
    """
    p = params or {}
    if kind == "identity":
        return x, None
    if kind == "awgn":
        return awgn(x, float(p["sigma"]), p.get("seed", 0)), None
    if kind == "gaussian_blur":
        return gaussian_blur(x, float(p["sigma"])), None
    if kind == "median_blur":
        return median_blur(x, int(p.get("kernel", 3))), None
    if kind == "rescale":
        return rescale(x, float(p["factor"])), None
    if kind == "jpeg":
        qf = int(p["qf"])
        if jpeg_sim is not None:
            return jpeg_sim(x, qf), None
        return _RealJpegSTE.apply(x, qf), None
    if kind == "crop":
        geom = CropGeometry(int(p["top"]), int(p["left"]), int(p["height"]), int(p["width"]))
        return crop(x, geom), geom
    if kind == "dropout":
        return pixel_dropout(x, float(p["rate"]), p.get("seed", 0)), None
    raise ValueError(f"unknown post-processing kind {kind!r}")


# ---------------------------------------------------------------------------
# Full attack plans
# ---------------------------------------------------------------------------

@dataclass
class AttackPlan:
    """One sampled tamper + post-processing combination, replayable from its fields."""

    tamper_kind: str
    tamper_params: dict = field(default_factory=dict)
    post_kind: str = "identity"
    post_params: dict = field(default_factory=dict)
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AttackPlan":
        return cls(**d)


def sample_attack_plan(h: int, w: int, seed: int,
                       tamper_kinds=TAMPER_KINDS[:3],
                       post_kinds=TRAINING_POST_KINDS,
                       none_probability: float = 0.1,
                       rate_range=(0.05, 0.45),
                       donor_count: int = 0) -> AttackPlan:
    """Draw a reproducible attack plan for an h x w image."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xA77]))
    if rng.random() < none_probability:
        tamper_kind = "none"
        tamper_params = {}
    else:
        tamper_kind = str(rng.choice(list(tamper_kinds)))
        tamper_params = {"target_rate": float(rng.uniform(*rate_range))}
        if tamper_kind == "copy_move":
            tamper_params["shift"] = [int(rng.integers(h // 8, h // 2)),
                                      int(rng.integers(w // 8, w // 2))]
        elif tamper_kind == "splicing":
            tamper_params["donor_id"] = int(rng.integers(0, max(1, donor_count)))
    post_kind = str(rng.choice(list(post_kinds)))
    post_params = sample_post_params(post_kind, h, w, rng)
    return AttackPlan(tamper_kind, tamper_params, post_kind, post_params, seed=int(seed))


def sample_post_params(kind: str, h: int, w: int, rng: np.random.Generator) -> dict:
    """Draw parameters for one post-processing kind within its documented range."""
    if kind == "awgn":
        return {"sigma": float(rng.uniform(0.0, 10.0 / 255.0)),
                "seed": int(rng.integers(0, 2 ** 31))}
    if kind == "gaussian_blur":
        return {"sigma": float(rng.uniform(0.5, 2.0))}
    if kind == "median_blur":
        return {"kernel": int(rng.choice([3, 5]))}
    if kind == "rescale":
        return {"factor": float(rng.choice([0.5, 0.7, 1.5]))}
    if kind == "jpeg":
        return {"qf": int(rng.choice(JPEG_ATTACK_QUALITIES))}
    if kind == "crop":
        geom = sample_crop_geometry(h, w, rng)
        return {"top": geom.top, "left": geom.left,
                "height": geom.height, "width": geom.width}
    if kind == "dropout":
        return {"rate": float(rng.uniform(0.01, 0.1)),
                "seed": int(rng.integers(0, 2 ** 31))}
    if kind == "identity":
        return {}
    raise ValueError(f"unknown post-processing kind {kind!r}")


def tamper_from_plan(x: torch.Tensor, plan: AttackPlan, donors=None,
                     mask_override: torch.Tensor | None = None,
                     mask_spec: MaskSpec | None = None):
    """Quantize the input and apply the plan's tampering stage.

    Returns (tampered image, ground-truth mask), both on the full plane and
    before any post-processing: the outside-mask pixels equal the quantized
    input bitwise.
    """
    if plan.tamper_kind not in TAMPER_KINDS:
        raise ValueError(f"unknown tamper kind {plan.tamper_kind!r}")
    h, w = x.shape[-2], x.shape[-1]
    x_q = quantize_8bit(x)
    if plan.tamper_kind == "none":
        return x_q, x.new_zeros(1, h, w)

    if mask_override is not None:
        mask = mask_override
    else:
        spec = mask_spec or MaskSpec(target_rate=plan.tamper_params.get("target_rate", 0.2))
        if "target_rate" in plan.tamper_params:
            spec = MaskSpec(**{**asdict(spec), "target_rate": plan.tamper_params["target_rate"]})
        mask = generate_freeform_mask(h, w, spec, seed=plan.seed)
    mask = mask.to(x.dtype)
    if plan.tamper_kind == "copy_move":
        x_tmp = tamper_copy_move(x_q, mask, plan.tamper_params.get("shift", (h // 4, w // 4)))
    elif plan.tamper_kind == "splicing":
        if donors is None or len(donors) == 0:
            raise ValueError("splicing attack needs a donor pool")
        donor = donors[plan.tamper_params.get("donor_id", 0) % len(donors)]
        x_tmp = tamper_splice(x_q, mask, quantize_8bit(donor))
    else:
        x_tmp = tamper_inpaint(x_q, mask, plan.tamper_params.get("provider"))
    return x_tmp, mask


def simulate_attack(x: torch.Tensor, plan: AttackPlan, donors=None, jpeg_sim=None,
                    mask_override: torch.Tensor | None = None,
                    mask_spec: MaskSpec | None = None):
    """Run a full attack on a (3, H, W) image.

    Composition: 8-bit quantization of the input, tampering by ``plan``,
    post-processing, then 8-bit quantization of the result. Returns
    (attacked image, ground-truth mask, crop geometry or None); when the post
    kind is a crop, the mask is cropped identically.

    ``mask_override`` forces the tamper mask (used by the pre-tampering data
    augmentation, which must reuse one mask bitwise across rounds).
    """
    x_tmp, mask = tamper_from_plan(x, plan, donors, mask_override, mask_spec)
    x_atk, geometry = postprocess(x_tmp, plan.post_kind, plan.post_params, jpeg_sim)
    if geometry is not None:
        mask = geometry.apply(mask)
    return quantize_8bit(x_atk), mask, geometry
