"""Knowledge-distillation JPEG simulator.

A frozen quality-factor classifier plus a student/teacher generator pair. The
teacher reconstructs real JPEG images from real JPEG images (easy); the
student must produce the same result from the uncompressed image (hard) and is
pulled toward the teacher through feature distillation. After training, only
the student runs inside the attack layer, giving a differentiable stand-in for
real compression.
"""

import io
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from PIL import Image

from .blocks import UShapedNet, sn_conv, warmup_spectral_norm
from .imaging import haar_downsample, quantize_8bit

QF_CLASSES = (10, 30, 50, 70, 90, 100)  # 100 means "not compressed"
PROB_EPS = 1e-6


def qf_to_class(qf: int) -> int:
    try:
        return QF_CLASSES.index(int(qf))
    except ValueError:
        raise ValueError(f"quality factor {qf} is not one of {QF_CLASSES}") from None


# ---------------------------------------------------------------------------
# Real codec adapter (baseline JPEG, 4:2:0 chroma subsampling)
# ---------------------------------------------------------------------------

def _to_uint8(img: torch.Tensor) -> np.ndarray:
    arr = img.detach().clamp(0, 1).mul(255.0).add(0.5).floor().to(torch.uint8)
    return arr.permute(1, 2, 0).cpu().numpy()


def jpeg_encode_bytes(img: torch.Tensor, qf: int) -> bytes:
    """Encode a (3, H, W) [0, 1] image to baseline JPEG bytes at quality ``qf``."""
    buf = io.BytesIO()
    Image.fromarray(_to_uint8(img), mode="RGB").save(
        buf, format="JPEG", quality=int(qf), subsampling=2)
    return buf.getvalue()


def jpeg_decode_bytes(data: bytes) -> torch.Tensor:
    with Image.open(io.BytesIO(data)) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def real_jpeg(img: torch.Tensor, qf: int) -> torch.Tensor:
    """Round-trip an image through the real JPEG codec at quality ``qf``.

    ``qf == 100`` is the "not compressed" class: the image only passes 8-bit
    quantization. Accepts (3, H, W) or (B, 3, H, W).
    """
    if img.dim() == 4:
        return torch.stack([real_jpeg(item, qf) for item in img])
    if int(qf) == 100:
        return quantize_8bit(img).detach()
    return jpeg_decode_bytes(jpeg_encode_bytes(img, qf))


# ---------------------------------------------------------------------------
# Constrained high-pass front ends
# ---------------------------------------------------------------------------

# Standard residual (SRM) kernels: first-order horizontal, 3x3 second-order,
# and the 5x5 second-order kernel, each with its usual normalization.
_SRM_FIRST = np.zeros((5, 5)); _SRM_FIRST[2, 1:4] = [1, -2, 1]; _SRM_FIRST /= 2.0
_SRM_SQUARE = np.zeros((5, 5))
_SRM_SQUARE[1:4, 1:4] = [[-1, 2, -1], [2, -4, 2], [-1, 2, -1]]; _SRM_SQUARE /= 4.0
_SRM_KV = np.array([
    [-1, 2, -2, 2, -1],
    [2, -6, 8, -6, 2],
    [-2, 8, -12, 8, -2],
    [2, -6, 8, -6, 2],
    [-1, 2, -2, 2, -1],
], dtype=np.float64) / 12.0


class SRMConv(nn.Module):
    """Fixed bank of the three standard residual kernels, applied per channel.

    RGB in, 9 residual maps out. The kernels are buffers: they never train.
    """

    def __init__(self):
        super().__init__()
        bank = np.stack([_SRM_FIRST, _SRM_SQUARE, _SRM_KV]).astype(np.float32)
        weight = np.zeros((9, 3, 5, 5), dtype=np.float32)
        for k in range(3):
            for c in range(3):
                weight[3 * k + c, c] = bank[k]
        self.register_buffer("weight", torch.from_numpy(weight))

    def forward(self, x):
        return F.conv2d(x, self.weight, padding=2)


class BayarConv(nn.Module):
    """Constrained 5x5 convolution: center tap -1, remaining taps sum to 1.

    The constraint (per output/input kernel slice) is re-imposed by
    :meth:`project` after every optimizer step.
    """

    def __init__(self, cin: int = 3, cout: int = 8):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(cout, cin, 5, 5) * 0.1)
        ring = torch.ones(5, 5, dtype=torch.bool)
        ring[2, 2] = False
        self.register_buffer("ring", ring)
        self.project()

    @torch.no_grad()
    def project(self):
        w = self.weight
        ring = self.ring
        n = int(ring.sum())
        ring_sum = (w * ring).sum(dim=(-1, -2), keepdim=True)
        w.add_(ring * (1.0 - ring_sum) / n)
        w[..., 2, 2] = -1.0

    def forward(self, x):
        return F.conv2d(x, self.weight, padding=2)


class QFPredictor(nn.Module):
    """Quality-factor classifier over the six compression classes.

    Three parallel front convolutions (vanilla, fixed SRM, constrained Bayar)
    suppress the image content; a small Haar-downsampling FCN and a
    three-layer MLP head produce the class logits.
    """

    def __init__(self, width: int = 16):
        super().__init__()
        self.width = width
        self.front_plain = sn_conv(3, 8, kernel=5)
        self.front_srm = SRMConv()
        self.front_bayar = BayarConv(3, 8)
        w = width
        self.trunk = nn.ModuleList([
            nn.Sequential(sn_conv(25, w), nn.ELU()),
            nn.Sequential(sn_conv(4 * w, w), nn.ELU()),
            nn.Sequential(sn_conv(4 * w, w), nn.ELU()),
            nn.Sequential(sn_conv(4 * w, w), nn.ELU()),
        ])
        self.head = nn.Sequential(
            nn.Linear(w, 64), nn.ELU(),
            nn.Linear(64, 64), nn.ELU(),
            nn.Linear(64, len(QF_CLASSES)),
        )
        warmup_spectral_norm(self, torch.zeros(1, 3, 16, 16))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Class logits for a (B, 3, H, W) batch."""
        h = torch.cat([self.front_plain(x), self.front_srm(x), self.front_bayar(x)], dim=1)
        h = self.trunk[0](h)
        for stage in self.trunk[1:]:
            h = stage(haar_downsample(h))
        return self.head(h.mean(dim=(-1, -2)))

    def predict_proba(self, x: torch.Tensor) -> torch.Tensor:
        """Softmax-normalized probabilities over the QF classes."""
        single = x.dim() == 3
        logits = self.forward(x.unsqueeze(0) if single else x)
        probs = torch.softmax(logits, dim=-1)
        return probs.squeeze(0) if single else probs


# ---------------------------------------------------------------------------
# Student / teacher generators
# ---------------------------------------------------------------------------

class ModulationMLP(nn.Module):
    """Five-layer MLP mapping a QF one-hot to per-channel affine pairs (a_i, b_i)
    for the three leading conv blocks of the generator backbone."""

    def __init__(self, block_widths, hidden: int = 64):
        super().__init__()
        self.block_widths = tuple(block_widths)
        out_dim = 2 * sum(self.block_widths)
        self.net = nn.Sequential(
            nn.Linear(len(QF_CLASSES), hidden), nn.ELU(),
            nn.Linear(hidden, hidden), nn.ELU(),
            nn.Linear(hidden, hidden), nn.ELU(),
            nn.Linear(hidden, hidden), nn.ELU(),
            nn.Linear(hidden, out_dim),
        )
        # start at identity modulation: a = 1 + raw, b = raw, raw == 0
        nn.init.zeros_(self.net[-1].weight)
        nn.init.zeros_(self.net[-1].bias)

    def forward(self, onehot: torch.Tensor):
        raw = self.net(onehot)
        mods = []
        ofs = 0
        for width in self.block_widths:
            a = 1.0 + raw[..., ofs:ofs + width]
            b = raw[..., ofs + width:ofs + 2 * width]
            mods.append((a, b))
            ofs += 2 * width
        return mods


class JpegGenerator(nn.Module):
    """Differentiable pseudo-JPEG generator conditioned on the quality class.

    Residual design: the backbone output is scaled by a small gain and added
    to the input, so an untrained generator starts near the identity map. The
    gain starts small but nonzero: at exactly zero the backbone would receive
    no reconstruction gradient at all.
    """

    def __init__(self, base: int = 16, out_gain_init: float = 0.1):
        super().__init__()
        self.backbone = UShapedNet(base=base)
        self.mlp = ModulationMLP(self.backbone.modulated_widths)
        self.out_gain = nn.Parameter(torch.full((), out_gain_init))

    def forward(self, image: torch.Tensor, qf_class: int):
        """Returns (generated image, [phi0, phi1, phi2]) for a (B, 3, H, W) batch."""
        onehot = image.new_zeros(image.shape[0], len(QF_CLASSES))
        onehot[:, qf_class] = 1.0
        mods = self.mlp(onehot)
        residual, feats, _ = self.backbone.features_and_output(image, mods)
        return image + self.out_gain * residual, feats


class KDJpeg(nn.Module):
    """Predictor + student + teacher bundle."""

    def __init__(self, base: int = 16, predictor_width: int = 16):
        super().__init__()
        self.base = base
        self.predictor_width = predictor_width
        self.predictor = QFPredictor(predictor_width)
        self.student = JpegGenerator(base)
        self.teacher = JpegGenerator(base)

    def arch_meta(self) -> dict:
        return {"base": self.base, "predictor_width": self.predictor_width,
                "qf_classes": list(QF_CLASSES)}

    def student_simulator(self):
        """Callable (image, qf) -> pseudo-JPEG image for the attack layer.

        Differentiable with respect to the image; parameters stay untouched.
        """
        def sim(x: torch.Tensor, qf: int) -> torch.Tensor:
            out, _ = simulate_jpeg(self, x, qf, role="student")
            return out
        return sim


def simulate_jpeg(kd: KDJpeg, image: torch.Tensor, qf: int, role: str,
                  input_override: torch.Tensor | None = None):
    """Run the student or teacher generator for quality ``qf``.

    The teacher always consumes the real-codec compression of ``image``
    (``input_override`` is rejected); the student consumes ``image`` itself,
    or ``input_override`` (e.g. a noise-augmented copy) when given. Returns
    (generated image, [phi0, phi1, phi2]).
    """
    cls = qf_to_class(qf)
    single = image.dim() == 3
    batch = image.unsqueeze(0) if single else image
    if role == "teacher":
        if input_override is not None:
            raise ValueError("the teacher input is always the real compressed image")
        inp = real_jpeg(batch, qf)
        net = kd.teacher
    elif role == "student":
        inp = input_override.unsqueeze(0) if (
            input_override is not None and input_override.dim() == 3
        ) else (input_override if input_override is not None else batch)
        net = kd.student
    else:
        raise ValueError(f"role must be 'student' or 'teacher'; got {role!r}")
    out, feats = net(inp, cls)
    if single:
        return out.squeeze(0), [f.squeeze(0) for f in feats]
    return out, feats


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def cross_entropy_probs(probs: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Cross entropy from probability vectors, with clamped logs."""
    p = probs.clamp(PROB_EPS, 1.0)
    if target.dim() == probs.dim():  # one-hot / soft targets
        return -(target * p.log()).sum(dim=-1).mean()
    idx = target.view(-1, 1) if probs.dim() == 2 else target
    return -p.gather(-1, idx).log().mean()


@dataclass
class KDLossBundle:
    l_qf: torch.Tensor
    l_tea: torch.Tensor
    l_stu: torch.Tensor
    parts: dict = field(default_factory=dict)


def kd_losses(i_jpg: torch.Tensor, stu_out: torch.Tensor, tea_out: torch.Tensor,
              phi_stu, phi_tea, qf_class: int, predictor: QFPredictor,
              epsilon: float = 0.1) -> KDLossBundle:
    """Assemble the three simulator losses.

    teacher:   l1(teacher output, real jpeg) + eps * CE on the teacher output
    student:   l1(student output, real jpeg) + eps * CE on the student output
               + sum of feature l1 distances over the three hooked blocks
    predictor: CE on the real jpeg image
    """
    batch = i_jpg if i_jpg.dim() == 4 else i_jpg.unsqueeze(0)
    target = torch.full((batch.shape[0],), qf_class, dtype=torch.long)

    def ce_on(img):
        b = img if img.dim() == 4 else img.unsqueeze(0)
        return cross_entropy_probs(torch.softmax(predictor(b), dim=-1), target)

    l1 = lambda a, b: (a - b).abs().mean()
    distill = sum(l1(s, t) for s, t in zip(phi_stu, phi_tea))
    l_rec_tea = l1(tea_out, i_jpg)
    l_rec_stu = l1(stu_out, i_jpg)
    ce_tea = ce_on(tea_out)
    ce_stu = ce_on(stu_out)
    return KDLossBundle(
        l_qf=ce_on(i_jpg),
        l_tea=l_rec_tea + epsilon * ce_tea,
        l_stu=l_rec_stu + epsilon * ce_stu + distill,
        parts={"l1_tea": l_rec_tea, "l1_stu": l_rec_stu, "ce_tea": ce_tea,
               "ce_stu": ce_stu, "distill": distill},
    )


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class KDJpegTrainConfig:
    base: int = 16
    predictor_width: int = 16
    batch_size: int = 8
    predictor_lr: float = 1e-3
    predictor_epochs: int = 60
    predictor_target_accuracy: float = 0.97
    generator_lr: float = 2e-4
    teacher_warmup_epochs: int = 3
    joint_epochs: int = 30
    epsilon: float = 0.1
    awgn_max_sigma: float = 5.0 / 255.0
    awgn_probability: float = 0.5
    generator_classes: tuple = QF_CLASSES
    seed: int = 0


def _encode_corpus(corpus, classes) -> dict:
    """Precompute real-codec outputs: cache[class_idx][image_idx]."""
    return {qf_to_class(qf): [real_jpeg(img, qf) for img in corpus] for qf in classes}


def train_kdjpeg(corpus, cfg: KDJpegTrainConfig = KDJpegTrainConfig(), log_fn=None):
    """Train predictor, then teacher/student, on a corpus of (3, H, W) images.

    Stage 1 fits the QF predictor on real-codec outputs; stage 2 warm-starts
    the teacher and then trains both generators jointly with the predictor
    frozen. Returns (KDJpeg module, history dict).
    """
    if len(corpus) == 0:
        raise ValueError("empty training corpus")
    log_fn = log_fn or (lambda msg: None)
    torch.manual_seed(cfg.seed)
    kd = KDJpeg(base=cfg.base, predictor_width=cfg.predictor_width)
    history = {"predictor_accuracy": [], "teacher_loss": [], "student_loss": []}
    rng = np.random.default_rng(cfg.seed)

    jpg_cache = _encode_corpus(corpus, QF_CLASSES)
    log_fn(f"encoded corpus: {len(corpus)} images x {len(QF_CLASSES)} classes")

    # Stage 1: predictor classification on real JPEG images.
    opt = torch.optim.Adam(kd.predictor.parameters(), lr=cfg.predictor_lr)
    pairs = [(cls, i) for cls in range(len(QF_CLASSES)) for i in range(len(corpus))]
    for epoch in range(cfg.predictor_epochs):
        rng.shuffle(pairs)
        correct = 0
        for start in range(0, len(pairs), cfg.batch_size):
            chunk = pairs[start:start + cfg.batch_size]
            x = torch.stack([jpg_cache[cls][i] for cls, i in chunk])
            y = torch.tensor([cls for cls, _ in chunk], dtype=torch.long)
            logits = kd.predictor(x)
            loss = F.cross_entropy(logits, y)
            opt.zero_grad()
            loss.backward()
            opt.step()
            kd.predictor.front_bayar.project()
            correct += int((logits.argmax(dim=-1) == y).sum())
        acc = correct / len(pairs)
        history["predictor_accuracy"].append(acc)
        log_fn(f"predictor epoch {epoch}: accuracy {acc:.3f}")
        if epoch >= 2 and acc >= cfg.predictor_target_accuracy:
            break

    # Stage 2: teacher/student with the predictor frozen.
    kd.predictor.requires_grad_(False)
    kd.predictor.eval()
    opt_tea = torch.optim.Adam(kd.teacher.parameters(), lr=cfg.generator_lr)
    opt_stu = torch.optim.Adam(kd.student.parameters(), lr=cfg.generator_lr)
    noise_gen = torch.Generator().manual_seed(cfg.seed + 1)
    gen_classes = [qf_to_class(qf) for qf in cfg.generator_classes]
    gen_pairs = [(cls, i) for cls in gen_classes for i in range(len(corpus))]

    def run_epoch(train_student: bool):
        rng.shuffle(gen_pairs)
        tea_sum, stu_sum, n_batches = 0.0, 0.0, 0
        for start in range(0, len(gen_pairs), cfg.batch_size):
            chunk = gen_pairs[start:start + cfg.batch_size]
            # one quality class per mini-batch so the conditioning is exercised
            cls = chunk[0][0]
            idx = [i for _, i in chunk]
            imgs = torch.stack([corpus[i] for i in idx])
            jpgs = torch.stack([jpg_cache[cls][i] for i in idx])

            tea_out, tea_feats = kd.teacher(jpgs, cls)
            target = torch.full((len(idx),), cls, dtype=torch.long)
            probs_tea = torch.softmax(kd.predictor(tea_out), dim=-1)
            l_tea = (tea_out - jpgs).abs().mean() + cfg.epsilon * cross_entropy_probs(probs_tea, target)
            opt_tea.zero_grad()
            l_tea.backward()
            opt_tea.step()
            tea_sum += float(l_tea)

            if train_student:
                stu_in = imgs
                if float(torch.rand((), generator=noise_gen)) < cfg.awgn_probability:
                    sigma = float(torch.rand((), generator=noise_gen)) * cfg.awgn_max_sigma
                    stu_in = imgs + sigma * torch.randn(imgs.shape, generator=noise_gen)
                stu_out, stu_feats = kd.student(stu_in, cls)
                with torch.no_grad():
                    _, tea_feats_t = kd.teacher(jpgs, cls)
                probs_stu = torch.softmax(kd.predictor(stu_out), dim=-1)
                distill = sum((s - t).abs().mean() for s, t in zip(stu_feats, tea_feats_t))
                l_stu = ((stu_out - jpgs).abs().mean()
                         + cfg.epsilon * cross_entropy_probs(probs_stu, target)
                         + distill)
                opt_stu.zero_grad()
                l_stu.backward()
                opt_stu.step()
                stu_sum += float(l_stu)
            n_batches += 1
        return tea_sum / n_batches, stu_sum / max(1, n_batches)

    for epoch in range(cfg.teacher_warmup_epochs):
        tea_loss, _ = run_epoch(train_student=False)
        history["teacher_loss"].append(tea_loss)
        log_fn(f"teacher warmup epoch {epoch}: loss {tea_loss:.4f}")
    for epoch in range(cfg.joint_epochs):
        tea_loss, stu_loss = run_epoch(train_student=True)
        history["teacher_loss"].append(tea_loss)
        history["student_loss"].append(stu_loss)
        log_fn(f"joint epoch {epoch}: teacher {tea_loss:.4f} student {stu_loss:.4f}")

    kd.eval()
    return kd, history
