"""Loss assembly and the training mechanisms for the full pipeline.

Three mechanisms shape training: pre-tampering data augmentation (reuse one
mask across both tamper rounds so recovery cannot lean on image priors), the
asymmetric batch (every post-processing kind hits every batch item in every
step), and two-stage iterative training (detector and the rest decoupled
first, joint afterwards).
"""

import csv
import math
import statistics
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .attacks import (
    MaskSpec,
    TRAINING_POST_KINDS,
    generate_freeform_mask,
    postprocess,
    sample_post_params,
    tamper_copy_move,
    tamper_inpaint,
    tamper_splice,
)
from .detectors import (
    ForgeryDetector,
    MaskPostprocessParams,
    PatchDiscriminator,
    PixelDiscriminator,
    postprocess_mask_ste,
    rectify,
)
from .imaging import canny_edge, quantize_8bit
from .inn import ImmunizerINN

PROB_EPS = 1e-6


class TrainingDivergedError(RuntimeError):
    """A loss went non-finite or ran away from its running median."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass
class HyperParams:
    """Pipeline loss weights and training constants."""

    alpha: float = 3.0       # weight of the protection loss
    beta: float = 1e-3       # weight of the localization loss
    gamma: float = 10.0      # weight of the null-channel loss
    omega: float = 0.01      # weight of the adversarial loss
    epsilon: float = 0.1     # CE weight inside the JPEG simulator losses
    lr: float = 1e-4
    lr_floor: float = 1e-6
    batch_size: int = 4
    r_aug: float = 0.15
    attack_count: int = 6
    false_alarm_probability: float = 0.1
    tamper_rate_range: tuple = (0.05, 0.45)
    # Stage-1 weighting reading: "prt" zeroes alpha on the protection term
    # (literal reading of the revised total loss); "rec" zeroes the weight on
    # the recovery term instead (the earlier formulation).
    stage1_alpha_zero_on: str = "prt"

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma", "omega", "epsilon", "lr", "r_aug"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.stage1_alpha_zero_on not in ("prt", "rec"):
            raise ValueError("stage1_alpha_zero_on must be 'prt' or 'rec'")


@dataclass
class LossBundle:
    """Named loss terms plus the weighted total (all 0-dim tensors)."""

    l_prt: torch.Tensor
    l_rec: torch.Tensor
    l_loc: torch.Tensor
    l_null: torch.Tensor
    l_adv: torch.Tensor
    total: torch.Tensor
    per_attack: dict = field(default_factory=dict)

    def scalars(self) -> dict:
        out = {k: float(getattr(self, k)) for k in
               ("l_prt", "l_rec", "l_loc", "l_null", "l_adv", "total")}
        out["per_attack"] = {k: dict(v) for k, v in self.per_attack.items()}
        return out


def _clamped_log(p: torch.Tensor) -> torch.Tensor:
    return torch.log(p.clamp(PROB_EPS, 1.0 - PROB_EPS))


def bce(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Binary cross entropy with clamped probabilities."""
    return -(target * _clamped_log(pred) + (1 - target) * _clamped_log(1 - pred)).mean()


def l1(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return (a - b).abs().mean()


def adversarial_loss(d_a_out: torch.Tensor, d_b_out: torch.Tensor) -> torch.Tensor:
    """Generator-side adversarial term: log(1 - D_A(X)) + log(1 - D_B(I_hat))."""
    return _clamped_log(1 - d_a_out).mean() + _clamped_log(1 - d_b_out).mean()


def assemble_total(l_prt, l_rec, l_loc, l_null, l_adv, hp: HyperParams,
                   alpha: float | None = None) -> torch.Tensor:
    a = hp.alpha if alpha is None else alpha
    return l_rec + a * l_prt + hp.beta * l_loc + hp.gamma * l_null + hp.omega * l_adv


def _abort_on_nan(components: dict) -> None:
    bad = {k: float(v) for k, v in components.items() if not torch.isfinite(v)}
    if bad:
        raise TrainingDivergedError(f"non-finite loss components: {sorted(bad)}",
                                    diagnostics={k: float(v) for k, v in components.items()})


def compute_losses(i, e, x, y, i_hat, e_hat, m, m_soft, d_a_out, d_b_out,
                   hp: HyperParams, alpha: float | None = None) -> LossBundle:
    """Assemble the pipeline loss bundle from aligned tensors.

    total = l_rec + alpha * l_prt + beta * l_loc + gamma * l_null + omega * l_adv
    """
    parts = {
        "l_prt": l1(i, x),
        "l_rec": l1(i, i_hat) + l1(e, e_hat),
        "l_loc": bce(m_soft, m),
        "l_null": l1(y, torch.zeros_like(y)),
        "l_adv": adversarial_loss(d_a_out, d_b_out),
    }
    _abort_on_nan(parts)
    total = assemble_total(alpha=alpha, hp=hp, **parts)
    return LossBundle(total=total, **parts)


def discriminator_losses(i, x, i_hat, d_a, d_b):
    """Losses for the two discriminators on (real, fake) pairs.

    l_DA = -1/2 (log D_A(I) + log(1 - D_A(X)))
    l_DB = -1/2 (log D_B(I) + log(1 - D_B(I_hat)))
    """
    l_da = -0.5 * (_clamped_log(d_a(i)).mean() + _clamped_log(1 - d_a(x)).mean())
    l_db = -0.5 * (_clamped_log(d_b(i)).mean() + _clamped_log(1 - d_b(i_hat)).mean())
    _abort_on_nan({"l_da": l_da, "l_db": l_db})
    return l_da, l_db


# ---------------------------------------------------------------------------
# Training mechanisms
# ---------------------------------------------------------------------------

def pretamper_augment(batch: torch.Tensor, donors, r_aug: float, seed: int,
                      rate_range=(0.05, 0.3)):
    """Splice donor content into a fraction ``r_aug`` of the batch, pre-immunization.

    Returns (augmented batch, per-item masks). A recorded mask must later be
    reused bitwise as the attack-time tamper mask, so the add-on region is
    tampered a second time and recovery cannot rely on surrounding content.
    """
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xDA]))
    out = batch.clone()
    fixed_masks = []
    h, w = batch.shape[-2], batch.shape[-1]
    for i in range(batch.shape[0]):
        if rng.random() >= r_aug:
            fixed_masks.append(None)
            continue
        rate = float(rng.uniform(*rate_range))
        mask = generate_freeform_mask(h, w, MaskSpec(target_rate=rate),
                                      seed=int(rng.integers(0, 2 ** 31)))
        donor = donors[int(rng.integers(0, len(donors)))]
        out[i] = tamper_splice(batch[i], mask, donor.to(batch.dtype))
        fixed_masks.append(mask)
    return out, fixed_masks


@dataclass
class AttackGroup:
    """One post-processing kind applied to every item of a tampered batch."""

    kind: str
    params: list            # per-item parameter dicts (seeds already derived)
    images: torch.Tensor    # (n, 3, h', w'); h', w' differ only for crops
    geometry: object = None  # CropGeometry for crop groups

    def __len__(self):
        return self.images.shape[0]


def expand_batch_asymmetric(x_tmp: torch.Tensor, attack_kinds, jpeg_sim=None):
    """Apply each attack kind to every item: n inputs become len(kinds) * n.

    ``attack_kinds`` is a list of (kind, params) pairs; per-item noise seeds
    derive as ``params["seed"] + item_index`` so any item can be reproduced by
    a standalone :func:`postprocess` call with the recorded parameters.
    """
    groups = []
    n = x_tmp.shape[0]
    for kind, params in attack_kinds:
        outs, used = [], []
        geometry = None
        for i in range(n):
            p = dict(params)
            if "seed" in p:
                p["seed"] = int(p["seed"]) + i
            y, geom = postprocess(x_tmp[i], kind, p, jpeg_sim)
            outs.append(y)
            used.append(p)
            geometry = geom
        groups.append(AttackGroup(kind=kind, params=used,
                                  images=torch.stack(outs), geometry=geometry))
    return groups


def sample_attack_kinds(h: int, w: int, seed: int, kinds=TRAINING_POST_KINDS):
    """Draw one parameter set per post-processing kind for a training step."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x6A]))
    return [(kind, sample_post_params(kind, h, w, rng)) for kind in kinds]


def cosine_lr(optimizer, total_steps: int, floor: float):
    """Cosine annealing from the optimizer's base lr down to ``floor``."""
    return torch.optim.lr_scheduler.CosineAnnealingLR(
        optimizer, T_max=max(1, total_steps), eta_min=floor)


# ---------------------------------------------------------------------------
# Metrics log
# ---------------------------------------------------------------------------

class MetricsLog:
    """Append-only CSV: one row per training step."""

    FIXED = ("step", "stage", "lr", "total", "l_prt", "l_rec", "l_loc",
             "l_null", "l_adv", "l_da", "l_db")

    def __init__(self, path, attack_kinds=TRAINING_POST_KINDS):
        self.path = Path(path)
        self.columns = list(self.FIXED)
        self.columns += [f"rec_{k}" for k in attack_kinds]
        self.columns += [f"loc_{k}" for k in attack_kinds]
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if not self.path.exists():
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh).writerow(self.columns)

    def append(self, row: dict) -> None:
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh).writerow([row.get(c, "") for c in self.columns])


class DivergenceGuard:
    """Abort when the total loss exceeds 10x its running median for 100 steps."""

    def __init__(self, factor: float = 10.0, patience: int = 100, window: int = 500):
        self.factor = factor
        self.patience = patience
        self.history = deque(maxlen=window)
        self.violations = 0

    def update(self, total: float) -> None:
        if not math.isfinite(total):
            raise TrainingDivergedError(f"total loss is {total}")
        if len(self.history) >= 20:
            median = statistics.median(self.history)
            if median > 0 and total > self.factor * median:
                self.violations += 1
                if self.violations >= self.patience:
                    raise TrainingDivergedError(
                        f"total loss {total:.4g} above {self.factor}x running "
                        f"median {median:.4g} for {self.patience} consecutive steps")
            else:
                self.violations = 0
        self.history.append(total)


# ---------------------------------------------------------------------------
# The two-stage pipeline trainer
# ---------------------------------------------------------------------------

@dataclass
class TrainerConfig:
    hp: HyperParams = field(default_factory=HyperParams)
    mask_params: MaskPostprocessParams = field(default_factory=MaskPostprocessParams)
    seed: int = 0
    inn_hidden: int = 32
    detector_base: int = 32
    d_a_ndf: int = 16
    d_b_base: int = 32
    attack_kinds: tuple = TRAINING_POST_KINDS
    # stage-1 early exit: localization BCE running mean below this over the
    # window means the detector has converged enough for joint training
    switch_bce_threshold: float = 0.1
    switch_window: int = 200
    checkpoint_every: int = 500


class PipelineTrainer:
    """Owns the four networks, their optimizers, and the two training stages.

    ``images`` is an in-memory list of (3, H, W) tensors (all the same size);
    ``jpeg_sim`` is the trained student simulator callable (image, qf) -> image.
    """

    def __init__(self, images, jpeg_sim, cfg: TrainerConfig = TrainerConfig(),
                 metrics_path=None, models=None):
        if len(images) == 0:
            raise ValueError("empty training image set")
        self.images = list(images)
        self.jpeg_sim = jpeg_sim
        self.cfg = cfg
        self.hp = cfg.hp
        torch.manual_seed(cfg.seed)
        if models is None:
            self.inn = ImmunizerINN(hidden=cfg.inn_hidden)
            self.detector = ForgeryDetector(base=cfg.detector_base)
            self.d_a = PatchDiscriminator(ndf=cfg.d_a_ndf)
            self.d_b = PixelDiscriminator(base=cfg.d_b_base)
        else:
            self.inn, self.detector, self.d_a, self.d_b = models
        hp = self.hp
        self.opt_inn = torch.optim.Adam(self.inn.parameters(), lr=hp.lr)
        self.opt_det = torch.optim.Adam(self.detector.parameters(), lr=hp.lr)
        self.opt_da = torch.optim.Adam(self.d_a.parameters(), lr=hp.lr)
        self.opt_db = torch.optim.Adam(self.d_b.parameters(), lr=hp.lr)
        self.optimizers = [self.opt_inn, self.opt_det, self.opt_da, self.opt_db]
        self.schedulers = []
        self.step_count = 0
        self.stage = 1
        self.guard = DivergenceGuard()
        self.metrics = MetricsLog(metrics_path, cfg.attack_kinds) if metrics_path else None
        self._edges = [canny_edge(img) for img in self.images]
        self._bce_window = deque(maxlen=cfg.switch_window)

    # -- persistence -------------------------------------------------------

    def state_dict(self) -> dict:
        return {
            "step": self.step_count,
            "stage": self.stage,
            "models": {
                "inn": self.inn.state_dict(),
                "detector": self.detector.state_dict(),
                "d_a": self.d_a.state_dict(),
                "d_b": self.d_b.state_dict(),
            },
            "optimizers": [o.state_dict() for o in self.optimizers],
            "schedulers": [s.state_dict() for s in self.schedulers],
        }

    def load_state_dict(self, state: dict) -> None:
        self.step_count = state["step"]
        self.stage = state["stage"]
        self.inn.load_state_dict(state["models"]["inn"])
        self.detector.load_state_dict(state["models"]["detector"])
        self.d_a.load_state_dict(state["models"]["d_a"])
        self.d_b.load_state_dict(state["models"]["d_b"])
        for opt, s in zip(self.optimizers, state["optimizers"]):
            opt.load_state_dict(s)
        for sched, s in zip(self.schedulers, state["schedulers"]):
            sched.load_state_dict(s)

    def init_schedulers(self, total_steps: int) -> None:
        self.schedulers = [cosine_lr(o, total_steps, self.hp.lr_floor)
                           for o in self.optimizers]

    # -- one training step ---------------------------------------------------

    def _sample_batch(self, step: int):
        rng = np.random.default_rng(np.random.SeedSequence([self.cfg.seed, step, 0xB0]))
        n = self.hp.batch_size
        idx = rng.choice(len(self.images), size=n, replace=len(self.images) < n)
        batch = torch.stack([self.images[i] for i in idx])
        edges = torch.stack([self._edges[i] for i in idx])
        return batch, edges, rng

    def _tamper_items(self, x_q, fixed_masks, rng):
        """Per-item tampering on the quantized protected batch."""
        n, _, h, w = x_q.shape
        masks, tampered = [], []
        for i in range(n):
            forced = fixed_masks[i] is not None
            if not forced and rng.random() < self.hp.false_alarm_probability:
                masks.append(x_q.new_zeros(1, h, w))
                tampered.append(x_q[i])
                continue
            kind = ("copy_move", "splicing", "inpainting")[int(rng.integers(0, 3))]
            if forced:
                mask = fixed_masks[i].to(x_q.dtype)
            else:
                rate = float(rng.uniform(*self.hp.tamper_rate_range))
                mask = generate_freeform_mask(
                    h, w, MaskSpec(target_rate=rate), seed=int(rng.integers(0, 2 ** 31)))
            if kind == "copy_move":
                shift = (int(rng.integers(h // 8, h // 2)), int(rng.integers(w // 8, w // 2)))
                t = tamper_copy_move(x_q[i], mask, shift)
            elif kind == "splicing":
                donor = quantize_8bit(self.images[int(rng.integers(0, len(self.images)))])
                t = tamper_splice(x_q[i], mask, donor)
            else:
                t = tamper_inpaint(x_q[i], mask)
            masks.append(mask)
            tampered.append(t)
        return torch.stack(tampered), masks

    def train_step(self, step: int | None = None) -> LossBundle:
        """Run one optimization step of the current stage."""
        step = self.step_count if step is None else step
        batch, edges, rng = self._sample_batch(step)
        stage2 = self.stage == 2

        batch, fixed_masks = pretamper_augment(
            batch, self.images, self.hp.r_aug,
            seed=int(np.random.SeedSequence([self.cfg.seed, step, 0xA6]).generate_state(1)[0]))
        for i, m in enumerate(fixed_masks):
            if m is not None:
                edges[i] = canny_edge(batch[i])

        # immunize
        z = torch.cat([batch, edges], dim=1)
        out = self.inn(z)
        x_raw, y_null = out[:, :3], out[:, 3:]
        x_q = quantize_8bit(x_raw)

        # tamper + asymmetric expansion over the post-processing kinds
        x_tmp, masks = self._tamper_items(x_q, fixed_masks, rng)
        masks = torch.stack(masks)
        kinds = sample_attack_kinds(batch.shape[-2], batch.shape[-1],
                                    seed=int(rng.integers(0, 2 ** 31)),
                                    kinds=self.cfg.attack_kinds)
        groups = expand_batch_asymmetric(x_tmp, kinds, self.jpeg_sim)

        # losses over every attack group; groups of identical spatial size are
        # concatenated into single detector / inverse passes (crops apart)
        adv_group = int(step % len(groups))  # rotate the D_B / l_adv group
        rec_terms, loc_live_terms, per_attack = [], [], {}
        i_hat_adv = None
        i_adv = None

        def run_groups(entries):
            """One detector + one inverse pass over same-size groups.

            ``entries``: list of (group, group_index, i, e, m) with matching
            spatial sizes.
            """
            nonlocal i_hat_adv, i_adv
            x_atk = quantize_8bit(torch.cat([g.images for g, *_ in entries]))
            i_g = torch.cat([i for _, _, i, _, _ in entries])
            e_g = torch.cat([e for _, _, _, e, _ in entries])
            m_g = torch.cat([m for _, _, _, _, m in entries])
            det_in = x_atk if stage2 else x_atk.detach()
            soft = self.detector(det_in)
            if stage2:
                m_rect = postprocess_mask_ste(soft, self.cfg.mask_params)
            else:
                m_rect = m_g  # ground-truth rectification in stage 1
            rect = rectify(x_atk, m_rect)
            zeros = rect.new_zeros(rect.shape[0], 1, *rect.shape[-2:])
            rec = self.inn.inverse(torch.cat([rect, zeros], dim=1))
            i_hat, e_hat = rec[:, :3], rec[:, 3:]
            ofs = 0
            for group, gi, *_ in entries:
                k = len(group)
                sl = slice(ofs, ofs + k)
                l_loc_g = bce(soft[sl], m_g[sl])
                l_rec_g = l1(i_g[sl], i_hat[sl]) + l1(e_g[sl], e_hat[sl])
                loc_live_terms.append(l_loc_g)
                rec_terms.append(l_rec_g)
                per_attack[group.kind] = {"l_rec": float(l_rec_g.detach()),
                                          "l_loc": float(l_loc_g.detach())}
                if gi == adv_group:
                    i_hat_adv, i_adv = i_hat[sl], i_g[sl]
                ofs += k

        full_plane, cropped = [], []
        for gi, group in enumerate(groups):
            if group.geometry is None:
                full_plane.append((group, gi, batch, edges, masks))
            else:
                cropped.append((group, gi, group.geometry.apply(batch),
                                group.geometry.apply(edges),
                                group.geometry.apply(masks)))
        if full_plane:
            run_groups(full_plane)
        for entry in cropped:
            run_groups([entry])

        l_rec = torch.stack(rec_terms).mean()
        l_loc_live = torch.stack(loc_live_terms).mean()
        l_prt = l1(batch, x_raw)
        l_null = l1(y_null, torch.zeros_like(y_null))
        d_a_out = self.d_a(x_q)
        d_b_out = self.d_b(i_hat_adv)
        l_adv = adversarial_loss(d_a_out, d_b_out)

        if stage2:
            l_loc = l_loc_live
            alpha = self.hp.alpha
            l_rec_w, l_prt_w = l_rec, l_prt
        elif self.hp.stage1_alpha_zero_on == "prt":
            # literal revised reading: protection term disabled in stage 1
            l_loc = l_loc_live.detach()  # decoupled: no generator grad via detector
            alpha = 0.0
            l_rec_w, l_prt_w = l_rec, l_prt
        else:
            # earlier reading: the recovery term is the alpha-disabled one;
            # keep its value in the bundle but cut its gradient
            l_loc = l_loc_live.detach()
            alpha = self.hp.alpha
            l_rec_w, l_prt_w = l_rec.detach(), l_prt
        parts = {"l_prt": l_prt_w, "l_rec": l_rec_w, "l_loc": l_loc,
                 "l_null": l_null, "l_adv": l_adv}
        _abort_on_nan(parts)
        total = assemble_total(hp=self.hp, alpha=alpha, **parts)

        # generator update (and detector too, when coupled in stage 2)
        self.opt_inn.zero_grad()
        self.opt_det.zero_grad()
        total.backward()
        if not stage2:
            # decoupled detector update on its own localization loss
            # (its graph starts from detached inputs, so it is still alive)
            l_loc_live.backward()
        self.opt_inn.step()
        self.opt_det.step()

        # discriminator updates on their own losses; the pixel-wise critic
        # compares against the originals on the adversarial group's plane
        l_da = -0.5 * (_clamped_log(self.d_a(batch)).mean()
                       + _clamped_log(1 - self.d_a(x_q.detach())).mean())
        l_db = -0.5 * (_clamped_log(self.d_b(i_adv)).mean()
                       + _clamped_log(1 - self.d_b(i_hat_adv.detach())).mean())
        _abort_on_nan({"l_da": l_da, "l_db": l_db})
        self.opt_da.zero_grad()
        self.opt_db.zero_grad()
        (l_da + l_db).backward()
        self.opt_da.step()
        self.opt_db.step()

        for sched in self.schedulers:
            sched.step()

        bundle = LossBundle(l_prt=l_prt.detach(), l_rec=l_rec.detach(),
                            l_loc=l_loc_live.detach(), l_null=l_null.detach(),
                            l_adv=l_adv.detach(), total=total.detach(),
                            per_attack=per_attack)
        self.guard.update(float(total.detach()))
        self._bce_window.append(float(l_loc_live.detach()))
        if self.metrics:
            row = {"step": self.step_count, "stage": self.stage,
                   "lr": self.opt_inn.param_groups[0]["lr"],
                   "l_da": float(l_da.detach()), "l_db": float(l_db.detach())}
            row.update({k: float(v) for k, v in bundle.scalars().items()
                        if k != "per_attack"})
            for kind, vals in per_attack.items():
                row[f"rec_{kind}"] = vals["l_rec"]
                row[f"loc_{kind}"] = vals["l_loc"]
            self.metrics.append(row)
        self.step_count += 1
        return bundle

    # -- stage drivers -------------------------------------------------------

    def stage1_converged(self) -> bool:
        w = self._bce_window
        return (len(w) == w.maxlen
                and sum(w) / len(w) < self.cfg.switch_bce_threshold)

    def train_stage1(self, steps: int, allow_early_exit: bool = False,
                     callback=None) -> None:
        self.stage = 1
        for _ in range(steps):
            bundle = self.train_step()
            if callback:
                callback(self, bundle)
            if allow_early_exit and self.stage1_converged():
                break

    def train_stage2(self, steps: int, callback=None) -> None:
        self.stage = 2
        for _ in range(steps):
            bundle = self.train_step()
            if callback:
                callback(self, bundle)


def train_stage1(trainer: PipelineTrainer, steps: int, **kw) -> PipelineTrainer:
    trainer.train_stage1(steps, **kw)
    return trainer


def train_stage2(trainer: PipelineTrainer, steps: int, **kw) -> PipelineTrainer:
    trainer.train_stage2(steps, **kw)
    return trainer
