import math

import numpy as np
import pytest
import torch

from imshield.attacks import postprocess
from imshield.jpegsim import KDJpeg
from imshield.training import (
    DivergenceGuard,
    HyperParams,
    MetricsLog,
    PipelineTrainer,
    TrainerConfig,
    TrainingDivergedError,
    assemble_total,
    compute_losses,
    cosine_lr,
    discriminator_losses,
    expand_batch_asymmetric,
    pretamper_augment,
    sample_attack_kinds,
)


def synth_image(seed, size=64):
    g = torch.Generator().manual_seed(seed)
    yy, xx = torch.meshgrid(torch.linspace(0, 1, size), torch.linspace(0, 1, size),
                            indexing="ij")
    base = torch.stack([yy, xx, 0.5 * (yy + xx)])
    for _ in range(4):
        cy, cx = torch.rand(2, generator=g)
        r = 0.08 + 0.2 * torch.rand(1, generator=g)
        blob = ((yy - cy) ** 2 + (xx - cx) ** 2 < r ** 2).float()
        base = base * (1 - blob) + torch.rand(3, 1, 1, generator=g) * blob
    return (base + 0.03 * torch.randn(3, size, size, generator=g)).clamp(0, 1)


class _ConstantD(torch.nn.Module):
    def __init__(self, value):
        super().__init__()
        self.value = value

    def forward(self, x):
        return torch.full((x.shape[0], 1, 4, 4), self.value)


def perfect_inputs(hp):
    g = torch.Generator().manual_seed(0)
    i = torch.rand(2, 3, 16, 16, generator=g)
    e = (torch.rand(2, 1, 16, 16, generator=g) > 0.8).float()
    m = (torch.rand(2, 1, 16, 16, generator=g) > 0.7).float()
    m_soft = m.clone()
    y = torch.zeros(2, 1, 16, 16)
    d_out = torch.full((2, 1, 4, 4), 0.5)
    return dict(i=i, e=e, x=i.clone(), y=y, i_hat=i.clone(), e_hat=e.clone(),
                m=m, m_soft=m_soft, d_a_out=d_out, d_b_out=d_out, hp=hp)


class TestComputeLosses:
    def test_perfect_outputs_zero_nonadversarial_terms(self):
        hp = HyperParams()
        b = compute_losses(**perfect_inputs(hp))
        assert float(b.l_prt) == 0.0
        assert float(b.l_rec) == 0.0
        assert float(b.l_null) == 0.0
        # one-hot mask prediction against itself: clamped BCE is ~0
        assert float(b.l_loc) < 1e-5

    def test_adversarial_closed_form_at_half(self):
        hp = HyperParams()
        b = compute_losses(**perfect_inputs(hp))
        assert abs(float(b.l_adv) - 2 * math.log(0.5)) < 1e-6

    def test_weighted_sum_arithmetic(self):
        hp = HyperParams(alpha=3.0)
        one = torch.tensor(1.0)
        zero = torch.tensor(0.0)
        total = assemble_total(l_prt=zero, l_rec=one, l_loc=zero, l_null=zero,
                               l_adv=zero, hp=hp)
        assert float(total) == 1.0

    def test_total_audit(self):
        hp = HyperParams()
        args = perfect_inputs(hp)
        args["x"] = args["x"] + 0.1
        args["i_hat"] = args["i_hat"] - 0.05
        b = compute_losses(**args)
        want = (float(b.l_rec) + hp.alpha * float(b.l_prt) + hp.beta * float(b.l_loc)
                + hp.gamma * float(b.l_null) + hp.omega * float(b.l_adv))
        assert abs(float(b.total) - want) < 1e-6

    def test_nan_aborts_with_diagnostics(self):
        hp = HyperParams()
        args = perfect_inputs(hp)
        args["x"] = args["x"] * float("nan")
        with pytest.raises(TrainingDivergedError) as err:
            compute_losses(**args)
        assert "l_prt" in str(err.value)

    def test_alpha_override(self):
        hp = HyperParams(alpha=3.0)
        args = perfect_inputs(hp)
        args["x"] = args["x"] + 0.2
        b0 = compute_losses(**args)
        args_a = dict(args, alpha=0.0)
        b1 = compute_losses(**args_a)
        assert float(b1.total) < float(b0.total)


class TestDiscriminatorLosses:
    def test_constant_half_gives_ln2(self):
        d = _ConstantD(0.5)
        i = torch.rand(2, 3, 16, 16)
        l_da, l_db = discriminator_losses(i, i, i, d, d)
        assert abs(float(l_da) - math.log(2)) < 1e-6
        assert abs(float(l_db) - math.log(2)) < 1e-6

    def test_perfect_discrimination_near_zero(self):
        class SplitD(torch.nn.Module):
            def forward(self, x):
                # "real" inputs are all > 0.5 in this test, fakes all < 0.5
                val = 1.0 - 1e-6 if float(x.mean()) > 0.5 else 1e-6
                return torch.full((x.shape[0], 1, 2, 2), val)

        d = SplitD()
        real = torch.full((1, 3, 8, 8), 0.9)
        fake = torch.full((1, 3, 8, 8), 0.1)
        l_da, _ = discriminator_losses(real, fake, fake, d, d)
        assert float(l_da) < 1e-5

    def test_symmetry_under_score_swap(self):
        # swapping real/fake scores with (1 - .) leaves the loss unchanged
        class FixedD(torch.nn.Module):
            def __init__(self, real_score, fake_score):
                super().__init__()
                self.scores = {True: real_score, False: fake_score}

            def forward(self, x):
                is_real = bool(x.mean() > 0.5)
                return torch.full((1, 1, 2, 2), self.scores[is_real])

        real = torch.full((1, 3, 8, 8), 0.9)
        fake = torch.full((1, 3, 8, 8), 0.1)
        a, _ = discriminator_losses(real, fake, fake, FixedD(0.7, 0.2), FixedD(0.7, 0.2))
        b, _ = discriminator_losses(real, fake, fake, FixedD(0.6, 0.4), FixedD(0.6, 0.4))
        c, _ = discriminator_losses(real, fake, fake, FixedD(1 - 0.2, 1 - 0.7),
                                    FixedD(1 - 0.2, 1 - 0.7))
        assert abs(float(a) - float(c)) < 1e-6
        assert abs(float(a) - float(b)) > 1e-3  # sanity: not constant


class TestPretamperAugment:
    def test_zero_rate_unchanged(self):
        batch = torch.stack([synth_image(i, 32) for i in range(4)])
        out, masks = pretamper_augment(batch, list(batch), 0.0, seed=1)
        assert torch.equal(out, batch)
        assert all(m is None for m in masks)

    def test_full_rate_all_masked(self):
        batch = torch.stack([synth_image(i, 32) for i in range(4)])
        donors = [synth_image(100, 32)]
        out, masks = pretamper_augment(batch, donors, 1.0, seed=2)
        assert all(m is not None for m in masks)
        for i, m in enumerate(masks):
            # outside the recorded mask the item is untouched
            assert torch.equal(out[i] * (1 - m), batch[i] * (1 - m))

    def test_bernoulli_statistics(self):
        batch = torch.stack([synth_image(0, 16)] * 1000)
        donors = [synth_image(5, 16)]
        _, masks = pretamper_augment(batch, donors, 0.15, seed=3)
        frac = sum(m is not None for m in masks) / len(masks)
        assert 0.12 <= frac <= 0.18

    def test_deterministic(self):
        batch = torch.stack([synth_image(i, 32) for i in range(4)])
        donors = [synth_image(50, 32)]
        a = pretamper_augment(batch, donors, 0.5, seed=9)
        b = pretamper_augment(batch, donors, 0.5, seed=9)
        assert torch.equal(a[0], b[0])


class TestAsymmetricBatch:
    def test_expansion_counts(self):
        kinds = sample_attack_kinds(64, 64, seed=0)
        for n in (1, 4):
            x = torch.stack([synth_image(i) for i in range(n)])
            groups = expand_batch_asymmetric(x, kinds)
            assert len(groups) == 6
            assert sum(len(g) for g in groups) == 6 * n

    def test_items_match_standalone_calls(self):
        kinds = sample_attack_kinds(64, 64, seed=1)
        x = torch.stack([synth_image(10 + i) for i in range(4)])
        groups = expand_batch_asymmetric(x, kinds)
        for group in groups:
            for i in range(len(group)):
                standalone, _ = postprocess(x[i], group.kind, group.params[i])
                assert torch.equal(group.images[i], standalone), group.kind

    def test_crop_group_shares_geometry(self):
        kinds = sample_attack_kinds(64, 64, seed=2)
        x = torch.stack([synth_image(20 + i) for i in range(3)])
        groups = expand_batch_asymmetric(x, kinds)
        crop_groups = [g for g in groups if g.kind == "crop"]
        assert len(crop_groups) == 1
        g = crop_groups[0]
        assert g.geometry is not None
        assert g.images.shape[-2:] == (g.geometry.height, g.geometry.width)


class TestScheduleAndGuard:
    def test_cosine_endpoints(self):
        opt = torch.optim.Adam([torch.nn.Parameter(torch.zeros(1))], lr=1e-4)
        sched = cosine_lr(opt, total_steps=100, floor=1e-6)
        assert opt.param_groups[0]["lr"] == pytest.approx(1e-4)
        for _ in range(100):
            sched.step()
        assert opt.param_groups[0]["lr"] == pytest.approx(1e-6)

    def test_guard_trips_on_sustained_blowup(self):
        guard = DivergenceGuard(factor=10.0, patience=5)
        for _ in range(50):
            guard.update(1.0)
        with pytest.raises(TrainingDivergedError):
            for _ in range(6):
                guard.update(100.0)

    def test_guard_resets_on_recovery(self):
        guard = DivergenceGuard(factor=10.0, patience=5)
        for _ in range(50):
            guard.update(1.0)
        for _ in range(3):
            guard.update(100.0)
        guard.update(1.0)
        for _ in range(3):
            guard.update(100.0)  # patience counter restarted, no raise

    def test_guard_rejects_nan(self):
        guard = DivergenceGuard()
        with pytest.raises(TrainingDivergedError):
            guard.update(float("nan"))


class TestMetricsLog:
    def test_rows_monotone_and_complete(self, tmp_path):
        log = MetricsLog(tmp_path / "m.csv")
        for step in range(3):
            log.append({"step": step, "stage": 1, "total": 0.5})
        import csv
        rows = list(csv.DictReader(open(tmp_path / "m.csv")))
        assert [int(r["step"]) for r in rows] == [0, 1, 2]
        assert "rec_jpeg" in rows[0]


@pytest.fixture(scope="module")
def tiny_trainer():
    images = [synth_image(i) for i in range(6)]
    kd = KDJpeg(base=8).eval()
    kd.requires_grad_(False)
    cfg = TrainerConfig(hp=HyperParams(batch_size=2), inn_hidden=8, detector_base=8,
                        d_a_ndf=8, d_b_base=8, seed=0)
    tr = PipelineTrainer(images, kd.student_simulator(), cfg)
    tr.init_schedulers(total_steps=10)
    return tr


class TestPipelineTrainer:
    def test_stage1_detector_and_inn_decoupled(self, tiny_trainer):
        tr = tiny_trainer
        det_before = [p.clone() for p in tr.detector.parameters()]
        inn_before = [p.clone() for p in tr.inn.parameters()]
        tr.train_stage1(1)
        det_moved = any(not torch.equal(a, b) for a, b in
                        zip(det_before, tr.detector.parameters()))
        inn_moved = any(not torch.equal(a, b) for a, b in
                        zip(inn_before, tr.inn.parameters()))
        assert det_moved and inn_moved

    def test_stage2_gradient_reaches_inn_through_rectification(self, tiny_trainer):
        tr = tiny_trainer
        tr.train_stage2(1)  # would raise if the joint graph were broken
        assert tr.stage == 2

    def test_bundle_totals_audit(self, tiny_trainer):
        tr = tiny_trainer
        tr.stage = 1
        b = tr.train_step()
        hp = tr.hp
        alpha = 0.0 if hp.stage1_alpha_zero_on == "prt" else hp.alpha
        want = (float(b.l_rec) + alpha * float(b.l_prt) + hp.beta * float(b.l_loc)
                + hp.gamma * float(b.l_null) + hp.omega * float(b.l_adv))
        assert abs(float(b.total) - want) < 1e-5

    def test_per_attack_breakdown_present(self, tiny_trainer):
        tr = tiny_trainer
        tr.stage = 1
        b = tr.train_step()
        assert set(b.per_attack) == set(tr.cfg.attack_kinds)

    def test_state_round_trip(self, tiny_trainer, tmp_path):
        tr = tiny_trainer
        state = tr.state_dict()
        torch.save(state, tmp_path / "s.pt")
        back = torch.load(tmp_path / "s.pt", weights_only=False)
        tr.load_state_dict(back)
        assert tr.step_count == state["step"]

    def test_empty_images_rejected(self):
        with pytest.raises(ValueError):
            PipelineTrainer([], None, TrainerConfig())

    def test_fixed_augmentation_masks_reused_bitwise(self, tiny_trainer):
        # a recorded pre-tampering mask must be the attack-time tamper mask
        from imshield.attacks import MaskSpec, generate_freeform_mask
        from imshield.imaging import quantize_8bit
        tr = tiny_trainer
        fixed = [generate_freeform_mask(64, 64, MaskSpec(target_rate=0.2), seed=s)
                 for s in (11, 12)]
        x_q = quantize_8bit(torch.stack(tr.images[:2]))
        rng = np.random.default_rng(0)
        _, masks = tr._tamper_items(x_q, fixed, rng)
        for recorded, used in zip(fixed, masks):
            assert torch.equal(recorded, used)
