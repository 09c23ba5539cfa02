import numpy as np
import pytest
import torch

from voxcomplete import torchloss
from voxcomplete.errors import EmptyTarget, NonPositiveSigma, SpecMismatch
from voxcomplete.grids import GridSpec, ProbGrid, VoxelGrid, rasterize_cuboid, sample_dissection
from voxcomplete.losses import (
    LossConfig,
    PosteriorParams,
    TargetSet,
    WeightField,
    build_target_set,
    build_weight_field,
    conformity,
    conformity_weighted_mean,
    dice_target_loss,
    dice_whole_loss,
    kl_to_standard_normal,
    reduction_check,
    soft_dice,
    target_weighted_loss,
    vw_dice_array,
    vw_dice_loss,
)

from conftest import central_diff, random_blob, random_grid, rel_err


def _dissected(spec, seed=0):
    rng = np.random.default_rng(seed)
    s = random_blob(spec, rng, radius_frac=0.3 if spec.c >= 16 else 0.22)
    cuboid, x, y = sample_dissection(s, seed + 100)
    b = rasterize_cuboid(cuboid, spec)
    return s, b, x, y


class TestSoftDice:
    def test_identity_near_one(self, spec8):
        rng = np.random.default_rng(0)
        t = random_grid(spec8, rng)
        p = ProbGrid(spec8, t.data.astype(np.float64))
        n = t.count
        assert soft_dice(p, t, eps=1e-6) == pytest.approx(2 * n / (2 * n + 1e-6))

    def test_disjoint_zero(self, spec8):
        data = np.zeros((8, 8, 8))
        data[0, 0, 0] = 1.0
        t = np.zeros((8, 8, 8), dtype=np.uint8)
        t[7, 7, 7] = 1
        assert soft_dice(ProbGrid(spec8, data), VoxelGrid(spec8, t)) == pytest.approx(0.0)

    def test_uniform_half_over_support(self, spec8):
        rng = np.random.default_rng(1)
        t = random_grid(spec8, rng)
        p = ProbGrid(spec8, 0.5 * t.data.astype(np.float64))
        assert soft_dice(p, t, eps=0.0) == pytest.approx(2.0 / 3.0)

    def test_spec_mismatch(self, spec8, spec16):
        with pytest.raises(SpecMismatch):
            soft_dice(ProbGrid(spec8, np.zeros((8, 8, 8))), VoxelGrid.ones(spec16))


class TestWeightField:
    def test_inside_mask_is_one(self, spec16):
        _, b, _, y = _dissected(spec16, seed=3)
        w = build_weight_field(b, y, LossConfig())
        assert np.all(w.data[b.data == 1] == 1.0)

    def test_gaussian_value_at_sigma(self):
        spec = GridSpec(24)
        cfg = LossConfig()
        data = np.zeros((24, 24, 24), dtype=np.uint8)
        data[12, 12, 12] = 1
        y = VoxelGrid(spec, data)
        b = VoxelGrid(spec, data)  # mask = the single voxel
        w = build_weight_field(b, y, cfg)
        sigma = cfg.sigma_w_frac * 24
        vox = (12 + int(sigma), 12, 12)
        d2 = (vox[0] - 12) ** 2
        assert w.data[vox] == pytest.approx(np.exp(-d2 / (2 * sigma**2)))
        # exact sigma distance (non-lattice): check formula directly
        assert np.exp(-(sigma**2) / (2 * sigma**2)) == pytest.approx(0.6065, abs=1e-4)

    def test_monotone_in_distance_outside_mask(self, spec16):
        _, b, _, y = _dissected(spec16, seed=4)
        w = build_weight_field(b, y, LossConfig())
        outside = b.data == 0
        pts = spec16.voxel_centers()
        d2 = ((pts - w.center) ** 2).sum(axis=-1)
        dist = np.sqrt(d2[outside])
        vals = w.data[outside]
        order = np.argsort(dist)
        assert np.all(np.diff(vals[order]) <= 1e-12)

    def test_values_in_unit_interval(self, spec16):
        _, b, _, y = _dissected(spec16, seed=5)
        w = build_weight_field(b, y, LossConfig())
        assert w.data.min() > 0.0
        assert w.data.max() <= 1.0

    def test_empty_target_rejected(self, spec8):
        with pytest.raises(EmptyTarget):
            build_weight_field(
                VoxelGrid.ones(spec8), VoxelGrid.zeros(spec8), LossConfig()
            )

    def test_joint_translation_moves_field(self):
        spec = GridSpec(16)
        _, b, x, y = _dissected(spec, seed=6)
        shift = (1, 2, 0)
        w0 = build_weight_field(b, y, LossConfig())
        b2 = VoxelGrid(spec, np.roll(b.data, shift, axis=(0, 1, 2)))
        y2 = VoxelGrid(spec, np.roll(y.data, shift, axis=(0, 1, 2)))
        # interior support: rolling must not wrap any set voxel
        assert b2.count == b.count and y2.count == y.count
        w2 = build_weight_field(b2, y2, LossConfig())
        assert np.allclose(
            np.roll(w0.data, shift, axis=(0, 1, 2))[2:-2, 2:-2, 2:-2],
            w2.data[2:-2, 2:-2, 2:-2],
        )


class TestVwDice:
    def test_perfect_prediction_near_zero(self, spec16):
        _, b, x, y = _dissected(spec16, seed=7)
        w = build_weight_field(b, y, LossConfig())
        p = ProbGrid(spec16, (x.data + y.data).astype(np.float64))
        loss, _ = vw_dice_loss(x, y, p, w)
        assert loss == pytest.approx(0.0, abs=1e-6)

    def test_zero_prediction_is_one(self, spec16):
        _, b, x, y = _dissected(spec16, seed=8)
        w = build_weight_field(b, y, LossConfig())
        p = ProbGrid(spec16, np.zeros((16, 16, 16)))
        loss, _ = vw_dice_loss(x, y, p, w)
        assert loss == pytest.approx(1.0, abs=1e-9)

    def test_loss_in_unit_interval(self, spec8):
        rng = np.random.default_rng(9)
        for seed in range(5):
            _, b, x, y = _dissected(spec8, seed=seed)
            w = build_weight_field(b, y, LossConfig())
            p = ProbGrid(spec8, rng.random((8, 8, 8)))
            loss, _ = vw_dice_loss(x, y, p, w)
            assert 0.0 <= loss <= 1.0 + 1e-9

    def test_gradient_matches_finite_differences(self, spec8):
        rng = np.random.default_rng(10)
        worst = 0.0
        for seed in range(10):
            _, b, x, y = _dissected(spec8, seed=seed)
            w = build_weight_field(b, y, LossConfig())
            p = rng.random((8, 8, 8))
            t = (x.data + y.data).astype(np.float64)
            _, grad = vw_dice_array(p, t, w.data, 1e-6)
            fd = central_diff(lambda q: vw_dice_array(q, t, w.data, 1e-6)[0], p)
            worst = max(worst, rel_err(grad, fd, floor=1e-6))
        assert worst < 1e-5

    def test_overlap_rejected(self, spec8):
        g = VoxelGrid.ones(spec8)
        w = WeightField(spec8, np.ones((8, 8, 8)), 1.0, spec8.center)
        with pytest.raises(ValueError):
            vw_dice_loss(g, g, ProbGrid(spec8, np.zeros((8, 8, 8))), w)


class TestReduction:
    def test_all_ones_field_reduces_to_plain_dice(self, spec8):
        rng = np.random.default_rng(11)
        for seed in range(10):
            _, b, x, y = _dissected(spec8, seed=seed)
            p = ProbGrid(spec8, rng.random((8, 8, 8)))
            assert reduction_check(x, y, p) <= 1e-12

    def test_baselines_coincide_when_mask_covers_grid(self, spec8):
        rng = np.random.default_rng(12)
        s = random_blob(spec8, rng)
        full = VoxelGrid.ones(spec8)
        x = VoxelGrid.zeros(spec8)
        y = s
        p = ProbGrid(spec8, rng.random((8, 8, 8)))
        lw, _ = dice_whole_loss(p, x, y)
        lt, _ = dice_target_loss(p, y, full)
        w = build_weight_field(full, y, LossConfig())
        lv, _ = vw_dice_loss(x, y, p, w)
        assert lw == pytest.approx(lt, rel=1e-12)
        assert lw == pytest.approx(lv, rel=1e-12)

    def test_target_loss_gradient(self, spec8):
        rng = np.random.default_rng(13)
        _, b, x, y = _dissected(spec8, seed=20)
        p = rng.random((8, 8, 8))
        from voxcomplete.losses import masked_dice_array

        _, grad = masked_dice_array(p, y.data.astype(float), b.data.astype(float), 1e-6)
        fd = central_diff(
            lambda q: masked_dice_array(
                q, y.data.astype(float), b.data.astype(float), 1e-6
            )[0],
            p,
        )
        assert rel_err(grad, fd, floor=1e-6) < 1e-5


class TestConformity:
    def test_self_is_one(self, spec8):
        rng = np.random.default_rng(14)
        g = random_grid(spec8, rng)
        assert conformity(g, g) == 1.0

    def test_disjoint_zero(self, spec8):
        data_a = np.zeros((8, 8, 8), dtype=np.uint8)
        data_a[0, 0, 0] = 1
        data_b = np.zeros((8, 8, 8), dtype=np.uint8)
        data_b[1, 1, 1] = 1
        assert conformity(VoxelGrid(spec8, data_a), VoxelGrid(spec8, data_b)) == 0.0

    def test_half_overlap(self, spec8):
        a = np.zeros((8, 8, 8), dtype=np.uint8)
        b = np.zeros((8, 8, 8), dtype=np.uint8)
        a[0, 0, 0] = a[0, 0, 1] = 1
        b[0, 0, 1] = b[0, 0, 2] = 1
        assert conformity(VoxelGrid(spec8, a), VoxelGrid(spec8, b)) == 0.5

    def test_symmetric(self, spec8):
        rng = np.random.default_rng(15)
        a = random_grid(spec8, rng)
        b = random_grid(spec8, rng)
        assert conformity(a, b) == conformity(b, a)

    def test_both_empty(self, spec8):
        assert conformity(VoxelGrid.zeros(spec8), VoxelGrid.zeros(spec8)) == 1.0


class TestTargetSet:
    def test_m_zero(self, spec16):
        _, b, x, y = _dissected(spec16, seed=16)
        rng = np.random.default_rng(0)
        tset = build_target_set([], b, y, 0, rng)
        assert tset.m == 0
        assert tset.conformities.tolist() == [1.0]

    def test_donor_equal_to_source(self, spec16):
        s, b, x, y = _dissected(spec16, seed=17)
        rng = np.random.default_rng(1)
        tset = build_target_set([s], b, y, 1, rng)
        assert tset.m == 1
        assert tset.conformities[1] == pytest.approx(1.0)

    def test_conformities_in_range_and_deterministic(self, spec16):
        rng_shapes = np.random.default_rng(2)
        donors = [random_blob(spec16, rng_shapes) for _ in range(6)]
        s, b, x, y = _dissected(spec16, seed=18)
        t1 = build_target_set(donors, b, y, 3, np.random.default_rng(5))
        t2 = build_target_set(donors, b, y, 3, np.random.default_rng(5))
        assert np.array_equal(t1.conformities, t2.conformities)
        assert np.all(t1.conformities >= 0) and np.all(t1.conformities <= 1)
        for a, bb in zip(t1.targets, t2.targets):
            assert np.array_equal(a.data, bb.data)

    def test_targets_confined_to_mask(self, spec16):
        rng_shapes = np.random.default_rng(3)
        donors = [random_blob(spec16, rng_shapes) for _ in range(4)]
        s, b, x, y = _dissected(spec16, seed=19)
        tset = build_target_set(donors, b, y, 2, np.random.default_rng(7))
        for t in tset.targets[1:]:
            assert int((t.data & (1 - b.data)).sum()) == 0

    def test_validation(self, spec8):
        with pytest.raises(ValueError):
            TargetSet([VoxelGrid.zeros(spec8)], np.array([0.5]))


class TestKl:
    def test_standard_normal_is_zero(self):
        q = PosteriorParams(np.zeros(4), np.ones(4))
        kl, _ = kl_to_standard_normal(q)
        assert kl == pytest.approx(0.0)

    def test_unit_mean_shift(self):
        q = PosteriorParams(np.array([1.0, 0.0, 0.0]), np.ones(3))
        kl, _ = kl_to_standard_normal(q)
        assert kl == pytest.approx(0.5)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(20)
        for _ in range(20):
            mu = rng.normal(size=6)
            sigma = rng.uniform(0.3, 2.5, size=6)
            _, (gmu, gsigma) = kl_to_standard_normal(PosteriorParams(mu, sigma))
            from voxcomplete.losses import kl_std_normal_array

            fd_mu = central_diff(lambda m: kl_std_normal_array(m, sigma)[0], mu.copy())
            fd_sigma = central_diff(
                lambda s: kl_std_normal_array(mu, s)[0], sigma.copy()
            )
            assert rel_err(gmu, fd_mu, floor=1e-7) < 1e-6
            assert rel_err(gsigma, fd_sigma, floor=1e-7) < 1e-6

    def test_nonpositive_sigma_rejected(self):
        with pytest.raises(NonPositiveSigma):
            PosteriorParams(np.zeros(2), np.array([1.0, 0.0]))


class TestTargetWeighted:
    def _setup(self, spec, m, seed):
        rng = np.random.default_rng(seed)
        donors = [random_blob(spec, rng) for _ in range(5)]
        s, b, x, y = _dissected(spec, seed=seed)
        cfg = LossConfig(m=m)
        tset = build_target_set(donors, b, y, m, rng)
        w_fields = [build_weight_field(b, t, cfg) for t in tset.targets]
        preds = [ProbGrid(spec, rng.random((spec.c,) * 3)) for _ in tset.targets]
        posts = [
            PosteriorParams(rng.normal(size=4), rng.uniform(0.5, 2, size=4))
            for _ in tset.targets
        ]
        return x, preds, tset, posts, w_fields, cfg

    def test_single_target_degenerates(self, spec16):
        x, preds, tset, posts, w_fields, cfg = self._setup(spec16, 0, 21)
        total = target_weighted_loss(x, preds, tset, posts, w_fields, cfg)
        base, _ = vw_dice_loss(x, tset.targets[0], preds[0], w_fields[0], cfg.smooth_eps)
        kl, _ = kl_to_standard_normal(posts[0])
        assert total == pytest.approx(base + cfg.gamma * kl)

    def test_uniform_conformities_give_plain_mean(self, spec16):
        x, preds, tset, posts, w_fields, cfg = self._setup(spec16, 2, 22)
        uniform = TargetSet(tset.targets, np.ones(len(tset.targets)))
        total = target_weighted_loss(x, preds, uniform, posts, w_fields, cfg)
        losses = [
            vw_dice_loss(x, t, p, w, cfg.smooth_eps)[0]
            for t, p, w in zip(uniform.targets, preds, w_fields)
        ]
        kls = [kl_to_standard_normal(q)[0] for q in posts]
        assert total == pytest.approx(np.mean(losses) + cfg.gamma * np.mean(kls))

    def test_normalization_is_scale_invariant(self):
        rng = np.random.default_rng(23)
        values = rng.random(4)
        lams = rng.uniform(0.1, 1.0, size=4)
        a = conformity_weighted_mean(values, lams)
        b = conformity_weighted_mean(values, 2.0 * lams)
        assert a == pytest.approx(b, rel=1e-12)


class TestTorchBridge:
    def test_vw_dice_matches_numpy_and_backward(self, spec8):
        rng = np.random.default_rng(24)
        _, b, x, y = _dissected(spec8, seed=24)
        w = build_weight_field(b, y, LossConfig())
        p_np = rng.random((8, 8, 8))
        t_np = (x.data + y.data).astype(np.float64)
        loss_np, grad_np = vw_dice_array(p_np, t_np, w.data, 1e-6)
        p = torch.tensor(p_np, requires_grad=True)
        loss_t = torchloss.vw_dice(
            p, torch.tensor(t_np), torch.tensor(w.data.copy()), 1e-6
        )
        assert loss_t.detach().item() == pytest.approx(loss_np, rel=1e-12)
        (2.0 * loss_t).backward()
        assert np.allclose(p.grad.numpy(), 2.0 * grad_np)

    def test_kl_matches_numpy_and_backward(self):
        rng = np.random.default_rng(25)
        mu_np = rng.normal(size=5)
        sigma_np = rng.uniform(0.4, 2.0, size=5)
        from voxcomplete.losses import kl_std_normal_array

        kl_np, gmu, gsig = kl_std_normal_array(mu_np, sigma_np)
        mu = torch.tensor(mu_np, requires_grad=True)
        sigma = torch.tensor(sigma_np, requires_grad=True)
        kl = torchloss.kl_std_normal(mu, sigma)
        assert kl.detach().item() == pytest.approx(kl_np, rel=1e-12)
        kl.backward()
        assert np.allclose(mu.grad.numpy(), gmu)
        assert np.allclose(sigma.grad.numpy(), gsig)
