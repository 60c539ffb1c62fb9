"""Latent diffusion: schedules, forward noising, DDIM sampling, training.

Schedule anchors were frozen from the defining formulas computed standalone:
cosine uses f(t) = cos^2(((t/K + s)/(1 + s)) * pi/2) with s = 0.008, betas
1 - f(t+1)/f(t) clipped at 0.999, and cumulative products rebuilt from the
clipped betas; linear uses betas evenly spaced from 0.1/K to 20/K.
"""
import numpy as np
import pytest

from discrete_policy.autodiff import RngStream, init_adam
from discrete_policy.diffusion import (
    DiffusionConfig,
    add_noise,
    add_noise_batch,
    build_schedule,
    ddim_sample,
    ddim_step_indices,
    ddim_update,
    init_noise_predictor,
    predict_noise,
    predict_x0,
    stage2_train_step,
)

# frozen anchors for K = 100
COS_BETA_0 = 0.00063128159834169306
COS_BETA_50 = 0.031546339360725928
COS_AB_1 = 0.99936871840165831
COS_AB_50 = 0.49384359044063775
COS_AB_100 = 2.4285722793500615e-07
LIN_AB_100 = 2.0390089755640779e-05


def _rel(a, b):
    return abs(a - b) / max(1.0, abs(b))


class TestSchedules:
    def test_cosine_frozen_anchors(self):
        sch = build_schedule("cosine", 100)
        assert sch.alpha_bars[0] == 1.0
        assert sch.betas.shape == (100,)
        assert sch.alpha_bars.shape == (101,)
        assert _rel(sch.betas[0], COS_BETA_0) < 1e-14
        assert _rel(sch.betas[50], COS_BETA_50) < 1e-14
        assert sch.betas[99] == 0.999  # the only clipped entry at K = 100
        assert _rel(sch.alpha_bars[1], COS_AB_1) < 1e-14
        assert _rel(sch.alpha_bars[50], COS_AB_50) < 1e-14
        assert abs(sch.alpha_bars[100] - COS_AB_100) / COS_AB_100 < 1e-12

    def test_linear_frozen_anchors(self):
        sch = build_schedule("linear", 100)
        assert sch.betas[0] == 0.001
        assert sch.betas[-1] == 0.2
        assert sch.alpha_bars[1] == 0.999
        assert abs(sch.alpha_bars[100] - LIN_AB_100) / LIN_AB_100 < 1e-12

    @pytest.mark.parametrize("kind", ["cosine", "linear"])
    @pytest.mark.parametrize("k_steps", [10, 100, 250])
    def test_alpha_bars_decrease_strictly_from_one(self, kind, k_steps):
        sch = build_schedule(kind, k_steps)
        assert sch.alpha_bars[0] == 1.0
        assert np.all(np.diff(sch.alpha_bars) < 0)
        assert np.all(sch.alpha_bars > 0)
        assert np.all(sch.betas > 0) and np.all(sch.betas <= 0.999)
        assert np.allclose(sch.alphas, 1.0 - sch.betas)

    def test_alpha_bar_indexing_skips_the_anchor(self):
        sch = build_schedule("cosine", 100)
        for k in (0, 1, 37, 99):
            assert sch.alpha_bar(k) == sch.alpha_bars[k + 1]
        assert sch.alpha_bar(0) == 1.0 - sch.betas[0]

    def test_bad_arguments(self):
        with pytest.raises(ValueError):
            build_schedule("cubic", 100)
        with pytest.raises(ValueError):
            build_schedule("cosine", 0)


class TestRetainedSteps:
    def test_frozen_index_sets(self):
        assert ddim_step_indices(100, 10).tolist() == [0, 11, 22, 33, 44, 55, 66, 77, 88, 99]
        assert ddim_step_indices(100, 4).tolist() == [0, 33, 66, 99]

    def test_single_step_keeps_the_noisiest(self):
        assert ddim_step_indices(100, 1).tolist() == [99]

    def test_full_grid_is_identity(self):
        assert ddim_step_indices(100, 100).tolist() == list(range(100))

    def test_bounds(self):
        with pytest.raises(ValueError):
            ddim_step_indices(100, 0)
        with pytest.raises(ValueError):
            ddim_step_indices(100, 101)


class TestForwardNoising:
    def test_zero_noise_scales_by_sqrt_alpha_bar(self):
        sch = build_schedule("cosine", 100)
        z0 = RngStream(3).normal((6,))
        for k in (0, 40, 99):
            out = add_noise(sch, z0, np.zeros(6), k)
            assert np.array_equal(out, np.sqrt(sch.alpha_bar(k)) * z0)

    def test_zero_signal_scales_by_sqrt_one_minus(self):
        sch = build_schedule("cosine", 100)
        eps = RngStream(4).normal((6,))
        out = add_noise(sch, np.zeros(6), eps, 70)
        assert np.array_equal(out, np.sqrt(1.0 - sch.alpha_bar(70)) * eps)

    def test_coefficients_preserve_variance(self):
        sch = build_schedule("linear", 100)
        for k in range(100):
            ab = sch.alpha_bar(k)
            assert abs(ab + (1.0 - ab) - 1.0) < 1e-15

    def test_batch_matches_single(self):
        sch = build_schedule("cosine", 100)
        rng = RngStream(5)
        z0 = rng.normal((4, 8))
        eps = rng.normal((4, 8))
        ks = np.array([0, 13, 77, 99])
        batched = add_noise_batch(sch, z0, eps, ks)
        for i in range(4):
            assert np.array_equal(batched[i], add_noise(sch, z0[i], eps[i], int(ks[i])))

    def test_x0_extraction_inverts_noising(self):
        sch = build_schedule("cosine", 100)
        rng = RngStream(6)
        z0 = rng.normal((8,))
        eps = rng.normal((8,))
        for k in (0, 25, 99):
            z_k = add_noise(sch, z0, eps, k)
            back = predict_x0(z_k, eps, sch.alpha_bar(k))
            assert np.max(np.abs(back - z0)) < 1e-10


def _tiny_config(**over):
    base = dict(latent_dim=16, obs_dim=5, slot_embed_dim=4, time_embed_dim=8,
                hidden_dim=32, num_blocks=2, num_steps=20, sample_steps=5)
    base.update(over)
    return DiffusionConfig(**base)


def _cond(rng, n):
    obs = rng.uniform((n, 5))
    ids = rng.integers(0, 64, (n,))
    return obs, ids


class TestDdim:
    def test_predictor_is_exactly_zero_at_init(self):
        cfg = _tiny_config()
        model = init_noise_predictor(cfg, RngStream(9))
        rng = RngStream(10)
        obs, ids = _cond(rng, 3)
        out = predict_noise(model, rng.normal((3, 16)), np.array([0, 5, 19]), obs, ids)
        assert np.array_equal(out.data, np.zeros((3, 16)))

    def test_zero_predictor_closed_form(self):
        # with eps_hat identically zero every DDIM transition rescales by
        # sqrt(ab_prev / ab_k), telescoping to 1 / sqrt(alpha_bar(K - 1))
        for sample_steps in (10, 4):
            cfg = DiffusionConfig(latent_dim=16, obs_dim=5, slot_embed_dim=4,
                                  time_embed_dim=8, hidden_dim=32, num_blocks=2,
                                  num_steps=100, sample_steps=sample_steps)
            model = init_noise_predictor(cfg, RngStream(9))
            sch = build_schedule(cfg.schedule, cfg.num_steps)
            rng = RngStream(11)
            obs, ids = _cond(rng, 4)
            z_init = rng.normal((4, 16))
            out = ddim_sample(model, sch, obs, ids, z_init=z_init)
            expected = z_init / np.sqrt(sch.alpha_bar(99))
            assert np.max(np.abs(out - expected) / np.abs(expected)) < 1e-12

    def test_one_step_update_with_true_noise_recovers_z0(self):
        sch = build_schedule("cosine", 100)
        rng = RngStream(12)
        z0 = rng.normal((5, 16))
        eps = rng.normal((5, 16))
        z_k = add_noise_batch(sch, z0, eps, np.full(5, 99))
        out = ddim_update(z_k, eps, sch.alpha_bar(99), 1.0, 0.0)
        assert np.max(np.abs(out - z0)) < 1e-6

    def test_eta_zero_needs_no_rng_and_is_deterministic(self):
        cfg = _tiny_config()
        model = init_noise_predictor(cfg, RngStream(13))
        sch = build_schedule(cfg.schedule, cfg.num_steps)
        obs, ids = _cond(RngStream(14), 3)
        z_init = RngStream(15).normal((3, 16))
        a = ddim_sample(model, sch, obs, ids, z_init=z_init)
        b = ddim_sample(model, sch, obs, ids, z_init=z_init)
        assert np.array_equal(a, b)

    def test_missing_z_init_draws_from_rng(self):
        cfg = _tiny_config()
        model = init_noise_predictor(cfg, RngStream(16))
        sch = build_schedule(cfg.schedule, cfg.num_steps)
        obs, ids = _cond(RngStream(17), 3)
        a = ddim_sample(model, sch, obs, ids, rng=RngStream(18))
        b = ddim_sample(model, sch, obs, ids, rng=RngStream(18))
        c = ddim_sample(model, sch, obs, ids, rng=RngStream(19))
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)
        with pytest.raises(ValueError):
            ddim_sample(model, sch, obs, ids)  # no z_init and no rng

    def test_eta_one_injects_noise(self):
        cfg = _tiny_config(eta=1.0)
        model = init_noise_predictor(cfg, RngStream(20))
        sch = build_schedule(cfg.schedule, cfg.num_steps)
        obs, ids = _cond(RngStream(21), 3)
        z_init = RngStream(22).normal((3, 16))
        a = ddim_sample(model, sch, obs, ids, z_init=z_init, rng=RngStream(23), eta=1.0)
        b = ddim_sample(model, sch, obs, ids, z_init=z_init, rng=RngStream(24), eta=1.0)
        assert not np.array_equal(a, b)


class TestStage2Training:
    def test_loss_decreases_on_fixed_batch(self):
        cfg = _tiny_config()
        model = init_noise_predictor(cfg, RngStream(30))
        sch = build_schedule(cfg.schedule, cfg.num_steps)
        rng = RngStream(31)
        z0 = rng.normal((32, 16))
        obs, ids = _cond(rng, 32)
        names = sorted(model.params)
        adam = init_adam([model.params[n] for n in names])
        losses = []
        for step in range(200):
            losses.append(stage2_train_step(model, sch, z0, obs, ids, names, adam,
                                            lr=2e-3, rng=rng.derive_child(step)))
        assert np.mean(losses[-20:]) < 0.6 * np.mean(losses[:5])

    def test_first_loss_is_unit_noise_mse(self):
        # zero predictor means the first loss is just mean(eps^2), close to 1
        cfg = _tiny_config(latent_dim=64)
        model = init_noise_predictor(cfg, RngStream(32))
        sch = build_schedule(cfg.schedule, cfg.num_steps)
        rng = RngStream(33)
        z0 = rng.normal((64, 64))
        obs, ids = _cond(rng, 64)
        names = sorted(model.params)
        adam = init_adam([model.params[n] for n in names])
        loss = stage2_train_step(model, sch, z0, obs, ids, names, adam,
                                 lr=0.0, rng=RngStream(34))
        assert abs(loss - 1.0) < 0.1

    def test_conditioning_reaches_the_output(self):
        cfg = _tiny_config()
        model = init_noise_predictor(cfg, RngStream(35))
        sch = build_schedule(cfg.schedule, cfg.num_steps)
        rng = RngStream(36)
        z0 = rng.normal((8, 16))
        obs, ids = _cond(rng, 8)
        names = sorted(model.params)
        adam = init_adam([model.params[n] for n in names])
        for step in range(5):
            stage2_train_step(model, sch, z0, obs, ids, names, adam, lr=1e-3,
                              rng=rng.derive_child(step))
        z = rng.normal((1, 16))
        same = dict(ks=np.array([5]), obs=np.zeros((1, 5)))
        a = predict_noise(model, z, same["ks"], same["obs"], np.array([0])).data
        b = predict_noise(model, z, same["ks"], same["obs"], np.array([63])).data
        assert not np.array_equal(a, b)

    def test_timestep_reaches_the_output(self):
        cfg = _tiny_config()
        model = init_noise_predictor(cfg, RngStream(37))
        sch = build_schedule(cfg.schedule, cfg.num_steps)
        rng = RngStream(38)
        z0 = rng.normal((8, 16))
        obs, ids = _cond(rng, 8)
        names = sorted(model.params)
        adam = init_adam([model.params[n] for n in names])
        for step in range(5):
            stage2_train_step(model, sch, z0, obs, ids, names, adam, lr=1e-3,
                              rng=rng.derive_child(step))
        z = rng.normal((1, 16))
        a = predict_noise(model, z, np.array([0]), np.zeros((1, 5)), np.array([7])).data
        b = predict_noise(model, z, np.array([19]), np.zeros((1, 5)), np.array([7])).data
        assert not np.array_equal(a, b)
