"""Schedule, forward process, mask semantics, loss, and reverse sampling."""

import warnings

import numpy as np
import pytest

import raysfm.denoiser
from raysfm.denoiser import TrainConfig, init_params
from raysfm.diffusion import (
    DiffusionState,
    NoiseSchedule,
    forward_diffuse,
    make_schedule,
    mask_condition,
    reverse_sample,
    sampling_timesteps,
    x0_loss,
)
from raysfm.errors import InvalidInputError, InvalidModelError


def make_state(rng, n=2, h=4, w=4, valid_frac=1.0, t=0):
    s = rng.standard_normal((n, h, w, 8))
    mask = rng.uniform(size=(n, h, w)) < valid_frac
    return DiffusionState(s=s, t=t, mask=mask)


class TestSchedule:
    def test_endpoints_exact(self):
        sched = make_schedule(100)
        assert sched.alpha_bar[0] == 1.0
        assert sched.alpha_bar[100] == 0.0
        assert len(sched.alpha_bar) == 101

    def test_strictly_decreasing(self):
        sched = make_schedule(100)
        assert np.all(np.diff(sched.alpha_bar) < 0)

    @pytest.mark.parametrize("T", [2, 10, 500])
    def test_various_lengths(self, T):
        sched = make_schedule(T)
        assert sched.alpha_bar[0] == 1.0 and sched.alpha_bar[T] == 0.0
        assert np.all(np.diff(sched.alpha_bar) < 0)

    def test_too_short_rejected(self):
        with pytest.raises(InvalidInputError):
            make_schedule(1)

    def test_json_round_trip(self):
        sched = make_schedule(50)
        back = NoiseSchedule.from_json(sched.to_json())
        assert back.T == 50
        np.testing.assert_array_equal(back.alpha_bar, sched.alpha_bar)

    def test_invariants_enforced_on_construction(self):
        with pytest.raises(InvalidInputError):
            NoiseSchedule(alpha_bar=np.array([1.0, 0.5, 0.1]), T=2)  # last != 0
        with pytest.raises(InvalidInputError):
            NoiseSchedule(alpha_bar=np.array([0.9, 0.5, 0.0]), T=2)  # first != 1
        with pytest.raises(InvalidInputError):
            NoiseSchedule(alpha_bar=np.array([1.0, 0.5, 0.5, 0.0]), T=3)  # not strict


class TestForwardDiffuse:
    def test_terminal_step_is_pure_noise(self, rng):
        sched = make_schedule(100)
        s0 = make_state(rng)
        eps = rng.standard_normal(s0.s.shape)
        st = forward_diffuse(s0, 100, eps, sched)
        np.testing.assert_array_equal(st.s, eps)
        assert st.t == 100

    def test_hand_computed_quarter_alpha(self, rng):
        # alpha_bar = 0.25: 0.5 * s0 + sqrt(0.75) * eps, checked element-wise.
        sched = NoiseSchedule(alpha_bar=np.array([1.0, 0.25, 0.0]), T=2)
        s0 = DiffusionState(s=np.ones((1, 2, 2, 8)), t=0, mask=np.ones((1, 2, 2), bool))
        eps = np.full((1, 2, 2, 8), 2.0)
        st = forward_diffuse(s0, 1, eps, sched)
        np.testing.assert_allclose(st.s, 0.5 * 1.0 + np.sqrt(0.75) * 2.0, rtol=1e-15)

    def test_matches_formula_at_random_t(self, rng):
        sched = make_schedule(100)
        s0 = make_state(rng)
        eps = rng.standard_normal(s0.s.shape)
        t = int(rng.integers(1, 101))
        st = forward_diffuse(s0, t, eps, sched)
        ab = sched.alpha_bar[t]
        np.testing.assert_allclose(st.s, np.sqrt(ab) * s0.s + np.sqrt(1 - ab) * eps, rtol=1e-15)

    def test_mask_unchanged(self, rng):
        sched = make_schedule(10)
        s0 = make_state(rng, valid_frac=0.5)
        st = forward_diffuse(s0, 5, np.zeros(s0.s.shape), sched)
        np.testing.assert_array_equal(st.mask, s0.mask)

    def test_shape_mismatch_rejected(self, rng):
        sched = make_schedule(10)
        s0 = make_state(rng)
        with pytest.raises(InvalidInputError):
            forward_diffuse(s0, 5, np.zeros((1, 1, 1, 8)), sched)

    def test_t_out_of_range(self, rng):
        sched = make_schedule(10)
        s0 = make_state(rng)
        eps = np.zeros(s0.s.shape)
        for t in (0, 11, -3):
            with pytest.raises(InvalidInputError):
                forward_diffuse(s0, t, eps, sched)

    def test_requires_clean_state(self, rng):
        sched = make_schedule(10)
        s5 = make_state(rng, t=5)
        with pytest.raises(InvalidInputError):
            forward_diffuse(s5, 6, np.zeros(s5.s.shape), sched)

    def test_marginal_statistics(self, rng):
        # Light Monte Carlo version of the acceptance check: mean and variance
        # of the forward marginal at a mid schedule step.
        sched = make_schedule(100)
        t = 50
        ab = sched.alpha_bar[t]
        s0_val = 0.7
        n = 200_000
        draws = np.sqrt(ab) * s0_val + np.sqrt(1 - ab) * rng.standard_normal(n)
        assert np.mean(draws) == pytest.approx(np.sqrt(ab) * s0_val, abs=3 * np.sqrt((1 - ab) / n))
        assert np.var(draws) == pytest.approx(1 - ab, rel=0.02)


class TestMaskCondition:
    def test_all_ones(self, rng):
        st = make_state(rng, t=3)
        cond = mask_condition(st)
        assert cond.shape == st.s.shape[:3] + (9,)
        np.testing.assert_array_equal(cond[..., :8], st.s)
        np.testing.assert_array_equal(cond[..., 8], 1.0)

    def test_all_zeros(self, rng):
        s = rng.standard_normal((2, 4, 4, 8))
        st = DiffusionState(s=s, t=3, mask=np.zeros((2, 4, 4), bool))
        cond = mask_condition(st)
        np.testing.assert_array_equal(cond, 0.0)

    def test_checkerboard(self, rng):
        s = rng.standard_normal((1, 4, 4, 8))
        mask = np.indices((4, 4)).sum(axis=0) % 2 == 0
        st = DiffusionState(s=s, t=1, mask=mask[None])
        cond = mask_condition(st)
        np.testing.assert_array_equal(cond[0][mask][:, :8], s[0][mask])
        np.testing.assert_array_equal(cond[0][~mask], 0.0)

    def test_masked_values_cannot_leak(self, rng):
        # Bit-exact: perturbing S at masked pixels changes nothing at unmasked
        # positions (the masked cells are zeroed in the output).
        st = make_state(rng, valid_frac=0.5, t=2)
        perturbed = st.s.copy()
        perturbed[~st.mask] += 1e6
        cond_a = mask_condition(st)
        cond_b = mask_condition(DiffusionState(s=perturbed, t=2, mask=st.mask))
        assert np.array_equal(cond_a[st.mask], cond_b[st.mask])
        assert np.array_equal(cond_a[~st.mask], cond_b[~st.mask])  # both zero


class TestX0Loss:
    def test_exact_prediction(self, rng):
        st = make_state(rng)
        assert x0_loss(st.s.copy(), st) == 0.0

    def test_unit_offset_full_mask(self, rng):
        st = make_state(rng, valid_frac=1.0)
        assert x0_loss(st.s + 1.0, st) == pytest.approx(1.0, rel=1e-12)

    def test_masked_pixels_excluded_bitwise(self, rng):
        st = make_state(rng, valid_frac=0.5)
        pred = st.s + rng.standard_normal(st.s.shape)
        base = x0_loss(pred, st)
        tampered = pred.copy()
        tampered[~st.mask] += 123.456
        assert x0_loss(tampered, st) == base

    def test_no_valid_pixels_warns_and_returns_zero(self, rng):
        st = DiffusionState(s=rng.standard_normal((1, 2, 2, 8)), t=0, mask=np.zeros((1, 2, 2), bool))
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            assert x0_loss(st.s + 1.0, st) == 0.0
        assert any("all-masked" in str(w.message) for w in caught)

    def test_gradient_matches_finite_differences(self, rng):
        # Analytic gradient: 2 (pred - s0) * mask / (8 * n_valid).
        st = make_state(rng, n=1, h=3, w=3, valid_frac=0.6)
        pred = st.s + 0.1 * rng.standard_normal(st.s.shape)
        n_valid = st.mask.sum()
        analytic = 2.0 * (pred - st.s) * st.mask[..., None] / (8 * n_valid)
        h = 1e-6
        fd = np.zeros_like(pred)
        flat, fdf = pred.ravel(), fd.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = x0_loss(pred, st)
            flat[i] = orig - h
            dn = x0_loss(pred, st)
            flat[i] = orig
            fdf[i] = (up - dn) / (2 * h)
        scale = max(np.abs(analytic).max(), 1e-12)
        assert np.abs(fd - analytic).max() / scale < 1e-6


@pytest.fixture
def tiny_model():
    cfg = TrainConfig(
        grid_h=4, grid_w=4, image_size=8, c1=8, c2=8, layers=1, heads=2, time_dim=8, dtype="float64"
    )
    return init_params(cfg, seed=3)


class TestReverseSample:
    def test_timestep_grid(self):
        assert sampling_timesteps(100, 10) == [90, 80, 70, 60, 50, 40, 30, 20, 10, 0]
        assert sampling_timesteps(100, 1) == [0]
        assert sampling_timesteps(10, 10) == [9, 8, 7, 6, 5, 4, 3, 2, 1, 0]

    def test_same_seed_bit_identical(self, tiny_model, rng):
        sched = make_schedule(100)
        images = rng.uniform(0, 1, (2, 8, 8, 3))
        a = reverse_sample(tiny_model, images, sched, num_steps=4, stop_frac=0.5, seed=9)
        b = reverse_sample(tiny_model, images, sched, num_steps=4, stop_frac=0.5, seed=9)
        for ra, rb in zip(a, b):
            assert np.array_equal(ra.origins, rb.origins)
            assert np.array_equal(ra.endpoints, rb.endpoints)

    def test_different_seeds_differ(self, tiny_model, rng):
        sched = make_schedule(100)
        images = rng.uniform(0, 1, (2, 8, 8, 3))
        a = reverse_sample(tiny_model, images, sched, seed=1)
        b = reverse_sample(tiny_model, images, sched, seed=2)
        assert not np.allclose(a[0].endpoints, b[0].endpoints)

    def test_early_stop_uses_one_evaluation(self, tiny_model, rng, monkeypatch):
        # stop_frac=0.9 with T=100 and 10 steps: the prediction at t=90 is the
        # output and only one network evaluation happens.
        calls = []
        real = raysfm.denoiser.denoise_forward

        def spy(params, feats, cond, t, **kw):
            calls.append(t)
            return real(params, feats, cond, t, **kw)

        monkeypatch.setattr(raysfm.denoiser, "denoise_forward", spy)
        sched = make_schedule(100)
        images = rng.uniform(0, 1, (1, 8, 8, 3))
        reverse_sample(tiny_model, images, sched, num_steps=10, stop_frac=0.9, seed=0)
        assert calls == [90]

    def test_stop_frac_one_runs_all_steps(self, tiny_model, rng, monkeypatch):
        calls = []
        real = raysfm.denoiser.denoise_forward

        def spy(params, feats, cond, t, **kw):
            calls.append(t)
            return real(params, feats, cond, t, **kw)

        monkeypatch.setattr(raysfm.denoiser, "denoise_forward", spy)
        sched = make_schedule(100)
        images = rng.uniform(0, 1, (1, 8, 8, 3))
        out = reverse_sample(tiny_model, images, sched, num_steps=5, stop_frac=1.0, seed=0)
        assert calls == [80, 60, 40, 20, 0]
        assert all(np.all(np.isfinite(rm.as_tensor())) for rm in out)

    def test_untrained_full_chain_stays_finite(self, tiny_model, rng):
        # Random weights, stop_frac=1, one step per timestep: graceful, no NaN.
        sched = make_schedule(20)
        images = rng.uniform(0, 1, (1, 8, 8, 3))
        out = reverse_sample(tiny_model, images, sched, num_steps=20, stop_frac=1.0, seed=0)
        assert all(np.all(np.isfinite(rm.as_tensor())) for rm in out)
        assert all(rm.valid.all() for rm in out)

    def test_output_shape_contract(self, tiny_model, rng):
        sched = make_schedule(100)
        images = rng.uniform(0, 1, (3, 8, 8, 3))
        out = reverse_sample(tiny_model, images, sched, seed=0)
        assert len(out) == 3
        assert all(rm.shape == (4, 4) for rm in out)

    def test_nan_params_rejected(self, tiny_model, rng):
        tiny_model.tensors["head.w"].data = tiny_model.tensors["head.w"].data.copy()
        tiny_model.tensors["head.w"].data[0, 0] = np.nan
        sched = make_schedule(100)
        with pytest.raises(InvalidModelError):
            reverse_sample(tiny_model, rng.uniform(0, 1, (1, 8, 8, 3)), sched, seed=0)

    def test_bad_args_rejected(self, tiny_model, rng):
        sched = make_schedule(100)
        images = rng.uniform(0, 1, (1, 8, 8, 3))
        with pytest.raises(InvalidInputError):
            reverse_sample(tiny_model, images, sched, num_steps=0)
        with pytest.raises(InvalidInputError):
            reverse_sample(tiny_model, images, sched, stop_frac=0.0)
        with pytest.raises(InvalidInputError):
            reverse_sample(tiny_model, images, sched, stop_frac=1.5)
