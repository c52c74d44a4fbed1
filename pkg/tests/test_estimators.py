"""Tests for the iterative estimators: soft weights, update steps,
likelihood, momentum SGD, trajectory runs, and the sklearn-style wrappers."""

import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from mra.estimators import (
    AdaptiveMoments,
    EMEstimator,
    HardAssignEstimator,
    MomentumSGDEstimator,
    SgdState,
    Trajectory,
    best_shifts,
    em_step,
    exponential_schedule,
    hard_step,
    log_likelihood,
    responsibilities,
    run,
    sgd_gradient,
    sgd_step,
)
from mra.model import ModelConfig, generate, make_waveform
from mra.signals import cyclic_shift, normalized_mse, orbit_distance, shift_indices

RNG = np.random.default_rng(20240817)


def soft_weights_oracle(x, y, sigma):
    """Explicit-loop softmax of correlations, independent of the library path."""
    shifts = shift_indices(x.shape)
    logits = np.array([np.sum(y * cyclic_shift(x, ell)) for ell in shifts]) / sigma**2
    w = np.exp(logits - logits.max())
    return w / w.sum()


def inverse_shift(ell):
    if isinstance(ell, tuple):
        return (-ell[0], -ell[1])
    return -ell


def em_step_oracle(x, obs, sigma):
    """Explicit double loop over observations and shifts."""
    shifts = shift_indices(x.shape)
    out = np.zeros_like(x)
    for y in obs:
        w = soft_weights_oracle(x, y, sigma)
        for weight, ell in zip(w, shifts):
            out += weight * cyclic_shift(y, inverse_shift(ell))
    return out / obs.shape[0]


def log_likelihood_oracle(x, obs, sigma):
    """Literal density sum, safe only at moderate exponents."""
    d = x.size
    shifts = shift_indices(x.shape)
    total = 0.0
    for y in obs:
        dens = [
            math.exp(-np.sum((y - cyclic_shift(x, ell)) ** 2) / (2 * sigma**2))
            for ell in shifts
        ]
        total += math.log(sum(dens) / d) - 0.5 * d * math.log(2 * math.pi * sigma**2)
    return total


class TestResponsibilities:
    def test_two_point_frozen_value(self):
        # logits [1, 0] at sigma=1 give weights [e, 1] / (e + 1)
        w = responsibilities(np.array([1.0, 0.0]), np.array([1.0, 0.0]), sigma=1.0)
        assert w[0] == pytest.approx(0.7310585786300049, rel=0, abs=1e-15)
        assert w[1] == pytest.approx(1.0 - 0.7310585786300049, rel=0, abs=1e-15)

    def test_zero_template_is_uniform(self):
        y = RNG.standard_normal(7)
        w = responsibilities(np.zeros(7), y, sigma=0.3)
        np.testing.assert_allclose(w, np.full(7, 1.0 / 7.0), rtol=0, atol=1e-15)

    def test_tiny_sigma_concentrates(self):
        x = make_waveform("bump", 16)
        y = cyclic_shift(x, 3)
        w = responsibilities(x, y, sigma=1e-3)
        assert w[3] >= 1.0 - 1e-9

    def test_sums_to_one_and_positive_at_moderate_scale(self):
        for _ in range(5):
            x = RNG.standard_normal(9)
            y = RNG.standard_normal(9)
            w = responsibilities(x, y, sigma=1.0)
            assert abs(w.sum() - 1.0) < 1e-12
            assert np.all(w > 0)

    @given(st.integers(min_value=2, max_value=24), st.integers(min_value=0, max_value=1000))
    @settings(max_examples=40, deadline=None)
    def test_matches_oracle(self, d, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal(d)
        y = rng.standard_normal(d)
        w = responsibilities(x, y, sigma=0.8)
        np.testing.assert_allclose(w, soft_weights_oracle(x, y, 0.8), rtol=0, atol=1e-12)

    def test_template_shift_covariance(self):
        d = 11
        x = RNG.standard_normal(d)
        y = RNG.standard_normal(d)
        base = responsibilities(x, y, sigma=0.5)
        for s in range(d):
            shifted = responsibilities(cyclic_shift(x, s), y, sigma=0.5)
            np.testing.assert_allclose(shifted, np.roll(base, -s), rtol=0, atol=1e-12)
            moved = responsibilities(x, cyclic_shift(y, -s), sigma=0.5)
            np.testing.assert_allclose(moved, shifted, rtol=0, atol=1e-12)

    def test_grid_weights_flat_and_normalized(self):
        x = RNG.standard_normal((3, 4))
        y = RNG.standard_normal((3, 4))
        w = responsibilities(x, y, sigma=1.0)
        assert w.shape == (12,)
        assert abs(w.sum() - 1.0) < 1e-12

    def test_rejects_bad_sigma_and_shapes(self):
        with pytest.raises(ValueError):
            responsibilities(np.ones(4), np.ones(4), sigma=0.0)
        with pytest.raises(ValueError):
            responsibilities(np.ones(4), np.ones(5), sigma=1.0)
        with pytest.raises(ValueError):
            responsibilities(np.ones(4), np.ones(4), sigma=None)


class TestEmStep:
    def test_zero_template_gives_grand_mean_constant(self):
        # Uniform weights average every cyclic shift, projecting onto constants.
        obs = RNG.standard_normal((6, 5))
        out = em_step(np.zeros(5), obs, sigma=1.0)
        np.testing.assert_allclose(out, np.full(5, obs.mean()), rtol=0, atol=1e-12)

    def test_matches_loop_oracle_line(self):
        x = RNG.standard_normal(6)
        obs = RNG.standard_normal((4, 6))
        got = em_step(x, obs, sigma=0.7)
        want = em_step_oracle(x, obs, 0.7)
        np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)

    def test_matches_loop_oracle_grid(self):
        x = RNG.standard_normal((3, 4))
        obs = RNG.standard_normal((5, 3, 4))
        got = em_step(x, obs, sigma=0.9)
        want = em_step_oracle(x, obs, 0.9)
        np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)

    def test_fft_and_direct_agree(self):
        for shape in [(17,), (64,), (4, 6)]:
            x = RNG.standard_normal(shape)
            obs = RNG.standard_normal((8,) + shape)
            a = em_step(x, obs, sigma=0.6, method="fft")
            b = em_step(x, obs, sigma=0.6, method="direct")
            np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)

    def test_preserves_observation_mean(self):
        # Weights sum to one per observation, so the update keeps the grand mean.
        for _ in range(5):
            x = RNG.standard_normal(8)
            obs = RNG.standard_normal((10, 8)) + 3.0
            out = em_step(x, obs, sigma=0.5)
            assert out.mean() == pytest.approx(obs.mean(), rel=5e-13)

    def test_shift_equivariance(self):
        d = 9
        x = RNG.standard_normal(d)
        obs = RNG.standard_normal((7, d))
        base = em_step(x, obs, sigma=0.8)
        for s in range(d):
            shifted_obs = np.stack([cyclic_shift(y, s) for y in obs])
            moved = em_step(cyclic_shift(x, s), shifted_obs, sigma=0.8)
            np.testing.assert_allclose(moved, cyclic_shift(base, s), rtol=0, atol=1e-10)

    def test_accepts_observation_set_and_sigma_override(self):
        cfg = ModelConfig(n=20, sigma=0.4, seed=7, truth="bump", shape=(8,))
        ds = generate(cfg)
        out_ds = em_step(ds.ground_truth, ds, sigma=None)
        out_arr = em_step(ds.ground_truth, ds.observations, sigma=0.4)
        np.testing.assert_array_equal(out_ds, out_arr)
        with pytest.raises(ValueError):
            em_step(ds.ground_truth, ds.observations, sigma=None)


class TestHardStep:
    def test_single_observation_recovers_itself(self):
        x = make_waveform("bump", 12)
        out = hard_step(x, x[None, :])
        np.testing.assert_allclose(out, x, rtol=0, atol=1e-12)

    def test_aligns_shifted_template(self):
        x = make_waveform("bump", 12)
        y = cyclic_shift(x, 2)
        out = hard_step(x, y[None, :])
        np.testing.assert_array_equal(out, x)

    def test_clean_dataset_fixed_point(self):
        cfg = ModelConfig(n=50, sigma=0.0, seed=3, truth="bump", shape=(8,))
        ds = generate(cfg)
        out = hard_step(ds.ground_truth, ds)
        assert orbit_distance(out, ds.ground_truth) <= 1e-12

    def test_tie_breaks_to_smallest_index(self):
        # An impulse template makes the correlations read off raw entries,
        # so equal entries are exact bitwise ties.
        x = np.array([1.0, 0.0, 0.0, 0.0])
        y = np.array([5.0, 3.0, 5.0, 1.0])
        assert best_shifts(x, y[None, :], method="direct")[0] == 0
        out = hard_step(x, y[None, :], method="direct")
        np.testing.assert_array_equal(out, y)

    def test_grid_tie_breaks_row_major(self):
        x = np.zeros((2, 2))
        x[0, 0] = 1.0
        y = np.full((2, 2), 7.0)
        s = best_shifts(x, y[None, :, :], method="direct")[0]
        assert tuple(s) == (0, 0)

    def test_grid_alignment(self):
        x = RNG.standard_normal((3, 5))
        y = cyclic_shift(x, (2, 4))
        out = hard_step(x, y[None, :, :])
        np.testing.assert_array_equal(out, x)

    def test_best_shifts_recovers_true_shifts_on_clean_data(self):
        cfg = ModelConfig(n=30, sigma=0.0, seed=11, truth="bump", shape=(16,))
        ds = generate(cfg)
        np.testing.assert_array_equal(best_shifts(ds.ground_truth, ds), ds.true_shifts)


class TestLogLikelihood:
    def test_single_point_formula(self):
        # d=1: L = -(y-x)^2 / (2 sigma^2) - log(2 pi sigma^2) / 2
        y, x, sigma = 1.3, 0.4, 0.7
        want = -((y - x) ** 2) / (2 * sigma**2) - 0.5 * math.log(2 * math.pi * sigma**2)
        got = log_likelihood(np.array([x]), np.array([[y]]), sigma=sigma)
        assert got == pytest.approx(want, rel=1e-14)

    def test_matches_literal_density_oracle(self):
        x = RNG.standard_normal(5)
        obs = RNG.standard_normal((6, 5))
        got = log_likelihood(x, obs, sigma=1.1)
        want = log_likelihood_oracle(x, obs, 1.1)
        assert got == pytest.approx(want, rel=1e-10)

    def test_shift_invariance(self):
        d = 10
        x = RNG.standard_normal(d)
        obs = RNG.standard_normal((12, d))
        base = log_likelihood(x, obs, sigma=0.9)
        for s in range(1, d):
            assert log_likelihood(cyclic_shift(x, s), obs, sigma=0.9) == pytest.approx(
                base, abs=1e-10 * (1 + abs(base))
            )

    def test_em_increases_likelihood(self):
        cfg = ModelConfig(n=40, sigma=0.7, seed=5, truth="cosine", shape=(8,))
        ds = generate(cfg)
        x = np.zeros(8) + 0.1
        prev = log_likelihood(x, ds)
        for _ in range(15):
            x = em_step(x, ds)
            cur = log_likelihood(x, ds)
            assert cur - prev >= -1e-9
            prev = cur


class TestSgd:
    def test_zero_batch_is_exact_fixed_point(self):
        # All-zero data and estimate give an exactly zero gradient, so the
        # update must leave the estimate untouched bit for bit.
        state = SgdState.initial(np.zeros(4), sigma=1.0)
        new = sgd_step(state, np.zeros((3, 4)))
        np.testing.assert_array_equal(new.estimate, np.zeros(4))
        assert new.t == 1

    def test_first_step_sign_gradient_when_betas_zero(self):
        x = RNG.standard_normal(6)
        batch = RNG.standard_normal((5, 6))
        state = SgdState.initial(
            x, sigma=0.8, schedule=lambda t: 0.25, moment_rule=AdaptiveMoments(0.0, 0.0)
        )
        g = sgd_gradient(x, batch, sigma=0.8)
        new = sgd_step(state, batch)
        want = x - 0.25 * g / (np.abs(g) + state.eps)
        np.testing.assert_allclose(new.estimate, want, rtol=0, atol=1e-15)

    def test_full_batch_gradient_matches_em_residual(self):
        x = RNG.standard_normal(12)
        obs = RNG.standard_normal((30, 12))
        g = sgd_gradient(x, obs, sigma=0.6)
        np.testing.assert_allclose(g, x - em_step(x, obs, sigma=0.6), rtol=0, atol=1e-12)

    def test_moment_rule_bias_correction(self):
        rule = AdaptiveMoments(0.9, 0.999)
        g = np.array([2.0, -1.0])
        m, v, m_hat, v_hat = rule.update(np.zeros(2), np.zeros(2), g, 1)
        np.testing.assert_allclose(m, 0.1 * g, rtol=1e-15)
        np.testing.assert_allclose(v, 0.001 * g**2, rtol=1e-15)
        # First-step bias correction recovers the raw gradient moments.
        np.testing.assert_allclose(m_hat, g, rtol=1e-12)
        np.testing.assert_allclose(v_hat, g**2, rtol=1e-12)

    def test_schedule_default_values(self):
        sched = exponential_schedule()
        assert sched(0) == pytest.approx(0.95)
        assert sched(1) == pytest.approx(0.95 * math.exp(-0.99))

    def test_rejects_bad_betas(self):
        with pytest.raises(ValueError):
            AdaptiveMoments(1.0, 0.5)
        with pytest.raises(ValueError):
            AdaptiveMoments(0.5, -0.1)


class TestRun:
    def make_dataset(self, n=60, sigma=0.5, d=8, seed=9):
        return generate(ModelConfig(n=n, sigma=sigma, seed=seed, truth="bump", shape=(d,)))

    def test_t_zero_records_only_init(self):
        ds = self.make_dataset()
        init = np.zeros(8) + 0.3
        traj = run("em", init, ds, 0)
        assert len(traj) == 1
        np.testing.assert_array_equal(traj.final, init)
        np.testing.assert_array_equal(traj.iterates[0], init)

    def test_em_run_improves_and_records_metrics(self):
        ds = self.make_dataset()
        traj = run("em", 0.1 * make_waveform("bump", 8), ds, 12, freqs=[1, 2])
        assert len(traj) == 13
        ll = traj.columns["loglik"]
        assert np.all(np.diff(ll) >= -1e-9)
        mse = traj.columns["mse_orbit"]
        assert mse[-1] < mse[0]
        assert traj.columns["phase_k1"][0] == 0.0
        assert np.all(np.isfinite(traj.columns["mag_k1"]))
        assert traj.columns["walltime_s"][0] == 0.0
        assert np.all(traj.columns["walltime_s"][1:] > 0)

    def test_hard_run_without_sigma_has_nan_loglik(self):
        ds = generate(ModelConfig(n=30, sigma=0.0, seed=2, truth="bump", shape=(8,)))
        traj = run("hard", ds.ground_truth, ds, 3)
        assert np.all(np.isnan(traj.columns["loglik"]))
        assert traj.columns["mse_orbit"][-1] <= 1e-24

    def test_em_with_tiny_sigma_matches_hard(self):
        ds = generate(ModelConfig(n=40, sigma=0.0, seed=13, truth="bump", shape=(8,)))
        init = make_waveform("cosine", 8)
        em_traj = run("em", init, ds, 6, sigma=1e-6)
        hard_traj = run("hard", init, ds, 6)
        for t in range(7):
            np.testing.assert_allclose(
                em_traj.iterates[t], hard_traj.iterates[t], rtol=0, atol=1e-6
            )

    def test_sgd_run_deterministic_given_seed(self):
        ds = self.make_dataset(n=100)
        init = np.full(8, 0.05)
        a = run("sgd", init, ds, 10, seed=4, batch_size=16)
        b = run("sgd", init, ds, 10, seed=4, batch_size=16)
        np.testing.assert_array_equal(a.final, b.final)
        c = run("sgd", init, ds, 10, seed=5, batch_size=16)
        assert not np.array_equal(a.final, c.final)

    def test_sgd_requires_seed(self):
        ds = self.make_dataset()
        with pytest.raises(ValueError):
            run("sgd", np.zeros(8), ds, 3)

    def test_iterate_budget_drops_iterates(self):
        ds = self.make_dataset()
        traj = run("em", np.full(8, 0.1), ds, 4, iterate_budget=10)
        assert traj.iterates is None
        assert traj.final.shape == (8,)
        assert len(traj) == 5

    def test_unknown_kind_rejected(self):
        ds = self.make_dataset()
        with pytest.raises(ValueError):
            run("annealed", np.zeros(8), ds, 1)

    def test_to_csv_roundtrip(self, tmp_path):
        ds = self.make_dataset()
        traj = run("em", np.full(8, 0.1), ds, 5, freqs=[1])
        path = tmp_path / "traj.csv"
        traj.to_csv(path)
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["t", "mse_orbit", "loglik", "walltime_s", "phase_k1", "mag_k1"]
        assert len(rows) == 7
        for t, row in enumerate(rows[1:]):
            assert int(row[0]) == t
            assert float(row[1]) == traj.columns["mse_orbit"][t]
            assert float(row[5]) == traj.columns["mag_k1"][t]


class TestEstimatorClasses:
    def make_clean(self, d=12, n=40, seed=21):
        return generate(ModelConfig(n=n, sigma=0.0, seed=seed, truth="bump", shape=(d,)))

    def test_get_set_params_roundtrip_and_clone(self):
        est = EMEstimator(sigma=0.5, n_iter=7, init="mean")
        params = est.get_params()
        assert params["sigma"] == 0.5 and params["n_iter"] == 7
        est2 = clone(est)
        assert est2.get_params() == params
        est.set_params(n_iter=3)
        assert est.n_iter == 3

    def test_not_fitted_raises(self):
        ds = self.make_clean()
        with pytest.raises(NotFittedError):
            HardAssignEstimator().predict(ds)

    def test_hard_estimator_recovers_clean_signal(self):
        ds = self.make_clean()
        est = HardAssignEstimator(n_iter=5, init=ds.ground_truth).fit(ds)
        assert orbit_distance(est.estimate_, ds.ground_truth) <= 1e-12
        np.testing.assert_array_equal(est.predict(ds), ds.true_shifts)
        aligned = est.transform(ds)
        for row in aligned:
            np.testing.assert_array_equal(row, ds.ground_truth)

    def test_em_estimator_fits_noisy_data(self):
        ds = generate(ModelConfig(n=400, sigma=0.3, seed=8, truth="bump", shape=(8,)))
        est = EMEstimator(n_iter=30).fit(ds)
        assert normalized_mse(est.estimate_, ds.ground_truth) < 0.05
        assert est.trajectory_.columns["loglik"][-1] >= est.trajectory_.columns["loglik"][0]
        assert est.sigma_ == 0.3

    def test_sgd_estimator_runs_and_is_seeded(self):
        ds = generate(ModelConfig(n=300, sigma=0.3, seed=8, truth="bump", shape=(8,)))
        a = MomentumSGDEstimator(n_iter=20, batch_size=64, random_state=1).fit(ds)
        b = MomentumSGDEstimator(n_iter=20, batch_size=64, random_state=1).fit(ds)
        np.testing.assert_array_equal(a.estimate_, b.estimate_)
        assert isinstance(a.trajectory_, Trajectory)

    def test_random_init_uses_random_state(self):
        ds = self.make_clean()
        a = EMEstimator(sigma=0.5, n_iter=0, init="random", random_state=3).fit(ds)
        b = EMEstimator(sigma=0.5, n_iter=0, init="random", random_state=3).fit(ds)
        np.testing.assert_array_equal(a.estimate_, b.estimate_)
        assert np.linalg.norm(a.estimate_) == pytest.approx(1.0, rel=1e-12)

    def test_grid_estimator_roundtrip(self):
        cfg = ModelConfig(n=25, sigma=0.0, seed=4, truth="bump", shape=(4, 6))
        ds = generate(cfg)
        est = HardAssignEstimator(n_iter=2, init=ds.ground_truth).fit(ds)
        np.testing.assert_array_equal(est.predict(ds), ds.true_shifts)
        aligned = est.transform(ds)
        assert aligned.shape == ds.observations.shape
        for row in aligned:
            np.testing.assert_array_equal(row, ds.ground_truth)
