"""Statistical diagnostics for finite-sample alignment phenomena.

Four effects of iterating the soft aligned-average update on noisy data are
quantified here:

* pure-noise runs imprint the initialization: Fourier magnitudes decay by a
  closed-form law while phases drift only through finite-sample noise
  (:func:`efn_magnitude_law`, :func:`phase_drift_scan`),
* reconstruction error on noisy data can reach a minimum and then rebound
  toward an initialization-biased fixed point; the rebound and the predicted
  crossover iteration are reported (:func:`detect_ghost`,
  :func:`crossover_teq`),
* the gap between the finite-sample update and its infinite-sample limit
  shrinks like 1/sqrt(n) (:func:`deviation_estimate`),
* per-update displacement stagnates as the dimension grows at fixed
  initialization energy (:func:`highdim_stagnation_scan`).

Every Monte-Carlo estimate carries a standard error, and every trial draws
its dataset seed from one counter-based master stream, so scans are pure
functions of their arguments.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from ._validate import as_signal, check_nonnegative_int, check_positive_int, check_sigma
from .estimators import em_step
from .model import ModelConfig, generate
from .population import DEFAULT_NODES, population_em
from .signals import correlate_shifts, dft, wrap_phase

__all__ = [
    "efn_magnitude_law",
    "crossover_teq",
    "crossover_regimes",
    "GhostReport",
    "detect_ghost",
    "DeviationTable",
    "deviation_estimate",
    "DriftReport",
    "phase_drift_scan",
    "StagnationTable",
    "highdim_stagnation_scan",
]


def efn_magnitude_law(mag0_sq: float, T: int) -> float:
    """Predicted magnitude ratio after ``T`` pure-noise updates.

    A frequency starting with squared unitary-basis magnitude ``mag0_sq``
    retains the fraction 1/sqrt(1 + 2 T mag0_sq) of its magnitude.
    """
    mag0_sq = float(mag0_sq)
    if mag0_sq < 0.0:
        raise ValueError("mag0_sq must be >= 0")
    T = check_nonnegative_int(T, "T")
    return 1.0 / math.sqrt(1.0 + 2.0 * T * mag0_sq)


def _check_crossover_args(kappa, e0, eps_m):
    kappa, e0, eps_m = float(kappa), float(e0), float(eps_m)
    if not 0.0 < kappa < 1.0:
        raise ValueError(f"kappa must lie in (0, 1), got {kappa}")
    if e0 <= 0.0 or eps_m <= 0.0:
        raise ValueError("e0 and eps_m must be positive")
    return kappa, e0, eps_m


def crossover_teq(kappa: float, e0: float, eps_m: float) -> float:
    """Iteration at which a kappa-contracting error meets the sampling floor.

    t_eq = log(1 + (1 - kappa) e0 / eps_m) / (-log kappa): the error of a
    geometric decay from e0 with ratio kappa crosses the finite-sample
    deviation level eps_m at this iterate.
    """
    kappa, e0, eps_m = _check_crossover_args(kappa, e0, eps_m)
    return math.log1p((1.0 - kappa) * e0 / eps_m) / (-math.log(kappa))


def crossover_regimes(kappa: float, e0: float, eps_m: float) -> dict:
    """Asymptotic forms of the crossover iteration.

    When (1 - kappa) e0 / eps_m is small the crossover is sampling-limited,
    t_eq ~ e0 / eps_m; when it is large the crossover is contraction-limited,
    t_eq ~ log((1 - kappa) e0 / eps_m) / (1 - kappa).
    """
    kappa, e0, eps_m = _check_crossover_args(kappa, e0, eps_m)
    ratio = (1.0 - kappa) * e0 / eps_m
    return {
        "ratio": ratio,
        "sampling_limited": e0 / eps_m,
        "contraction_limited": math.log(ratio) / (1.0 - kappa) if ratio > 1.0 else math.nan,
    }


# ---------------------------------------------------------------------------
# error-rebound detection


@dataclass(eq=False)
class GhostReport:
    """Minimum location and rebound verdict for a reconstruction-error curve."""

    mse_curve: np.ndarray
    t_min: int
    rebound: bool
    margin: float
    predicted_teq: float | None = None

    def to_json_dict(self) -> dict:
        return {
            "t_min": self.t_min,
            "rebound": self.rebound,
            "margin": self.margin,
            "predicted_teq": self.predicted_teq,
            "mse_curve": [float(v) for v in self.mse_curve],
        }


def detect_ghost(mse_curve, margin: float, kappa=None, e0=None, eps_m=None) -> GhostReport:
    """Locate the first error minimum and flag a later rebound.

    The rebound flag is set iff some later value exceeds (1 + margin) times
    the minimum; the verdict is invariant to positive rescaling of the
    curve. If (kappa, e0, eps_m) are all supplied, the predicted crossover
    iteration is attached.
    """
    curve = np.asarray(mse_curve, dtype=np.float64).ravel()
    if curve.shape[0] < 3:
        raise ValueError("rebound detection needs at least 3 points")
    if not np.all(np.isfinite(curve)) or np.any(curve < 0.0):
        raise ValueError("error curve must be finite and nonnegative")
    margin = float(margin)
    if margin < 0.0:
        raise ValueError("margin must be >= 0")
    t_min = int(np.argmin(curve))
    later = curve[t_min + 1 :]
    rebound = bool(later.size and later.max() > (1.0 + margin) * curve[t_min])
    teq = None
    if kappa is not None and e0 is not None and eps_m is not None:
        teq = crossover_teq(kappa, e0, eps_m)
    return GhostReport(
        mse_curve=curve, t_min=t_min, rebound=rebound, margin=margin, predicted_teq=teq
    )


# ---------------------------------------------------------------------------
# Monte-Carlo scans


def _seed_stream(seed: int, tag: int):
    gen = np.random.Generator(
        np.random.Philox(np.random.SeedSequence(entropy=int(seed), spawn_key=(tag,)))
    )

    def next_seed() -> int:
        return int(gen.integers(0, 2**63 - 1))

    return next_seed


@dataclass(eq=False)
class DeviationTable:
    """Sup-deviation between the n-sample and infinite-sample updates."""

    n_values: np.ndarray
    values: np.ndarray  # (trials, len(n_values))
    means: np.ndarray
    stderrs: np.ndarray
    slope: float


def deviation_estimate(
    x_points,
    x_star,
    sigma,
    n_values,
    trials: int = 8,
    seed: int = 0,
    grid=None,
    *,
    m: int = DEFAULT_NODES,
) -> DeviationTable:
    """Estimate max over probe points of the n-sample vs population update gap.

    For each dataset size, fresh datasets are drawn and the largest
    ``norm(update_n(x) - update_inf(x))`` across the probe points is
    recorded; the fitted log-log slope vs n should be near -1/2.
    """
    x_star = as_signal(x_star, "x_star")
    sigma = check_sigma(sigma)
    probes = [as_signal(p, "probe") for p in x_points]
    if not probes:
        raise ValueError("need at least one probe point")
    trials = check_positive_int(trials, "trials")
    ns = np.asarray(sorted(int(n) for n in n_values), dtype=np.int64)
    if ns.size < 2:
        raise ValueError("need at least two dataset sizes to fit a slope")

    limits = [population_em(p, x_star, sigma, grid, m=m) for p in probes]
    next_seed = _seed_stream(seed, 0xDE)
    values = np.empty((trials, ns.size))
    for trial in range(trials):
        for j, n in enumerate(ns):
            ds = generate(ModelConfig(n=int(n), sigma=sigma, seed=next_seed(), truth=x_star))
            values[trial, j] = max(
                float(np.linalg.norm(em_step(p, ds) - lim)) for p, lim in zip(probes, limits)
            )
    means = values.mean(axis=0)
    stderrs = values.std(axis=0, ddof=1) / np.sqrt(trials) if trials > 1 else np.zeros(ns.size)
    slope = float(np.polyfit(np.log(ns), np.log(means), 1)[0])
    return DeviationTable(n_values=ns, values=values, means=means, stderrs=stderrs, slope=slope)


@dataclass(eq=False)
class DriftReport:
    """Phase drift of pure-noise updates: one-step scaling in n, growth in T.

    ``one_step_mse[i, j]`` is the Monte-Carlo mean squared one-update phase
    change at frequency ``freqs[i]`` and dataset size ``n_values[j]``;
    ``accumulated_mse[i, t]`` tracks the squared phase offset from the
    initialization after t updates at dataset size ``acc_n``. Slopes are
    fitted on the per-frequency pooled curves.
    """

    freqs: list
    n_values: np.ndarray
    trials: int
    one_step_mse: np.ndarray
    one_step_stderr: np.ndarray
    one_step_samples: np.ndarray  # (freqs, n_values, trials)
    slope_one_step: float
    acc_n: int
    accumulated_mse: np.ndarray
    accumulated_stderr: np.ndarray
    slope_accumulated: float
    window_T: int

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["k", "n", "t", "phase_mse", "stderr"])
            for i, k in enumerate(self.freqs):
                for j, n in enumerate(self.n_values):
                    writer.writerow(
                        [k, int(n), 1, f"{self.one_step_mse[i, j]:.17g}",
                         f"{self.one_step_stderr[i, j]:.17g}"]
                    )
            for i, k in enumerate(self.freqs):
                for t in range(self.accumulated_mse.shape[1]):
                    writer.writerow(
                        [k, self.acc_n, t, f"{self.accumulated_mse[i, t]:.17g}",
                         f"{self.accumulated_stderr[i, t]:.17g}"]
                    )


def _flat_coeff(X, shape, k):
    if len(shape) == 1:
        return X[k % shape[0]]
    return X[(k // shape[1]) % shape[0], k % shape[1]]


def phase_drift_scan(
    init,
    n_values,
    T: int,
    trials: int,
    seed: int,
    *,
    sigma: float = 1.0,
    freqs=None,
    acc_n: int | None = None,
) -> DriftReport:
    """Measure phase drift of repeated updates on pure-noise data.

    One-step drift restarts every trial from the same ``init`` on a fresh
    pure-noise dataset per size in ``n_values``; accumulated drift iterates
    ``T`` updates per trial at size ``acc_n`` (default: the largest size).
    The quadratic-growth fit uses the transient window t <= 0.1 / norm(init)^2.
    """
    init = as_signal(init, "init")
    sigma = check_sigma(sigma)
    T = check_positive_int(T, "T")
    trials = check_positive_int(trials, "trials")
    ns = np.asarray(sorted(int(n) for n in n_values), dtype=np.int64)
    if ns.size < 2:
        raise ValueError("need at least two dataset sizes to fit a slope")
    d = init.size
    if freqs is None:
        if init.ndim != 1:
            raise ValueError("freqs must be given explicitly for 2-D signals")
        freqs = list(range(1, d))
    freqs = [int(k) for k in freqs]
    X0 = dft(init)
    phi0 = np.array([np.angle(_flat_coeff(X0, init.shape, k)) for k in freqs])
    mags = np.array([np.abs(_flat_coeff(X0, init.shape, k)) for k in freqs])
    if np.any(mags <= 1e-13 * (1.0 + np.linalg.norm(init))):
        raise ValueError("init has a zero coefficient at a requested frequency")

    zero_truth = np.zeros(init.shape)

    def phase_offsets(x):
        Xt = dft(x)
        phis = np.array([np.angle(_flat_coeff(Xt, init.shape, k)) for k in freqs])
        return wrap_phase(phis - phi0)

    next_seed = _seed_stream(seed, 0xD1)
    one_samples = np.empty((len(freqs), ns.size, trials))
    for j, n in enumerate(ns):
        for trial in range(trials):
            ds = generate(ModelConfig(n=int(n), sigma=sigma, seed=next_seed(), truth=zero_truth))
            one_samples[:, j, trial] = phase_offsets(em_step(init, ds)) ** 2
    one_mse = one_samples.mean(axis=2)
    one_stderr = (
        one_samples.std(axis=2, ddof=1) / np.sqrt(trials) if trials > 1 else np.zeros_like(one_mse)
    )
    pooled = one_mse.mean(axis=0)
    slope_one = float(np.polyfit(np.log(ns), np.log(pooled), 1)[0])

    acc_n = int(acc_n) if acc_n is not None else int(ns[-1])
    acc_samples = np.empty((len(freqs), T + 1, trials))
    for trial in range(trials):
        ds = generate(ModelConfig(n=acc_n, sigma=sigma, seed=next_seed(), truth=zero_truth))
        x = init
        acc_samples[:, 0, trial] = 0.0
        for t in range(1, T + 1):
            x = em_step(x, ds)
            acc_samples[:, t, trial] = phase_offsets(x) ** 2
    acc_mse = acc_samples.mean(axis=2)
    acc_stderr = (
        acc_samples.std(axis=2, ddof=1) / np.sqrt(trials) if trials > 1 else np.zeros_like(acc_mse)
    )
    window_T = min(T, int(0.1 / float(np.sum(init**2)) * (1.0 + 1e-9)))
    ts = np.arange(1, max(window_T, 2) + 1)
    pooled_acc = acc_mse.mean(axis=0)[ts]
    slope_acc = float(np.polyfit(np.log(ts), np.log(pooled_acc), 1)[0])

    return DriftReport(
        freqs=freqs,
        n_values=ns,
        trials=trials,
        one_step_mse=one_mse,
        one_step_stderr=one_stderr,
        one_step_samples=one_samples,
        slope_one_step=slope_one,
        acc_n=acc_n,
        accumulated_mse=acc_mse,
        accumulated_stderr=acc_stderr,
        slope_accumulated=slope_acc,
        window_T=window_T,
    )


@dataclass(eq=False)
class StagnationTable:
    """Per-update displacement on pure noise as dimension grows."""

    d_values: np.ndarray
    tau: float
    displacements: np.ndarray  # (trials, len(d_values))
    means: np.ndarray
    stderrs: np.ndarray
    decorrelation: np.ndarray  # max |rho_ell| over nonzero lags, per d


def highdim_stagnation_scan(
    tau: float,
    d_values,
    n_large: int,
    trials: int = 4,
    seed: int = 0,
    *,
    sigma: float = 1.0,
) -> StagnationTable:
    """Displacement of one pure-noise update from a fixed-energy initialization.

    For each length d the initialization is a fixed random signal rescaled to
    norm ``tau`` (``tau = 0`` gives the all-zero template, whose displacement
    is the pure sampling floor ~ 1/sqrt(n)). Also reports the largest
    normalized autocorrelation of the initialization over nonzero lags.
    """
    tau = float(tau)
    if tau < 0.0:
        raise ValueError("tau must be >= 0")
    sigma = check_sigma(sigma)
    n_large = check_positive_int(n_large, "n_large")
    trials = check_positive_int(trials, "trials")
    ds_list = [check_positive_int(int(d), "d") for d in d_values]

    next_seed = _seed_stream(seed, 0x5CA)
    displacements = np.empty((trials, len(ds_list)))
    decorrelation = np.empty(len(ds_list))
    for j, d in enumerate(ds_list):
        rng = np.random.default_rng(next_seed())
        v = rng.standard_normal(d)
        init = tau * v / np.linalg.norm(v) if tau > 0.0 else np.zeros(d)
        if tau > 0.0:
            rho = correlate_shifts(init, init) / float(np.dot(init, init))
            decorrelation[j] = float(np.max(np.abs(rho[1:])))
        else:
            decorrelation[j] = np.nan
        for trial in range(trials):
            ds = generate(
                ModelConfig(n=n_large, sigma=sigma, seed=next_seed(), truth=np.zeros(d))
            )
            displacements[trial, j] = float(np.linalg.norm(em_step(init, ds) - init))
    means = displacements.mean(axis=0)
    stderrs = (
        displacements.std(axis=0, ddof=1) / np.sqrt(trials)
        if trials > 1
        else np.zeros(len(ds_list))
    )
    return StagnationTable(
        d_values=np.asarray(ds_list, dtype=np.int64),
        tau=tau,
        displacements=displacements,
        means=means,
        stderrs=stderrs,
        decorrelation=decorrelation,
    )
