"""Finite-sample reconstruction from shifted noisy observations.

Three iterative estimators share one E-step primitive, the soft shift
posterior ("responsibilities")

    gamma_ell(x, y) = softmax_ell( <y, T_ell x> / sigma^2 ),

computed with max-subtraction so the exponentials never overflow:

* the soft aligned-average update (one fixed-point iteration of the
  maximum-likelihood objective): x+ = (1/n) sum_i sum_ell gamma_ell T_ell^-1 y_i,
* the hard-assignment update: align every observation by its single best
  shift, then average,
* momentum mini-batch SGD whose stochastic gradient is the estimate minus
  the batch soft aligned average, with a pluggable moment rule (default:
  exponential moving averages with bias correction).

``run`` drives any of them and records a :class:`Trajectory` of iterates and
per-iteration metrics. Thin scikit-learn-style wrapper classes
(`fit`/`predict`/`transform`, ``get_params``) are provided at the bottom.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import logsumexp
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validate import as_signal, check_nonnegative_int, check_sigma
from .model import ObservationSet
from .signals import (
    aligned_weighted_sum,
    correlate_shifts,
    dft,
    n_shifts,
    normalized_mse,
    shift_indices,
    wrap_phase,
)

__all__ = [
    "responsibilities",
    "em_step",
    "hard_step",
    "best_shifts",
    "log_likelihood",
    "AdaptiveMoments",
    "exponential_schedule",
    "SgdState",
    "sgd_gradient",
    "sgd_step",
    "Trajectory",
    "run",
    "EMEstimator",
    "HardAssignEstimator",
    "MomentumSGDEstimator",
]


def _as_batch(Y, sigma=None):
    """Normalize an ObservationSet or raw array into (batch, sigma)."""
    if isinstance(Y, ObservationSet):
        obs = Y.observations
        sigma = Y.sigma if sigma is None else sigma
    else:
        obs = np.asarray(Y, dtype=np.float64)
        if obs.ndim not in (2, 3):
            raise ValueError("observations must be an ObservationSet or an (n, ...) signal batch")
    if obs.shape[0] < 1:
        raise ValueError("observation set is empty")
    return obs, sigma


def _soft_weights(x, obs, sigma, method="fft"):
    """Responsibility matrix (n, group size) for a whole batch."""
    logits = correlate_shifts(obs, x, method=method) / sigma**2
    logits = np.atleast_2d(logits)
    logits -= logits.max(axis=1, keepdims=True)
    np.exp(logits, out=logits)
    logits /= logits.sum(axis=1, keepdims=True)
    return logits


def responsibilities(x, y, sigma, method: str = "fft") -> np.ndarray:
    """Posterior shift weights for one observation, flat canonical order.

    The weights are a softmax over ``<y, T_ell x> / sigma^2`` and sum to 1.
    They are mathematically strictly positive; in double precision a weight
    underflows to exact 0 once its logit trails the maximum by more than
    ~745, which the extreme high-SNR regimes do reach.
    """
    x = as_signal(x, "template")
    y = as_signal(y, "observation")
    if y.shape != x.shape:
        raise ValueError(f"observation shape {y.shape} does not match template {x.shape}")
    sigma = check_sigma(sigma)
    return _soft_weights(x, y[None, ...], sigma, method)[0]


def em_step(x, Y, sigma=None, method: str = "fft") -> np.ndarray:
    """Soft aligned-average update: responsibilities-weighted back-shifted mean."""
    x = as_signal(x, "estimate")
    obs, sigma = _as_batch(Y, sigma)
    if obs.shape[1:] != x.shape:
        raise ValueError(f"observations {obs.shape} do not match estimate shape {x.shape}")
    sigma = check_sigma(sigma)
    G = _soft_weights(x, obs, sigma, method)
    return aligned_weighted_sum(G, obs, method=method) / obs.shape[0]


def best_shifts(x, Y, method: str = "fft") -> np.ndarray:
    """Most correlated shift per observation (flat argmax, ties to the
    smallest canonical index). Returns (n,) ints for 1-D, (n, 2) for 2-D."""
    x = as_signal(x, "template")
    obs, _ = _as_batch(Y, sigma=1.0)
    corr = np.atleast_2d(correlate_shifts(obs, x, method=method))
    flat = np.argmax(corr, axis=1)
    if x.ndim == 1:
        return flat.astype(np.int64)
    w = x.shape[1]
    return np.column_stack([flat // w, flat % w]).astype(np.int64)


def hard_step(x, Y, method: str = "fft") -> np.ndarray:
    """Align each observation by its best shift, then average."""
    x = as_signal(x, "estimate")
    obs, _ = _as_batch(Y, sigma=1.0)
    if obs.shape[1:] != x.shape:
        raise ValueError(f"observations {obs.shape} do not match estimate shape {x.shape}")
    corr = np.atleast_2d(correlate_shifts(obs, x, method=method))
    flat = np.argmax(corr, axis=1)
    n = obs.shape[0]
    if x.ndim == 1:
        d = x.shape[0]
        # (T_ell^-1 y)[j] = y[(j + ell) mod d], gathered per observation
        aligned = obs[np.arange(n)[:, None], (np.arange(d)[None, :] + flat[:, None]) % d]
    else:
        h, w = x.shape
        r, c = flat // w, flat % w
        rows = (np.arange(h)[None, :] + r[:, None]) % h
        cols = (np.arange(w)[None, :] + c[:, None]) % w
        aligned = obs[np.arange(n)[:, None, None], rows[:, :, None], cols[:, None, :]]
    return aligned.mean(axis=0)


def log_likelihood(x, Y, sigma=None, method: str = "fft") -> float:
    """Marginal log-likelihood of the estimate under the uniform-shift model.

    Includes the Gaussian normalization constant; the shift mixture is
    evaluated with log-sum-exp.
    """
    x = as_signal(x, "estimate")
    obs, sigma = _as_batch(Y, sigma)
    sigma = check_sigma(sigma)
    n, d = obs.shape[0], x.size
    corr = np.atleast_2d(correlate_shifts(obs, x, method=method))
    y_sq = np.sum(obs.reshape(n, -1) ** 2, axis=1)
    x_sq = float(np.dot(x.ravel(), x.ravel()))
    # log sum_ell (1/d) exp(-(|y|^2 - 2 c_ell + |x|^2) / (2 sigma^2))
    per_obs = logsumexp(corr / sigma**2, axis=1) - (y_sq + x_sq) / (2.0 * sigma**2) - np.log(d)
    return float(np.sum(per_obs) - 0.5 * d * n * np.log(2.0 * np.pi * sigma**2))


# ---------------------------------------------------------------------------
# momentum mini-batch SGD


class AdaptiveMoments:
    """Exponential-moving-average moment rule with bias correction."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999):
        if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
            raise ValueError("beta1 and beta2 must lie in [0, 1)")
        self.beta1 = beta1
        self.beta2 = beta2

    def update(self, m, v, g, t):
        """One moment update at step count ``t`` (1-based); returns
        (m, v, m_hat, v_hat)."""
        m = self.beta1 * m + (1.0 - self.beta1) * g
        v = self.beta2 * v + (1.0 - self.beta2) * g**2
        m_hat = m / (1.0 - self.beta1**t)
        v_hat = v / (1.0 - self.beta2**t)
        return m, v, m_hat, v_hat


def exponential_schedule(alpha0: float = 0.95, decay: float = 0.99):
    """Learning-rate schedule ``alpha_t = alpha0 * exp(-decay * t)``."""

    def schedule(t: int) -> float:
        return alpha0 * np.exp(-decay * t)

    return schedule


@dataclass(eq=False)
class SgdState:
    """Iteration state of the momentum SGD estimator.

    ``t`` counts completed steps; the moment arrays match the estimate's
    shape and ``v`` stays entrywise nonnegative.
    """

    estimate: np.ndarray
    m: np.ndarray
    v: np.ndarray
    t: int
    sigma: float
    schedule: object
    moment_rule: object
    eps: float = 1e-8
    batch_size: int = 256

    @classmethod
    def initial(cls, estimate, sigma, schedule=None, moment_rule=None, eps=1e-8, batch_size=256):
        estimate = as_signal(estimate, "estimate")
        return cls(
            estimate=estimate,
            m=np.zeros_like(estimate),
            v=np.zeros_like(estimate),
            t=0,
            sigma=check_sigma(sigma),
            schedule=schedule or exponential_schedule(),
            moment_rule=moment_rule or AdaptiveMoments(),
            eps=float(eps),
            batch_size=int(batch_size),
        )


def sgd_gradient(estimate, batch, sigma, method: str = "fft") -> np.ndarray:
    """Stochastic gradient: estimate minus the batch soft aligned average.

    On the full dataset this equals ``estimate - em_step(estimate, Y)``.
    """
    batch = np.asarray(batch, dtype=np.float64)
    if batch.shape[0] < 1:
        raise ValueError("batch is empty")
    G = _soft_weights(as_signal(estimate, "estimate"), batch, check_sigma(sigma), method)
    return estimate - aligned_weighted_sum(G, batch, method=method) / batch.shape[0]


def sgd_step(state: SgdState, batch, method: str = "fft") -> SgdState:
    """One momentum step on a mini-batch; returns a new state."""
    g = sgd_gradient(state.estimate, batch, state.sigma, method)
    t_next = state.t + 1
    m, v, m_hat, v_hat = state.moment_rule.update(state.m, state.v, g, t_next)
    alpha = float(state.schedule(state.t))
    estimate = state.estimate - alpha * m_hat / (np.sqrt(v_hat) + state.eps)
    return replace(state, estimate=estimate, m=m, v=v, t=t_next)


# ---------------------------------------------------------------------------
# trajectories


#: Full iterates are stored only while (T + 1) * signal size stays at or
#: below this entry budget; larger runs keep metrics only.
DEFAULT_ITERATE_BUDGET = 500_000


@dataclass(eq=False)
class Trajectory:
    """Iterates (when within the storage budget) plus per-iteration metrics.

    ``columns`` maps metric names to length-(T+1) arrays, aligned with the
    iterate index; the base metrics are ``mse_orbit`` (normalized orbit error
    vs the dataset truth, NaN when the truth is zero), ``loglik`` (NaN when no
    noise level applies), and ``walltime_s`` (time spent producing each
    iterate; 0 for the initialization). Requested frequencies add
    ``phase_k<k>`` (wrapped phase of the iterate minus the initialization)
    and ``mag_k<k>`` columns; for 2-D signals ``k`` is the flat row-major
    frequency index.
    """

    iterates: np.ndarray | None
    final: np.ndarray
    columns: dict
    shape: tuple

    def __len__(self) -> int:
        return len(next(iter(self.columns.values())))

    def to_csv(self, path) -> None:
        import csv

        names = list(self.columns)
        with open(path, "w", newline="", encoding="ascii") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t", *names])
            for t in range(len(self)):
                writer.writerow([t, *(f"{self.columns[c][t]:.17g}" for c in names)])


def _freq_key(shape, k):
    if len(shape) == 1:
        return int(k) % shape[0]
    return (int(k) // shape[1] % shape[0], int(k) % shape[1])


def _phase_mag(X, shape, freqs):
    out = []
    for k in freqs:
        idx = _freq_key(shape, k)
        c = X[idx] if len(shape) == 1 else X[idx[0], idx[1]]
        out.append((np.angle(c), np.abs(c)))
    return out


def run(
    kind: str,
    init,
    Y,
    T: int,
    *,
    sigma=None,
    freqs=None,
    method: str = "fft",
    seed: int | None = None,
    batch_size: int = 256,
    schedule=None,
    moment_rule=None,
    eps: float = 1e-8,
    iterate_budget: int = DEFAULT_ITERATE_BUDGET,
) -> Trajectory:
    """Iterate an estimator for ``T`` steps and record the trajectory.

    ``kind`` is ``"em"``, ``"hard"``, or ``"sgd"``. The SGD path requires a
    ``seed``: batches are drawn without replacement from a fresh permutation
    each epoch, so the whole run is a pure function of (data, init, seed).
    """
    T = check_nonnegative_int(T, "T")
    init = as_signal(init, "init")
    obs, sigma = _as_batch(Y, sigma)
    if obs.shape[1:] != init.shape:
        raise ValueError(f"init shape {init.shape} does not match observations {obs.shape}")
    truth = Y.ground_truth if isinstance(Y, ObservationSet) else None
    if kind not in ("em", "hard", "sgd"):
        raise ValueError(f"unknown estimator kind {kind!r}")
    if kind in ("em", "sgd"):
        sigma = check_sigma(sigma)

    freqs = [int(k) for k in (freqs or [])]
    X0 = dft(init)
    init_pm = _phase_mag(X0, init.shape, freqs)

    state = None
    batch_iter = None
    if kind == "sgd":
        if seed is None:
            raise ValueError("sgd runs require a seed for the batch schedule")
        state = SgdState.initial(
            init, sigma, schedule=schedule, moment_rule=moment_rule, eps=eps, batch_size=batch_size
        )
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy=int(seed), spawn_key=(0x5D,))))
        bs = state.batch_size

        def batches():
            while True:
                order = rng.permutation(obs.shape[0])
                for start in range(0, obs.shape[0], bs):
                    yield obs[order[start : start + bs]]

        batch_iter = batches()

    store = (T + 1) * init.size <= iterate_budget
    iterates = np.empty((T + 1,) + init.shape) if store else None
    cols = {name: np.full(T + 1, np.nan) for name in ["mse_orbit", "loglik", "walltime_s"]}
    for k in freqs:
        cols[f"phase_k{k}"] = np.full(T + 1, np.nan)
        cols[f"mag_k{k}"] = np.full(T + 1, np.nan)

    truth_norm = float(np.linalg.norm(truth)) if truth is not None else 0.0
    x = init
    elapsed = 0.0
    for t in range(T + 1):
        if store:
            iterates[t] = x
        if truth is not None and truth_norm > 0.0:
            cols["mse_orbit"][t] = normalized_mse(x, truth, method=method)
        if sigma is not None and sigma > 0.0:
            cols["loglik"][t] = log_likelihood(x, obs, sigma, method=method)
        cols["walltime_s"][t] = elapsed
        Xt = dft(x)
        for k, (phi0, _mag0) in zip(freqs, init_pm):
            idx = _freq_key(init.shape, k)
            c = Xt[idx] if init.ndim == 1 else Xt[idx[0], idx[1]]
            if np.abs(c) > 0.0:
                cols[f"phase_k{k}"][t] = wrap_phase(np.angle(c) - phi0)
            cols[f"mag_k{k}"][t] = np.abs(c)
        if t == T:
            break
        tic = time.perf_counter()
        if kind == "em":
            x = em_step(x, obs, sigma, method=method)
        elif kind == "hard":
            x = hard_step(x, obs, method=method)
        else:
            state = sgd_step(state, next(batch_iter), method=method)
            x = state.estimate
        elapsed = time.perf_counter() - tic

    return Trajectory(iterates=iterates, final=x, columns=cols, shape=init.shape)


# ---------------------------------------------------------------------------
# scikit-learn-style wrappers


class _AlignmentEstimator(BaseEstimator):
    """Shared fit/predict/transform plumbing for the reconstruction classes."""

    _kind = None

    def _resolve(self, X):
        if isinstance(X, ObservationSet):
            obs = X.observations
            sigma = self.sigma if self.sigma is not None else X.sigma
            return X, obs, sigma
        obs = np.asarray(X, dtype=np.float64)
        if obs.ndim not in (2, 3):
            raise ValueError("X must be an ObservationSet or an (n, ...) signal batch")
        return obs, obs, self.sigma

    def _initial(self, obs):
        if isinstance(self.init, str):
            if self.init == "mean":
                return obs.mean(axis=0)
            if self.init == "random":
                rng = np.random.default_rng(self.random_state)
                x0 = rng.standard_normal(obs.shape[1:])
                return x0 / np.linalg.norm(x0)
            raise ValueError(f"unknown init {self.init!r}")
        x0 = as_signal(self.init, "init")
        if x0.shape != obs.shape[1:]:
            raise ValueError(f"init shape {x0.shape} does not match observations {obs.shape}")
        return x0

    def _run_kwargs(self):
        return {}

    def fit(self, X, y=None):
        """Reconstruct the signal; stores ``estimate_`` and ``trajectory_``."""
        Y, obs, sigma = self._resolve(X)
        init = self._initial(obs)
        traj = run(
            self._kind,
            init,
            Y,
            self.n_iter,
            sigma=sigma,
            freqs=self.record_freqs,
            method=self.method,
            **self._run_kwargs(),
        )
        self.estimate_ = traj.final
        self.trajectory_ = traj
        self.sigma_ = sigma
        self.n_iter_ = self.n_iter
        return self

    def predict(self, X):
        """Most probable shift per observation under the fitted estimate."""
        check_is_fitted(self, "estimate_")
        _, obs, _ = self._resolve(X)
        return best_shifts(self.estimate_, obs, method=self.method)

    def transform(self, X):
        """Observations back-aligned by their predicted shifts."""
        check_is_fitted(self, "estimate_")
        _, obs, _ = self._resolve(X)
        corr = np.atleast_2d(correlate_shifts(obs, self.estimate_, method=self.method))
        flat = np.argmax(corr, axis=1)
        n = obs.shape[0]
        if obs.ndim == 2:
            d = obs.shape[1]
            return obs[np.arange(n)[:, None], (np.arange(d)[None, :] + flat[:, None]) % d]
        h, w = obs.shape[1:]
        r, c = flat // w, flat % w
        rows = (np.arange(h)[None, :] + r[:, None]) % h
        cols = (np.arange(w)[None, :] + c[:, None]) % w
        return obs[np.arange(n)[:, None, None], rows[:, :, None], cols[:, None, :]]


class EMEstimator(_AlignmentEstimator):
    """Soft aligned-average reconstruction (monotone likelihood ascent)."""

    _kind = "em"

    def __init__(self, sigma=None, n_iter=50, init="mean", record_freqs=None, method="fft", random_state=None):
        self.sigma = sigma
        self.n_iter = n_iter
        self.init = init
        self.record_freqs = record_freqs
        self.method = method
        self.random_state = random_state


class HardAssignEstimator(_AlignmentEstimator):
    """Best-single-shift alignment reconstruction."""

    _kind = "hard"

    def __init__(self, sigma=None, n_iter=50, init="mean", record_freqs=None, method="fft", random_state=None):
        self.sigma = sigma
        self.n_iter = n_iter
        self.init = init
        self.record_freqs = record_freqs
        self.method = method
        self.random_state = random_state


class MomentumSGDEstimator(_AlignmentEstimator):
    """Momentum mini-batch SGD reconstruction."""

    _kind = "sgd"

    def __init__(
        self,
        sigma=None,
        n_iter=200,
        init="mean",
        record_freqs=None,
        method="fft",
        random_state=0,
        batch_size=256,
        alpha0=0.95,
        decay=0.99,
        beta1=0.9,
        beta2=0.999,
        eps=1e-8,
    ):
        self.sigma = sigma
        self.n_iter = n_iter
        self.init = init
        self.record_freqs = record_freqs
        self.method = method
        self.random_state = random_state
        self.batch_size = batch_size
        self.alpha0 = alpha0
        self.decay = decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps

    def _run_kwargs(self):
        return {
            "seed": self.random_state,
            "batch_size": self.batch_size,
            "schedule": exponential_schedule(self.alpha0, self.decay),
            "moment_rule": AdaptiveMoments(self.beta1, self.beta2),
            "eps": self.eps,
        }
