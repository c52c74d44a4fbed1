"""Noise-averaged (infinite-sample) alignment dynamics for 1-D signals.

The finite-sample soft aligned-average update converges, as the number of
observations grows, to a deterministic operator

    M(x) = E[ sum_ell gamma_ell(x; Y) T_ell^-1 Y ],    Y = T_S x_star + xi,

with S uniform over the cyclic group and xi ~ N(0, sigma^2 I). This module
evaluates M and its Jacobian by tensor-product Gauss-Hermite quadrature over
the noise, extracts the DFT-domain 2x2 frequency-pair blocks of the Jacobian
with closed-form eigenpairs, computes the per-frequency contraction factors
of the pure-noise regime, provides a closed-form small-signal approximation
of one update, and fits two-phase exponential decay rates to error curves.

Averaging over the latent shift S is exact: relabeling the alignment sum
shows every S-term equals the S = 0 term pointwise in xi (gamma_ell(x; T_S u)
= gamma_{ell-S}(x; u) while T_ell^-1 T_S u = T_{ell-S}^-1 u), so M is
evaluated from the single S = 0 term. ``exhaustive_shift_sum=True`` averages
all d terms explicitly as a cross-check.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial.hermite import hermgauss

from ._validate import as_signal, check_nonnegative_int, check_positive_int, check_sigma
from .estimators import _soft_weights, Trajectory
from .signals import (
    aligned_weighted_sum,
    correlate_shifts,
    cyclic_shift,
    dft,
    normalized_mse,
    orbit_distance,
    wrap_phase,
)

__all__ = [
    "QuadratureGrid",
    "make_grid",
    "population_em",
    "population_run",
    "JacobianMatrix",
    "population_jacobian",
    "FourierBlock",
    "SpectralReport",
    "fourier_blocks",
    "second_order_report",
    "alpha_factors",
    "lowsnr_approx_step",
    "two_phase_fit",
]

#: Default nodes per axis; 11^5 = 161,051 nodes for the d=5 operating points.
DEFAULT_NODES = 11

#: Hard cap on the tensor-grid size.
NODE_BUDGET = 2_000_000


@dataclass(eq=False)
class QuadratureGrid:
    """Tensor-product Gauss-Hermite rule for integrating against N(0, sigma^2 I_d).

    ``nodes`` has shape (m^d, d) and ``weights`` (m^d,); the weights are
    positive and sum to 1, and polynomials of total degree <= 2m - 1 are
    integrated exactly.
    """

    d: int
    m: int
    sigma: float
    nodes: np.ndarray = field(repr=False)
    weights: np.ndarray = field(repr=False)


def make_grid(d: int, m: int, sigma: float) -> QuadratureGrid:
    """Build the rescaled tensor grid: node t -> sigma*sqrt(2)*t, weight w -> w/sqrt(pi)."""
    d = check_positive_int(d, "d")
    m = check_positive_int(m, "m")
    sigma = check_sigma(sigma)
    if m**d > NODE_BUDGET:
        raise ValueError(f"quadrature grid m^d = {m}^{d} exceeds the node budget {NODE_BUDGET}")
    t, w = hermgauss(m)
    axis_nodes = sigma * np.sqrt(2.0) * t
    axis_weights = w / np.sqrt(np.pi)
    idx = np.stack(np.meshgrid(*([np.arange(m)] * d), indexing="ij"), axis=-1).reshape(-1, d)
    nodes = axis_nodes[idx]
    weights = np.prod(axis_weights[idx], axis=1)
    return QuadratureGrid(d=d, m=m, sigma=sigma, nodes=nodes, weights=weights)


def _resolve_grid(x, sigma, grid, m):
    x = as_signal(x, "signal")
    if x.ndim != 1:
        raise ValueError("population operators support 1-D signals only")
    sigma = check_sigma(sigma)
    if grid is None:
        grid = make_grid(x.shape[0], m, sigma)
    if grid.d != x.shape[0]:
        raise ValueError(f"grid dimension {grid.d} does not match signal length {x.shape[0]}")
    if not np.isclose(grid.sigma, sigma, rtol=1e-12, atol=0.0):
        raise ValueError(f"grid was built for sigma={grid.sigma}, got sigma={sigma}")
    return x, sigma, grid


def _single_shift_term(x, truth, sigma, grid, method, chunk_size):
    out = np.zeros_like(x)
    for start in range(0, grid.nodes.shape[0], chunk_size):
        Y = truth[None, :] + grid.nodes[start : start + chunk_size]
        G = _soft_weights(x, Y, sigma, method)
        G *= grid.weights[start : start + chunk_size, None]
        out += aligned_weighted_sum(G, Y, method=method)
    return out


def population_em(
    x,
    x_star,
    sigma,
    grid: QuadratureGrid | None = None,
    *,
    m: int = DEFAULT_NODES,
    exhaustive_shift_sum: bool = False,
    method: str = "fft",
    chunk_size: int = 1 << 18,
) -> np.ndarray:
    """One noise-averaged update M(x) for ground truth ``x_star``."""
    x, sigma, grid = _resolve_grid(x, sigma, grid, m)
    x_star = as_signal(x_star, "x_star")
    if x_star.shape != x.shape:
        raise ValueError(f"x_star shape {x_star.shape} does not match x {x.shape}")
    if not exhaustive_shift_sum:
        return _single_shift_term(x, x_star, sigma, grid, method, chunk_size)
    d = x.shape[0]
    out = np.zeros_like(x)
    for s in range(d):
        out += _single_shift_term(x, cyclic_shift(x_star, s), sigma, grid, method, chunk_size)
    return out / d


def population_run(
    init,
    x_star,
    sigma,
    T: int,
    grid: QuadratureGrid | None = None,
    *,
    m: int = DEFAULT_NODES,
    freqs=None,
    method: str = "fft",
    iterate_budget: int = 500_000,
) -> Trajectory:
    """Iterate the noise-averaged update ``T`` times, recording metrics.

    Columns: ``dist_orbit`` and ``mse_orbit`` against ``x_star`` (MSE is NaN
    for a zero truth), ``walltime_s``, plus ``phase_k<k>``/``mag_k<k>``
    (phase measured against the initialization) for requested frequencies.
    """
    import time

    T = check_nonnegative_int(T, "T")
    init, sigma, grid = _resolve_grid(init, sigma, grid, m)
    x_star = as_signal(x_star, "x_star")
    if x_star.shape != init.shape:
        raise ValueError(f"x_star shape {x_star.shape} does not match init {init.shape}")

    freqs = [int(k) for k in (freqs or [])]
    X0 = dft(init)
    truth_norm = float(np.linalg.norm(x_star))

    store = (T + 1) * init.size <= iterate_budget
    iterates = np.empty((T + 1,) + init.shape) if store else None
    cols = {name: np.full(T + 1, np.nan) for name in ["dist_orbit", "mse_orbit", "walltime_s"]}
    for k in freqs:
        cols[f"phase_k{k}"] = np.full(T + 1, np.nan)
        cols[f"mag_k{k}"] = np.full(T + 1, np.nan)

    x = init
    elapsed = 0.0
    for t in range(T + 1):
        if store:
            iterates[t] = x
        cols["dist_orbit"][t] = orbit_distance(x, x_star)
        if truth_norm > 0.0:
            cols["mse_orbit"][t] = normalized_mse(x, x_star, method=method)
        cols["walltime_s"][t] = elapsed
        Xt = dft(x)
        for k in freqs:
            kk = k % init.shape[0]
            c = Xt[kk]
            if np.abs(c) > 0.0:
                cols[f"phase_k{k}"][t] = wrap_phase(np.angle(c) - np.angle(X0[kk]))
            cols[f"mag_k{k}"][t] = np.abs(c)
        if t == T:
            break
        tic = time.perf_counter()
        x = population_em(x, x_star, sigma, grid, method=method)
        elapsed = time.perf_counter() - tic

    return Trajectory(iterates=iterates, final=x, columns=cols, shape=init.shape)


# ---------------------------------------------------------------------------
# Jacobian and its DFT-domain block spectrum


@dataclass(eq=False)
class JacobianMatrix:
    """d x d derivative of the noise-averaged update at ``point``."""

    matrix: np.ndarray
    point: np.ndarray
    x_star: np.ndarray
    sigma: float


def population_jacobian(
    x,
    x_star,
    sigma,
    grid: QuadratureGrid | None = None,
    *,
    m: int = DEFAULT_NODES,
    method: str = "quadrature",
    fd_step: float | None = None,
    chunk_size: int = 1 << 16,
) -> JacobianMatrix:
    """Jacobian of the noise-averaged update.

    ``method="quadrature"`` integrates the covariance form
    (1/sigma^2) E[ sum_ell gamma_ell (z_ell - zbar)(z_ell - zbar)^T ] with
    z_ell = T_ell^-1 Y; ``method="fd"`` uses central finite differences of
    :func:`population_em` as an independent cross-check.
    """
    x, sigma, grid = _resolve_grid(x, sigma, grid, m)
    x_star = as_signal(x_star, "x_star")
    if x_star.shape != x.shape:
        raise ValueError(f"x_star shape {x_star.shape} does not match x {x.shape}")
    d = x.shape[0]

    if method == "fd":
        h = fd_step if fd_step is not None else 1e-5 * (1.0 + float(np.linalg.norm(x)))
        J = np.empty((d, d))
        for j in range(d):
            e = np.zeros(d)
            e[j] = h
            J[:, j] = (
                population_em(x + e, x_star, sigma, grid) - population_em(x - e, x_star, sigma, grid)
            ) / (2.0 * h)
        return JacobianMatrix(matrix=J, point=x, x_star=x_star, sigma=sigma)
    if method != "quadrature":
        raise ValueError(f"unknown jacobian method {method!r}")

    back = (np.arange(d)[None, :] + np.arange(d)[:, None]) % d
    J = np.zeros((d, d))
    for start in range(0, grid.nodes.shape[0], chunk_size):
        Y = x_star[None, :] + grid.nodes[start : start + chunk_size]
        G = _soft_weights(x, Y, sigma, "fft")
        w = grid.weights[start : start + chunk_size]
        Z = Y[:, back]  # (batch, ell, j): back-shifted copies T_ell^-1 Y
        zbar = np.einsum("nl,nlj->nj", G, Z)
        J += np.einsum("n,nl,nlj,nlk->jk", w, G, Z, Z, optimize=True)
        J -= np.einsum("n,nj,nk->jk", w, zbar, zbar, optimize=True)
    return JacobianMatrix(matrix=J / sigma**2, point=x, x_star=x_star, sigma=sigma)


@dataclass(eq=False)
class FourierBlock:
    """One {k, d-k} frequency-pair block of the DFT-basis Jacobian."""

    k: int
    a: float
    b: complex
    lambda_u: float
    lambda_w: float
    phi: float
    u: np.ndarray
    w: np.ndarray


@dataclass(eq=False)
class SpectralReport:
    """Frequency-pair spectrum of a DFT-basis Jacobian (odd length only)."""

    d: int
    mean_eigenvalue: float
    blocks: list
    rho: float

    def to_matrix(self) -> np.ndarray:
        """Assemble the block-diagonal DFT-basis matrix (zero cross terms)."""
        M = np.zeros((self.d, self.d), dtype=np.complex128)
        M[0, 0] = self.mean_eigenvalue
        for blk in self.blocks:
            k, nk = blk.k, self.d - blk.k
            M[k, k] = blk.a
            M[nk, nk] = blk.a
            M[k, nk] = blk.b
            M[nk, k] = np.conj(blk.b)
        return M

    def to_json_dict(self) -> dict:
        return {
            "d": self.d,
            "rho": self.rho,
            "mean_eigenvalue": self.mean_eigenvalue,
            "blocks": [
                {
                    "k": blk.k,
                    "a_k": blk.a,
                    "b_k": {"re": blk.b.real, "im": blk.b.imag},
                    "lambda_u": blk.lambda_u,
                    "lambda_w": blk.lambda_w,
                    "phi_k": blk.phi,
                }
                for blk in self.blocks
            ],
        }


def _block_eigen(k, a1, a2, b):
    """Closed-form eigenpairs of the Hermitian block [[a1, b], [conj(b), a2]].

    Eigenvalues mu +/- Delta with mu the mean diagonal. The reported
    eigenvectors are the equal-diagonal forms
    u = (1/sqrt2)[e^{i phi}; e^{-i phi}], w = (1/(i sqrt2))[e^{i phi}; -e^{-i phi}]
    with phi = arg(-b)/2, for which B u = (a - |b|) u and B w = (a + |b|) w.
    """
    mu = 0.5 * (a1 + a2)
    delta = float(np.sqrt((0.5 * (a1 - a2)) ** 2 + np.abs(b) ** 2))
    phi = 0.5 * float(np.angle(-b)) if b != 0 else 0.0
    u = np.array([np.exp(1j * phi), np.exp(-1j * phi)]) / np.sqrt(2.0)
    w = np.array([np.exp(1j * phi), -np.exp(-1j * phi)]) / (1j * np.sqrt(2.0))
    return FourierBlock(
        k=k,
        a=mu,
        b=complex(b),
        lambda_u=mu - delta,
        lambda_w=mu + delta,
        phi=phi,
        u=u,
        w=w,
    )


def fourier_blocks(J) -> SpectralReport:
    """Extract the {k, d-k} blocks of F J F^H and diagonalize them exactly."""
    mat = J.matrix if isinstance(J, JacobianMatrix) else np.asarray(J, dtype=np.float64)
    d = mat.shape[0]
    if mat.shape != (d, d):
        raise ValueError("jacobian must be a square matrix")
    if d % 2 == 0:
        raise ValueError("frequency-pair blocks require an odd signal length")
    grid_k = np.arange(d)
    F = np.exp(-2j * np.pi * np.outer(grid_k, grid_k) / d) / np.sqrt(d)
    Jhat = F @ mat @ F.conj().T
    blocks = []
    for k in range(1, (d - 1) // 2 + 1):
        nk = d - k
        b = 0.5 * (Jhat[k, nk] + np.conj(Jhat[nk, k]))
        blocks.append(_block_eigen(k, Jhat[k, k].real, Jhat[nk, nk].real, b))
    rho = max(max(abs(blk.lambda_u), abs(blk.lambda_w)) for blk in blocks)
    return SpectralReport(d=d, mean_eigenvalue=float(Jhat[0, 0].real), blocks=blocks, rho=rho)


def second_order_report(x_star, sigma) -> SpectralReport:
    """Small-signal prediction of the DFT-basis Jacobian blocks.

    Per pair {k, d-k}: a_k = 1 - |X*[k]|^2 / sigma^2 and
    b_k = -(X*[k])^2 / sigma^2, with a zero mean block.
    """
    x_star = as_signal(x_star, "x_star")
    if x_star.ndim != 1:
        raise ValueError("frequency-pair blocks require a 1-D signal")
    d = x_star.shape[0]
    if d % 2 == 0:
        raise ValueError("frequency-pair blocks require an odd signal length")
    sigma = check_sigma(sigma)
    X = dft(x_star)
    blocks = []
    for k in range(1, (d - 1) // 2 + 1):
        a = 1.0 - np.abs(X[k]) ** 2 / sigma**2
        b = -(X[k] ** 2) / sigma**2
        blocks.append(_block_eigen(k, a, a, b))
    rho = max(max(abs(blk.lambda_u), abs(blk.lambda_w)) for blk in blocks)
    return SpectralReport(d=d, mean_eigenvalue=0.0, blocks=blocks, rho=rho)


# ---------------------------------------------------------------------------
# pure-noise contraction factors


def alpha_factors(
    x,
    sigma: float = 1.0,
    grid: QuadratureGrid | None = None,
    *,
    m: int = DEFAULT_NODES,
    method: str = "fft",
    chunk_size: int = 1 << 18,
) -> np.ndarray:
    """Per-frequency contraction factors of the pure-noise update.

    With observations that are pure noise, one update maps the spectrum
    X[k] -> alpha_k X[k] where

        alpha_k = 1 - d * sum_ell cos(2 pi k ell / d) E[gamma_0 gamma_ell].

    Returns alpha_k for k = 1..d-1. Every nonzero frequency of ``x`` must
    carry a nonzero coefficient.
    """
    x, sigma, grid = _resolve_grid(x, sigma, grid, m)
    d = x.shape[0]
    X = dft(x)
    if np.any(np.abs(X[1:]) <= 1e-13 * (1.0 + np.linalg.norm(x))):
        raise ValueError("alpha factors require nonzero coefficients at all k != 0")
    corr00 = np.zeros(d)
    for start in range(0, grid.nodes.shape[0], chunk_size):
        Y = grid.nodes[start : start + chunk_size]
        G = _soft_weights(x, Y, sigma, method)
        w = grid.weights[start : start + chunk_size]
        corr00 += (w[:, None] * G[:, 0:1] * G).sum(axis=0)
    ell = np.arange(d)
    k = np.arange(1, d)
    cosines = np.cos(2.0 * np.pi * np.outer(k, ell) / d)
    return 1.0 - d * cosines @ corr00


# ---------------------------------------------------------------------------
# small-signal closed-form update


def lowsnr_approx_step(x, x_star, sigma: float = 1.0) -> np.ndarray:
    """Closed-form second-order approximation of one noise-averaged update.

    Derived under the unit-noise normalization; other noise levels are
    handled by rescaling (x, x_star) by 1/sigma and the output by sigma.
    With w = softmax_ell <x_star, T_ell x> and the circular autocorrelation
    a(s) = <x, T_s x>:

        out = x + sum_ell w_ell [1 + S - q_ell] T_ell^-1 x_star - h2,

    where S = sum_{r1,r2} w_r1 w_r2 exp(a(r2 - r1)), q_ell =
    sum_r w_r exp(a(r - ell)), and h2 = sum_s exp(a(s))
    (sum_ell w_ell w_{ell+s}) T_s x.
    """
    x = as_signal(x, "x")
    x_star = as_signal(x_star, "x_star")
    if x.ndim != 1 or x_star.shape != x.shape:
        raise ValueError("inputs must be 1-D signals of equal length")
    sigma = check_sigma(sigma)
    if sigma != 1.0:
        return sigma * lowsnr_approx_step(x / sigma, x_star / sigma, 1.0)

    d = x.shape[0]
    w = _soft_weights(x, x_star[None, :], 1.0, "fft")[0]
    auto = correlate_shifts(x, x)  # a(s) = <x, T_s x>
    # E[ell, r] = exp(<T_ell x, T_r x>) = exp(a(r - ell))
    E = np.exp(auto[(np.arange(d)[None, :] - np.arange(d)[:, None]) % d])
    S = float(w @ E @ w)
    q = E @ w
    first = aligned_weighted_sum((w * (1.0 + S - q))[None, :], x_star[None, :])
    h2 = np.zeros_like(x)
    for s in range(d):
        h2 += np.exp(auto[s]) * float(np.dot(w, np.roll(w, -s))) * cyclic_shift(x, s)
    return x + first - h2


# ---------------------------------------------------------------------------
# two-phase decay fitting


def two_phase_fit(errors):
    """Fit a two-piece log-linear decay to a positive error sequence.

    Searches every split index in [5, T - 5] (the boundary point is shared
    by both lines), minimizing the total squared residual of the two
    least-squares fits to log(error). Returns (rate_early, rate_late,
    t_split) with rates the negated slopes, positive for decaying input.
    """
    e = np.asarray(errors, dtype=np.float64).ravel()
    if e.shape[0] < 20:
        raise ValueError("two-phase fit needs at least 20 points")
    if np.any(e <= 0.0) or not np.all(np.isfinite(e)):
        raise ValueError("error sequence must be positive and finite")
    loge = np.log(e)
    t = np.arange(e.shape[0], dtype=np.float64)
    T = e.shape[0] - 1

    best = None
    for s in range(5, T - 4):
        (sl1, _), r1 = _ls_line(t[: s + 1], loge[: s + 1])
        (sl2, _), r2 = _ls_line(t[s:], loge[s:])
        total = r1 + r2
        if best is None or total < best[0]:
            best = (total, -sl1, -sl2, s)
    _, rate_early, rate_late, t_split = best
    return rate_early, rate_late, t_split


def _ls_line(t, y):
    coeffs, residuals, *_ = np.polyfit(t, y, 1, full=True)
    ssr = float(residuals[0]) if residuals.size else 0.0
    return (coeffs[0], coeffs[1]), ssr
