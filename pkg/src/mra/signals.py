"""Cyclic shift-group actions, unitary DFT, and group-invariant metrics.

Signals are real numpy arrays. A 1-D array of length d carries the cyclic
group Z_d acting by rotation; a 2-D array of shape (H, W) carries the
product group Z_H x Z_W acting by torus rotations. The shift operator is

    (T_ell z)[j] = z[(j - ell) mod d]

so a positive shift moves content toward higher indices, and ``T_ell ** -1``
is the shift by ``-ell``. All group elements are enumerated in row-major
order; for grids the flat index of shift (a, b) is ``a * W + b``.

The DFT is the unitary convention (1/sqrt(d) in both directions, applied
separably per axis for grids), under which shifting by ell multiplies
coefficient k by exp(-2j*pi*k*ell/d) and Parseval holds with no extra
factors. Frequencies follow numpy's ordering, so k and (d - k) mod d are
conjugate bins for real signals.
"""

from __future__ import annotations

import numpy as np

from ._validate import as_signal, as_spectrum, as_shift, check_same_geometry

__all__ = [
    "cyclic_shift",
    "shift_indices",
    "n_shifts",
    "shift_matrix",
    "dft",
    "idft",
    "orbit_distance",
    "normalized_mse",
    "wrap_phase",
    "phase_difference_sq",
    "mean_project",
    "pearson_cc",
    "correlate_shifts",
    "aligned_weighted_sum",
    "save_signal_csv",
    "load_signal_csv",
    "save_pgm",
    "load_pgm",
]


# ---------------------------------------------------------------------------
# group action


def cyclic_shift(x, ell):
    """Apply the cyclic shift ``T_ell`` to a signal.

    ``ell`` is an int for 1-D signals and a (row, col) pair for 2-D ones;
    negative entries denote inverse shifts.
    """
    x = as_signal(x)
    ell = as_shift(x.shape, ell)
    if x.ndim == 1:
        return np.roll(x, ell)
    return np.roll(x, ell, axis=(0, 1))


def shift_indices(shape):
    """All group elements for a signal shape, in canonical row-major order."""
    if len(shape) == 1:
        return list(range(shape[0]))
    return [(a, b) for a in range(shape[0]) for b in range(shape[1])]


def n_shifts(shape) -> int:
    """Group size for a signal shape."""
    size = 1
    for s in shape:
        size *= int(s)
    return size


def shift_matrix(x) -> np.ndarray:
    """Stack all shifted copies ``T_ell x`` as rows, flattened row-major.

    Row ``i`` is the copy shifted by the i-th canonical group element, so
    the result has shape (group size, x.size).
    """
    x = as_signal(x)
    rows = np.empty((n_shifts(x.shape), x.size))
    for i, ell in enumerate(shift_indices(x.shape)):
        rows[i] = cyclic_shift(x, ell).ravel()
    return rows


# ---------------------------------------------------------------------------
# unitary DFT


def dft(x) -> np.ndarray:
    """Unitary DFT of a signal (complex array of the same shape)."""
    x = as_signal(x)
    if x.ndim == 1:
        return np.fft.fft(x) / np.sqrt(x.size)
    return np.fft.fft2(x) / np.sqrt(x.size)


def idft(X) -> np.ndarray:
    """Inverse unitary DFT, returning a real signal.

    Raises if the spectrum is not conjugate-symmetric (the inverse would
    be complex), since signals are real by construction.
    """
    X = as_spectrum(X)
    if X.ndim == 1:
        z = np.fft.ifft(X) * np.sqrt(X.size)
    else:
        z = np.fft.ifft2(X) * np.sqrt(X.size)
    scale = 1.0 + np.linalg.norm(X.ravel())
    if np.max(np.abs(z.imag)) > 1e-8 * scale:
        raise ValueError("spectrum is not conjugate-symmetric; inverse is not a real signal")
    return np.ascontiguousarray(z.real)


# ---------------------------------------------------------------------------
# batched correlations against all shifts


def correlate_shifts(Y, x, method: str = "fft") -> np.ndarray:
    """Inner products of observations with every shifted copy of a template.

    ``Y`` is either a single signal with ``x``'s shape or a batch with one
    leading axis. Returns ``<y_i, T_ell x>`` for every group element ell in
    canonical order: shape (group size,) for a single signal, else
    (n, group size).

    ``method="fft"`` uses cyclic cross-correlation; ``method="direct"``
    computes explicit inner products against ``shift_matrix`` and is kept
    as the reference path.
    """
    x = as_signal(x, "template")
    Y = np.asarray(Y, dtype=np.float64)
    single = Y.shape == x.shape
    if single:
        Y = Y[None, ...]
    if Y.shape[1:] != x.shape:
        raise ValueError(f"observation batch {Y.shape} does not match template shape {x.shape}")
    n = Y.shape[0]

    if method == "direct":
        corr = Y.reshape(n, -1) @ shift_matrix(x).T
    elif method == "fft":
        if x.ndim == 1:
            d = x.size
            corr = np.fft.irfft(np.fft.rfft(Y, axis=-1) * np.conj(np.fft.rfft(x)), n=d, axis=-1)
        else:
            h, w = x.shape
            prod = np.fft.rfft2(Y, axes=(-2, -1)) * np.conj(np.fft.rfft2(x))
            corr = np.fft.irfft2(prod, s=(h, w), axes=(-2, -1)).reshape(n, -1)
    else:
        raise ValueError(f"unknown method {method!r}")

    corr = corr.reshape(n, -1)
    return corr[0] if single else corr


def aligned_weighted_sum(G, Y, method: str = "fft") -> np.ndarray:
    """Sum of back-aligned observations, ``sum_i sum_ell G[i, ell] T_ell^-1 y_i``.

    ``G`` has shape (n, group size) with shifts in canonical order and ``Y``
    is the matching observation batch. Returns a signal of ``Y.shape[1:]``.
    The FFT path accumulates the per-observation products in the Fourier
    domain and inverts once; the direct path loops over group elements.
    """
    Y = np.asarray(Y, dtype=np.float64)
    G = np.asarray(G, dtype=np.float64)
    shape = Y.shape[1:]
    if G.shape != (Y.shape[0], n_shifts(shape)):
        raise ValueError(f"weights shape {G.shape} does not match batch {Y.shape}")

    if method == "direct":
        out = np.zeros(shape)
        for i, ell in enumerate(shift_indices(shape)):
            neg = -ell if isinstance(ell, int) else (-ell[0], -ell[1])
            shifted = np.roll(Y, neg, axis=-1) if len(shape) == 1 else np.roll(Y, neg, axis=(-2, -1))
            out += np.tensordot(G[:, i], shifted, axes=(0, 0))
        return out
    if method != "fft":
        raise ValueError(f"unknown method {method!r}")

    if len(shape) == 1:
        d = shape[0]
        acc = np.sum(np.fft.rfft(Y, axis=-1) * np.conj(np.fft.rfft(G, axis=-1)), axis=0)
        return np.fft.irfft(acc, n=d)
    h, w = shape
    Gw = G.reshape(Y.shape[0], h, w)
    acc = np.sum(np.fft.rfft2(Y, axes=(-2, -1)) * np.conj(np.fft.rfft2(Gw, axes=(-2, -1))), axis=0)
    return np.fft.irfft2(acc, s=(h, w))


# ---------------------------------------------------------------------------
# metrics


def orbit_distance(u, v, method: str = "fft") -> float:
    """Group-invariant distance ``min_ell ||u - T_ell v||``.

    ``method="fft"`` locates the best shift by cyclic cross-correlation and
    evaluates the distance explicitly there (so orbit members give exactly 0);
    ``method="direct"`` enumerates every shift and is kept permanently as the
    oracle.
    """
    u = as_signal(u, "u")
    v = as_signal(v, "v")
    check_same_geometry(u, v)
    if method == "direct":
        best = np.inf
        for ell in shift_indices(u.shape):
            best = min(best, float(np.linalg.norm(u - cyclic_shift(v, ell))))
        return best
    corr = correlate_shifts(u, v, method=method)
    ell = shift_indices(u.shape)[int(np.argmax(corr))]
    return float(np.linalg.norm(u - cyclic_shift(v, ell)))


def normalized_mse(xhat, x, method: str = "fft") -> float:
    """Single-realization normalized error ``d_orb(xhat, x)^2 / ||x||^2``.

    Averaging over realizations is the experiment layer's job.
    """
    x = as_signal(x, "reference")
    nrm2 = float(np.dot(x.ravel(), x.ravel()))
    if nrm2 == 0.0:
        raise ValueError("reference signal has zero norm; normalized error undefined")
    return orbit_distance(xhat, x, method=method) ** 2 / nrm2


def wrap_phase(theta):
    """Wrap angles to the principal interval (-pi, pi]."""
    theta = np.asarray(theta, dtype=np.float64)
    wrapped = np.mod(theta + np.pi, 2.0 * np.pi) - np.pi
    wrapped = np.where(wrapped == -np.pi, np.pi, wrapped)
    return wrapped if wrapped.ndim else float(wrapped)


def phase_difference_sq(A, B, k) -> float:
    """Squared principal-value phase difference of two spectra at frequency k.

    ``k`` is an int for 1-D spectra or a (row, col) pair for 2-D ones,
    reduced modulo the axis lengths. Raises when either coefficient is
    exactly zero (phase undefined).
    """
    A = as_spectrum(A, "A")
    B = as_spectrum(B, "B")
    check_same_geometry(A, B, "spectra")
    k = as_shift(A.shape, k, "frequency")
    a = A[k] if A.ndim == 1 else A[k[0], k[1]]
    b = B[k] if B.ndim == 1 else B[k[0], k[1]]
    if abs(a) == 0.0 or abs(b) == 0.0:
        raise ValueError(f"phase undefined: zero coefficient at frequency {k}")
    diff = wrap_phase(np.angle(a) - np.angle(b))
    return float(diff) ** 2


def mean_project(x) -> np.ndarray:
    """Project onto constant signals: every entry becomes the overall mean."""
    x = as_signal(x)
    return np.full_like(x, np.mean(x))


def pearson_cc(u, v) -> float:
    """Centered correlation coefficient of two signals; inputs must be non-constant."""
    u = as_signal(u, "u")
    v = as_signal(v, "v")
    check_same_geometry(u, v)
    if np.ptp(u) == 0.0 or np.ptp(v) == 0.0:
        raise ValueError("pearson_cc undefined for constant signals")
    uc = u.ravel() - u.mean()
    vc = v.ravel() - v.mean()
    return float(np.dot(uc, vc) / (np.linalg.norm(uc) * np.linalg.norm(vc)))


# ---------------------------------------------------------------------------
# persistence


def save_signal_csv(path, x) -> None:
    """Write a signal as CSV: a geometry header line, then one value per line."""
    x = as_signal(x)
    if x.ndim == 1:
        header = f"# geometry=Line d={x.size}"
    else:
        header = f"# geometry=Grid h={x.shape[0]} w={x.shape[1]}"
    lines = [header] + [f"{v:.17g}" for v in x.ravel()]
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_signal_csv(path) -> np.ndarray:
    """Read a signal written by :func:`save_signal_csv`."""
    with open(path, "r", encoding="ascii") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines or not lines[0].startswith("#"):
        raise ValueError(f"{path}: missing geometry header line")
    fields = dict(
        tok.split("=", 1) for tok in lines[0].lstrip("#").split() if "=" in tok
    )
    geometry = fields.get("geometry")
    values = np.array([float(v) for v in lines[1:]])
    if geometry == "Line":
        d = int(fields["d"])
        if values.size != d:
            raise ValueError(f"{path}: expected {d} values, found {values.size}")
        return as_signal(values)
    if geometry == "Grid":
        h, w = int(fields["h"]), int(fields["w"])
        if values.size != h * w:
            raise ValueError(f"{path}: expected {h * w} values, found {values.size}")
        return as_signal(values.reshape(h, w))
    raise ValueError(f"{path}: unknown geometry {geometry!r}")


def save_pgm(path, x) -> None:
    """Write a 2-D signal as binary PGM (P5, maxval 255), clipping to [0, 1]."""
    x = as_signal(x)
    if x.ndim != 2:
        raise ValueError("PGM output requires a 2-D signal")
    quant = np.rint(np.clip(x, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = x.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(quant.tobytes())


def load_pgm(path) -> np.ndarray:
    """Read a binary PGM (P5, maxval 255) into a 2-D signal with values in [0, 1]."""
    with open(path, "rb") as fh:
        data = fh.read()

    # Header is whitespace-separated tokens with '#' comments running to EOL.
    tokens = []
    pos = 0
    while len(tokens) < 4:
        if pos >= len(data):
            raise ValueError(f"{path}: truncated PGM header")
        ch = data[pos : pos + 1]
        if ch.isspace():
            pos += 1
        elif ch == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        else:
            start = pos
            while pos < len(data) and not data[pos : pos + 1].isspace():
                pos += 1
            tokens.append(data[start:pos])
    pos += 1  # single whitespace after maxval precedes the raster

    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (P5) file")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}, expected 255")
    raster = data[pos : pos + w * h]
    if len(raster) != w * h:
        raise ValueError(f"{path}: truncated PGM raster")
    img = np.frombuffer(raster, dtype=np.uint8).reshape(h, w)
    return img.astype(np.float64) / 255.0
