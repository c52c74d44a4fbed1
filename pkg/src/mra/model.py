"""Synthetic dataset generation and persistence.

An observation is a uniformly random cyclic shift of a ground-truth signal
plus i.i.d. Gaussian noise:

    y_i = T_{s_i} x_star + xi_i,    s_i ~ Uniform(group),  xi_i ~ N(0, sigma^2 I).

Randomness comes from numpy's counter-based Philox generator seeded with the
dataset seed; shifts are drawn first, then the noise block, and Gaussian
variates use numpy's ziggurat method. Generation is a pure function of the
config (identical bytes for identical seeds). A parallel implementation must
derive each observation's noise from an independent substream keyed by
(seed, i); this serial implementation draws the whole block from one stream.

``sigma = 0`` is an exact no-noise special case: observations are then
bit-identical shifted copies of the truth.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._validate import as_signal, check_positive_int, check_sigma
from .signals import cyclic_shift, load_pgm, load_signal_csv, n_shifts

__all__ = [
    "WAVEFORMS",
    "make_waveform",
    "ModelConfig",
    "ObservationSet",
    "generate",
    "snr",
    "save",
    "load",
    "DatasetFormatError",
]

_MAGIC = b"MRADSET1"
_VERSION = 1

WAVEFORMS = ("zero", "impulse", "cosine", "bump", "random")


class DatasetFormatError(ValueError):
    """Raised for corrupt, truncated, or wrong-version dataset files."""


def make_waveform(name: str, shape, seed: int | None = None) -> np.ndarray:
    """Build a named synthetic signal (unit norm except ``zero``).

    ``random`` draws a fixed Gaussian signal from its own Philox substream
    and therefore requires a seed.
    """
    shape = tuple(int(s) for s in (shape if np.iterable(shape) else (shape,)))
    if any(s < 1 for s in shape) or len(shape) not in (1, 2):
        raise ValueError(f"invalid signal shape {shape}")
    if name == "zero":
        return np.zeros(shape)
    if name == "impulse":
        x = np.zeros(shape)
        x.flat[0] = 1.0
        return x
    if name == "cosine":
        if len(shape) == 1:
            x = np.cos(2.0 * np.pi * np.arange(shape[0]) / shape[0])
        else:
            r = np.cos(2.0 * np.pi * np.arange(shape[0]) / shape[0])
            c = np.cos(2.0 * np.pi * np.arange(shape[1]) / shape[1])
            x = np.outer(r, c)
        return x / np.linalg.norm(x)
    if name == "bump":
        def bump_1d(m):
            j = np.arange(m)
            dist = np.minimum(j, m - j)  # cyclic distance from index 0
            return np.exp(-0.5 * (dist / max(m / 8.0, 1.0)) ** 2)
        if len(shape) == 1:
            x = bump_1d(shape[0])
        else:
            x = np.outer(bump_1d(shape[0]), bump_1d(shape[1]))
        return x / np.linalg.norm(x)
    if name == "random":
        if seed is None:
            raise ValueError("waveform 'random' requires a seed")
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy=int(seed), spawn_key=(0x77,))))
        x = rng.standard_normal(shape)
        return x / np.linalg.norm(x)
    raise ValueError(f"unknown waveform {name!r}; known: {', '.join(WAVEFORMS)}")


@dataclass(eq=False)
class ModelConfig:
    """Dataset recipe: size, noise level, seed, and the ground-truth source.

    ``truth`` is a literal signal array, a path to a signal file
    (.csv or .pgm), or a waveform name from :data:`WAVEFORMS`; names need
    ``shape``. ``truth_norm`` optionally rescales the truth to a target
    l2 norm (leaving an exact zero signal unchanged).
    """

    n: int
    sigma: float
    seed: int
    truth: object
    shape: tuple | None = None
    truth_norm: float | None = None

    def __post_init__(self):
        self.n = check_positive_int(self.n, "n")
        self.sigma = check_sigma(self.sigma, allow_zero=True)
        self.seed = int(self.seed)
        if self.shape is not None:
            self.shape = tuple(int(s) for s in self.shape)
            if any(s < 1 for s in self.shape):
                raise ValueError(f"invalid shape {self.shape}")

    def resolve_truth(self) -> np.ndarray:
        x = resolve_truth_source(self.truth, self.shape, self.seed)
        if self.truth_norm is not None:
            nrm = np.linalg.norm(x)
            if nrm > 0:
                x = x * (float(self.truth_norm) / nrm)
            elif float(self.truth_norm) != 0.0:
                raise ValueError("cannot rescale an all-zero truth to a nonzero norm")
        if self.shape is not None and x.shape != self.shape:
            raise ValueError(f"truth shape {x.shape} does not match configured shape {self.shape}")
        return x


def resolve_truth_source(truth, shape=None, seed: int | None = None) -> np.ndarray:
    """Resolve a truth source (array, file path, or waveform name) to a signal."""
    if isinstance(truth, (str, Path)):
        name = str(truth)
        if name in WAVEFORMS:
            if shape is None:
                raise ValueError(f"waveform {name!r} needs an explicit shape")
            return make_waveform(name, shape, seed=seed)
        path = Path(name)
        if not path.exists():
            raise IOError(f"truth source {name!r} is neither a known waveform nor a readable file")
        if path.suffix.lower() == ".pgm":
            return load_pgm(path)
        return load_signal_csv(path)
    return as_signal(truth, "truth")


@dataclass(eq=False)
class ObservationSet:
    """A batch of noisy shifted observations together with its generation record.

    ``observations`` has shape (n, d) or (n, H, W); ``true_shifts`` is the
    matching (n,) or (n, 2) integer array of planted shifts.
    """

    observations: np.ndarray
    sigma: float
    true_shifts: np.ndarray
    ground_truth: np.ndarray
    seed: int = 0

    def __post_init__(self):
        self.observations = np.ascontiguousarray(self.observations, dtype=np.float64)
        self.ground_truth = as_signal(self.ground_truth, "ground_truth")
        self.true_shifts = np.ascontiguousarray(self.true_shifts, dtype=np.int64)
        self.sigma = check_sigma(self.sigma, allow_zero=True)
        self.seed = int(self.seed)
        if self.observations.ndim != self.ground_truth.ndim + 1 or self.observations.shape[1:] != self.ground_truth.shape:
            raise ValueError(
                f"observations {self.observations.shape} do not share the truth's geometry {self.ground_truth.shape}"
            )
        if self.n < 1:
            raise ValueError("need at least one observation")
        want = (self.n,) if self.ground_truth.ndim == 1 else (self.n, 2)
        if self.true_shifts.shape != want:
            raise ValueError(f"true_shifts shape {self.true_shifts.shape}, expected {want}")

    @property
    def n(self) -> int:
        return self.observations.shape[0]

    @property
    def shape(self) -> tuple:
        return self.ground_truth.shape

    @property
    def group_size(self) -> int:
        return n_shifts(self.shape)


def generate(cfg: ModelConfig) -> ObservationSet:
    """Draw a dataset; deterministic given the config (seed included)."""
    truth = cfg.resolve_truth()
    rng = np.random.Generator(np.random.Philox(cfg.seed))
    shape = truth.shape
    if truth.ndim == 1:
        d = shape[0]
        shifts = rng.integers(0, d, size=cfg.n, dtype=np.int64)
        # y_i[j] = truth[(j - s_i) mod d], gathered for the whole batch at once
        obs = truth[(np.arange(d)[None, :] - shifts[:, None]) % d]
    else:
        h, w = shape
        shifts = np.column_stack(
            [
                rng.integers(0, h, size=cfg.n, dtype=np.int64),
                rng.integers(0, w, size=cfg.n, dtype=np.int64),
            ]
        )
        rows = (np.arange(h)[None, :] - shifts[:, 0:1]) % h
        cols = (np.arange(w)[None, :] - shifts[:, 1:2]) % w
        obs = truth[rows[:, :, None], cols[:, None, :]]
    if cfg.sigma > 0.0:
        obs += cfg.sigma * rng.standard_normal(obs.shape)
    return ObservationSet(obs, cfg.sigma, shifts, truth, cfg.seed)


def snr(x_star, sigma) -> float:
    """Signal-to-noise ratio ``||x_star||^2 / (d * sigma^2)``."""
    x_star = as_signal(x_star, "x_star")
    sigma = check_sigma(sigma)
    return float(np.dot(x_star.ravel(), x_star.ravel()) / (x_star.size * sigma**2))


def save(dataset: ObservationSet, path) -> None:
    """Write a dataset container: magic, JSON header, little-endian binary payload."""
    header = {
        "version": _VERSION,
        "geometry": "Line" if dataset.ground_truth.ndim == 1 else "Grid",
        "shape": list(dataset.shape),
        "n": dataset.n,
        "sigma": dataset.sigma,
        "seed": dataset.seed,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(dataset.ground_truth.astype("<f8").tobytes())
        fh.write(dataset.true_shifts.astype("<i8").tobytes())
        fh.write(dataset.observations.astype("<f8").tobytes())


def load(path) -> ObservationSet:
    """Read a dataset container written by :func:`save`; roundtrip is bit-exact."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < len(_MAGIC) + 8 or data[: len(_MAGIC)] != _MAGIC:
        raise DatasetFormatError(f"{path}: not a dataset container (bad magic)")
    (hlen,) = struct.unpack_from("<Q", data, len(_MAGIC))
    hdr_start = len(_MAGIC) + 8
    if hdr_start + hlen > len(data):
        raise DatasetFormatError(f"{path}: truncated header")
    try:
        header = json.loads(data[hdr_start : hdr_start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DatasetFormatError(f"{path}: unreadable header ({exc})") from None
    if header.get("version") != _VERSION:
        raise DatasetFormatError(
            f"{path}: unsupported container version {header.get('version')!r}, expected {_VERSION}"
        )
    shape = tuple(int(s) for s in header["shape"])
    n = int(header["n"])
    d = int(np.prod(shape))
    shift_cols = 1 if len(shape) == 1 else 2

    pos = hdr_start + hlen
    need = 8 * (d + n * shift_cols + n * d)
    if pos + need != len(data):
        raise DatasetFormatError(f"{path}: payload has {len(data) - pos} bytes, expected {need}")

    truth = np.frombuffer(data, dtype="<f8", count=d, offset=pos).reshape(shape)
    pos += 8 * d
    shifts = np.frombuffer(data, dtype="<i8", count=n * shift_cols, offset=pos)
    shifts = shifts.reshape((n,) if shift_cols == 1 else (n, 2))
    pos += 8 * n * shift_cols
    obs = np.frombuffer(data, dtype="<f8", count=n * d, offset=pos).reshape((n,) + shape)
    return ObservationSet(obs.copy(), float(header["sigma"]), shifts.copy(), truth.copy(), int(header["seed"]))
