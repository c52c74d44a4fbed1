"""Multi-reference alignment under cyclic shifts.

Reconstruction of a signal from noisy, randomly shifted copies:
finite-sample EM-type estimators, the deterministic population-limit
operator with its Fourier-domain spectral diagnostics, statistical
drift/crossover analyses, and a reproducible experiment CLI.
"""

__version__ = "0.1.0"
