"""Dense PSD linear algebra and Gaussian density primitives.

All covariance arithmetic runs in float64 regardless of caller dtype;
belief-filter stability is dominated by the conditioning of these ops, so
network code may be lower precision but everything passing through here is
promoted.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "NotPSDError",
    "Gaussian",
    "cholesky",
    "solve_psd",
    "gaussian_logpdf",
    "symmetrize",
]

LN_2PI = float(np.log(2.0 * np.pi))

# Jitter ladder tried in order before declaring a matrix not PSD.  Learned
# covariances are routinely semi-definite to machine precision; the first
# attempt is jitter-free so exactly-PD inputs are factored unperturbed.
_JITTERS = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6)

_SYM_TOL = 1e-10


class NotPSDError(ValueError):
    """Matrix failed Cholesky factorization even after jitter escalation."""


def symmetrize(m: np.ndarray) -> np.ndarray:
    """Return the symmetric part (m + m.T) / 2."""
    return 0.5 * (m + m.T)


def _as_square(m) -> np.ndarray:
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    return a


def cholesky(m) -> np.ndarray:
    """Lower-triangular L with L @ L.T == m.

    Nearly-semidefinite inputs are floored by adding eps * I with eps
    escalating through the jitter ladder; raises NotPSDError if every
    attempt fails (i.e. the matrix has an eigenvalue below what 1e-6
    jitter can absorb).
    """
    a = _as_square(m)
    eye = np.eye(a.shape[0])
    for eps in _JITTERS:
        try:
            return np.linalg.cholesky(a + eps * eye if eps else a)
        except np.linalg.LinAlgError:
            continue
    raise NotPSDError(
        f"matrix is not PSD within jitter budget {_JITTERS[-1]:g}"
    )


def solve_psd(m, b) -> np.ndarray:
    """Solve m @ x = b for PSD m via Cholesky (with the same jitter ladder)."""
    a = _as_square(m)
    rhs = np.asarray(b, dtype=np.float64)
    if rhs.shape[0] != a.shape[0]:
        raise ValueError(
            f"rhs has leading dim {rhs.shape[0]}, expected {a.shape[0]}"
        )
    low = cholesky(a)
    # Forward then backward substitution; generic solves are fine at the
    # small dimensions this library targets.
    y = np.linalg.solve(low, rhs)
    return np.linalg.solve(low.T, y)


def gaussian_logpdf(x, mean, cov) -> float:
    """Log density of a multivariate normal at x."""
    xv = np.asarray(x, dtype=np.float64).reshape(-1)
    mv = np.asarray(mean, dtype=np.float64).reshape(-1)
    if xv.shape != mv.shape:
        raise ValueError(f"x has dim {xv.shape[0]}, mean has {mv.shape[0]}")
    cv = _as_square(cov)
    if cv.shape[0] != xv.shape[0]:
        raise ValueError(
            f"cov has dim {cv.shape[0]}, expected {xv.shape[0]}"
        )
    low = cholesky(cv)
    z = np.linalg.solve(low, xv - mv)
    logdet = 2.0 * float(np.sum(np.log(np.diag(low))))
    return -0.5 * (xv.size * LN_2PI + logdet + float(z @ z))


@dataclass(frozen=True)
class Gaussian:
    """Multivariate normal with a symmetric PSD covariance.

    The constructor promotes to float64, rejects non-finite entries and
    gross asymmetry, and stores the symmetrized covariance.  PSD-ness is
    enforced at the factorization sites (cholesky / solve_psd), not here,
    so construction stays cheap inside filtering loops.
    """

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        cov = _as_square(self.cov)
        if cov.shape[0] != mean.shape[0]:
            raise ValueError(
                f"mean has dim {mean.shape[0]} but cov is {cov.shape}"
            )
        if not np.all(np.isfinite(mean)) or not np.all(np.isfinite(cov)):
            raise ValueError("Gaussian parameters must be finite")
        if cov.size and np.max(np.abs(cov - cov.T)) > _SYM_TOL * max(
            1.0, float(np.max(np.abs(cov)))
        ):
            raise ValueError("covariance is not symmetric within tolerance")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", symmetrize(cov))

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def logpdf(self, x) -> float:
        return gaussian_logpdf(x, self.mean, self.cov)

    @classmethod
    def trusted(cls, mean: np.ndarray, cov: np.ndarray) -> "Gaussian":
        """Construct without validation.

        For hot loops whose inputs are float64 arrays already known to be
        finite and symmetric (filter updates, covariance-factor products);
        everything else should use the checked constructor.
        """
        obj = object.__new__(cls)
        object.__setattr__(obj, "mean", mean)
        object.__setattr__(obj, "cov", cov)
        return obj
