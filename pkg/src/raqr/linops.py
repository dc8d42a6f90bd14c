"""Dense complex linear algebra and special functions used by the solvers.

Matrices are plain numpy arrays: complex128 for complex matrices and float64
for real ones. Every function returns a new array and never mutates inputs.
"""
import math

import numpy as np

from raqr import kernels
from raqr.errors import DomainError, ShapeError

__all__ = [
    "as_complex",
    "as_real",
    "matmul",
    "pseudo_inverse",
    "bessel_ratio",
    "phase_project",
    "hadamard",
    "add",
    "subtract",
    "magnitude",
    "conjugate",
    "elementwise",
]


def as_complex(a):
    a = np.asarray(a, dtype=np.complex128)
    if a.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {a.shape}")
    return a


def as_real(a):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {a.shape}")
    return a


def _check_finite(a, what):
    if not np.all(np.isfinite(a)):
        raise DomainError(f"{what} produced non-finite entries")
    return a


def matmul(a, b):
    """Complex matrix product ``a @ b``."""
    a = as_complex(a)
    b = as_complex(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return _check_finite(a @ b, "matmul")


def pseudo_inverse(a):
    """Moore-Penrose pseudo-inverse via the SVD.

    Singular values at or below ``eps * max(rows, cols) * s_max`` are
    treated as zero. An all-zero input returns the zero matrix of the
    transposed shape.
    """
    a = as_complex(a)
    if a.size == 0:
        raise ShapeError("pseudo_inverse: empty matrix")
    if not np.all(np.isfinite(a)):
        raise DomainError("pseudo_inverse: input has non-finite entries")
    u, s, vh = np.linalg.svd(a, full_matrices=False)
    rows, cols = a.shape
    if s.size == 0 or s[0] == 0.0:
        return np.zeros((cols, rows), dtype=np.complex128)
    tol = np.finfo(np.float64).eps * max(rows, cols) * s[0]
    keep = s > tol
    inv_s = np.zeros_like(s)
    inv_s[keep] = 1.0 / s[keep]
    return (vh.conj().T * inv_s) @ u.conj().T


def numerical_rank(a):
    a = as_complex(a)
    s = np.linalg.svd(a, compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        return 0
    tol = np.finfo(np.float64).eps * max(a.shape) * s[0]
    return int(np.sum(s > tol))


def bessel_ratio(kappa):
    """``I1(kappa) / I0(kappa)`` for scalar or array ``kappa >= 0``.

    Uses the power series up to ``kappa = 50`` and a large-argument
    expansion of the ratio beyond, so neither Bessel function is formed
    where it could overflow.
    """
    arr = np.asarray(kappa, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise DomainError("bessel_ratio: kappa must be finite")
    if np.any(arr < 0.0):
        raise DomainError("bessel_ratio: kappa must be nonnegative")
    out = kernels.bessel_ratio(arr)
    if np.ndim(kappa) == 0:
        return float(out)
    return out


def phase_project(z, y):
    """Entries with magnitude ``z`` and the phase of ``y``.

    Where ``y`` is exactly zero the phase is taken as 0, so the result is
    ``z + 0j`` there.
    """
    z = as_real(z)
    y = as_complex(y)
    if z.shape != y.shape:
        raise ShapeError(f"phase_project: Z shape {z.shape} != Y shape {y.shape}")
    if np.any(z < 0.0):
        raise DomainError("phase_project: magnitudes must be nonnegative")
    return kernels.phase_reconstruct(z, y, 1.0, False)


def _binary(a, b, name):
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ShapeError(f"{name}: shape {a.shape} != {b.shape}")
    return a, b


def hadamard(a, b):
    a, b = _binary(a, b, "hadamard")
    return a * b


def add(a, b):
    a, b = _binary(a, b, "add")
    return a + b


def subtract(a, b):
    a, b = _binary(a, b, "subtract")
    return a - b


def magnitude(a):
    return np.abs(np.asarray(a, dtype=np.complex128))


def conjugate(a):
    return np.conj(np.asarray(a, dtype=np.complex128))


_OPS = {
    "hadamard": hadamard,
    "mul": hadamard,
    "add": add,
    "subtract": subtract,
    "sub": subtract,
}
_UNARY = {"magnitude": magnitude, "abs": magnitude, "conjugate": conjugate, "conj": conjugate}


def elementwise(a, b=None, op="hadamard"):
    """Dispatch an entrywise operation by name.

    Binary ops: ``hadamard``/``mul``, ``add``, ``subtract``/``sub``.
    Unary ops (``b`` ignored): ``magnitude``/``abs``, ``conjugate``/``conj``.
    """
    if op in _UNARY:
        return _UNARY[op](a)
    try:
        fn = _OPS[op]
    except KeyError:
        raise DomainError(f"elementwise: unknown op {op!r}") from None
    if b is None:
        raise ShapeError(f"elementwise: {op} needs two operands")
    return fn(a, b)


def db_to_linear(db):
    return 10.0 ** (db / 10.0)


def linear_to_db(x):
    return 10.0 * math.log10(x)
