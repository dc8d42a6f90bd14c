"""Pure numpy implementations of the hot elementwise kernels.

These are the reference versions; ``_kernels.pyx`` mirrors them one to one.
"""
import numpy as np

#: series / asymptotic switch point for I1/I0
CROSSOVER = 50.0

# Coefficients of 1/x^k in the large-argument expansion of I1(x)/I0(x).
ASYMPTOTIC_COEFFS = (
    1.0,
    -1.0 / 2.0,
    -1.0 / 8.0,
    -1.0 / 8.0,
    -25.0 / 128.0,
    -13.0 / 32.0,
    -1073.0 / 1024.0,
    -103.0 / 32.0,
    -375733.0 / 32768.0,
)

_EPS = np.finfo(np.float64).eps


def bessel_ratio_series(kappa):
    """I1/I0 from the summed power series; accurate for moderate kappa."""
    kappa = np.asarray(kappa, dtype=np.float64)
    q = 0.25 * kappa * kappa
    term = np.ones_like(kappa)
    s0 = np.ones_like(kappa)
    s1 = np.ones_like(kappa)
    k = 0
    while True:
        k += 1
        term = term * q / (k * k)
        s0 = s0 + term
        s1 = s1 + term / (k + 1)
        if np.all(term <= _EPS * s0 * 0.25):
            break
    return 0.5 * kappa * s1 / s0


def bessel_ratio_asymptotic(kappa):
    kappa = np.asarray(kappa, dtype=np.float64)
    t = 1.0 / kappa
    acc = np.zeros_like(kappa)
    for c in reversed(ASYMPTOTIC_COEFFS):
        acc = acc * t + c
    return acc


def bessel_ratio(kappa):
    kappa = np.asarray(kappa, dtype=np.float64)
    out = np.empty_like(kappa)
    small = kappa <= CROSSOVER
    if np.any(small):
        out[small] = bessel_ratio_series(kappa[small])
    if np.any(~small):
        out[~small] = bessel_ratio_asymptotic(kappa[~small])
    return out


def phase_reconstruct(z, y, sigma2, filtered):
    """Return ``z * exp(j angle y)``, weighted by I1/I0(2 z |y| / sigma2) if filtered.

    Zero entries of ``y`` get phase 0.
    """
    mag = np.abs(y)
    nz = mag > 0.0
    unit = np.ones_like(y)
    unit[nz] = y[nz] / mag[nz]
    out = z * unit
    if filtered:
        out = out * bessel_ratio(2.0 * z * mag / sigma2)
    return out
