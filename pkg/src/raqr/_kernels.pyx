# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the elementwise kernels in ``_kernels_py``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, hypot

cnp.import_array()

cdef double CROSSOVER = 50.0
cdef double EPS = 2.220446049250313e-16
cdef double[9] COEFFS = [
    1.0, -1.0 / 2.0, -1.0 / 8.0, -1.0 / 8.0, -25.0 / 128.0, -13.0 / 32.0,
    -1073.0 / 1024.0, -103.0 / 32.0, -375733.0 / 32768.0,
]


cdef inline double _ratio_series(double x) nogil:
    cdef double q = 0.25 * x * x
    cdef double term = 1.0, s0 = 1.0, s1 = 1.0
    cdef int k = 0
    while True:
        k += 1
        term = term * q / (k * k)
        s0 += term
        s1 += term / (k + 1)
        if term <= EPS * s0 * 0.25:
            break
    return 0.5 * x * s1 / s0


cdef inline double _ratio_asymptotic(double x) nogil:
    cdef double t = 1.0 / x
    cdef double acc = 0.0
    cdef int i
    for i in range(8, -1, -1):
        acc = acc * t + COEFFS[i]
    return acc


cdef inline double _ratio(double x) nogil:
    if x <= CROSSOVER:
        return _ratio_series(x)
    return _ratio_asymptotic(x)


def bessel_ratio_series(kappa):
    cdef double[::1] k = np.ascontiguousarray(kappa, dtype=np.float64).ravel()
    out = np.empty(k.shape[0], dtype=np.float64)
    cdef double[::1] o = out
    cdef Py_ssize_t i
    with nogil:
        for i in range(k.shape[0]):
            o[i] = _ratio_series(k[i])
    return out.reshape(np.shape(kappa))


def bessel_ratio_asymptotic(kappa):
    cdef double[::1] k = np.ascontiguousarray(kappa, dtype=np.float64).ravel()
    out = np.empty(k.shape[0], dtype=np.float64)
    cdef double[::1] o = out
    cdef Py_ssize_t i
    with nogil:
        for i in range(k.shape[0]):
            o[i] = _ratio_asymptotic(k[i])
    return out.reshape(np.shape(kappa))


def bessel_ratio(kappa):
    cdef double[::1] k = np.ascontiguousarray(kappa, dtype=np.float64).ravel()
    out = np.empty(k.shape[0], dtype=np.float64)
    cdef double[::1] o = out
    cdef Py_ssize_t i
    with nogil:
        for i in range(k.shape[0]):
            o[i] = _ratio(k[i])
    return out.reshape(np.shape(kappa))


def phase_reconstruct(z, y, double sigma2, bint filtered):
    shape = np.shape(y)
    cdef double[::1] zz = np.ascontiguousarray(z, dtype=np.float64).ravel()
    cdef double complex[::1] yy = np.ascontiguousarray(y, dtype=np.complex128).ravel()
    out = np.empty(yy.shape[0], dtype=np.complex128)
    cdef double complex[::1] o = out
    cdef Py_ssize_t i
    cdef double mag, w, re, im
    with nogil:
        for i in range(yy.shape[0]):
            re = yy[i].real
            im = yy[i].imag
            mag = hypot(re, im)
            if mag > 0.0:
                w = zz[i] / mag
                if filtered:
                    w = w * _ratio(2.0 * zz[i] * mag / sigma2)
                o[i] = w * re + 1j * (w * im)
            else:
                w = zz[i]
                if filtered:
                    w = w * _ratio(0.0)
                o[i] = w + 0j
    return out.reshape(shape)
