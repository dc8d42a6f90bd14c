"""Backend selection for the elementwise kernels.

The compiled extension is used when it was built; otherwise the numpy
fallback is imported. Set ``RAQR_KERNELS=python`` to force the fallback.
"""
import os

from raqr import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("RAQR_KERNELS", "").lower() != "python":
    try:
        from raqr import _kernels as _compiled
    except ImportError:
        pass
    else:
        _impl = _compiled
        BACKEND = "cython"

CROSSOVER = _kernels_py.CROSSOVER
bessel_ratio = _impl.bessel_ratio
bessel_ratio_series = _impl.bessel_ratio_series
bessel_ratio_asymptotic = _impl.bessel_ratio_asymptotic
phase_reconstruct = _impl.phase_reconstruct


def backends():
    """Return ``{name: module}`` for every kernel backend importable here."""
    found = {"python": _kernels_py}
    try:
        from raqr import _kernels as compiled
    except ImportError:
        return found
    found["cython"] = compiled
    return found
