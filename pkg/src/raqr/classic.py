"""Gerchberg-Saxton and EM Gerchberg-Saxton channel estimators, plus the
least-squares magnitude objective and NMSE metric.

One iteration maps the current estimate ``H`` to

    Y     = H S^T + B
    Y_rec = Z * exp(j angle Y) [* I1/I0(2 Z |Y| / sigma2)]
    H'    = (Y_rec - B) pinv(S^T)

with the Bessel-ratio weight present only for EM-GS.
"""
from dataclasses import dataclass, field
import math

import numpy as np

from raqr import kernels
from raqr.errors import ConfigError, DivergenceError, DomainError, ShapeError

NMSE_FLOOR_DB = -100.0


@dataclass(frozen=True)
class SolverConfig:
    max_iters: int = 100
    init: str = "zeros"  # zeros | random | provided
    init_scale: float = 1.0
    init_H: np.ndarray = None
    init_seed: int = 0
    record_trajectory: bool = False
    tol: float = None  # relative-change early stop; off by default

    def __post_init__(self):
        if int(self.max_iters) != self.max_iters or self.max_iters < 1:
            raise ConfigError("max_iters must be a positive integer")
        if self.init not in ("zeros", "random", "provided"):
            raise ConfigError(f"unknown init policy {self.init!r}")
        if self.init == "provided" and self.init_H is None:
            raise ConfigError("init='provided' requires init_H")


@dataclass
class SolveResult:
    H_hat: np.ndarray
    objective_trace: np.ndarray
    iters_run: int
    initial_objective: float
    trajectory: list = field(default_factory=list)

    @property
    def final_objective(self):
        if len(self.objective_trace):
            return float(self.objective_trace[-1])
        return None


def initial_estimate(meas, cfg):
    shape = (meas.num_antennas, meas.num_users)
    if cfg.init == "zeros":
        return np.zeros(shape, dtype=np.complex128)
    if cfg.init == "provided":
        h0 = np.asarray(cfg.init_H, dtype=np.complex128)
        if h0.shape != shape:
            raise ShapeError(f"init_H shape {h0.shape} != {shape}")
        return h0.copy()
    rng = np.random.default_rng(cfg.init_seed)
    return cfg.init_scale * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / math.sqrt(2)


def objective(H_hat, meas):
    """Mean squared magnitude mismatch ``(1/MP) sum_p ||z_p - |H s_p + b|||^2``."""
    H_hat = np.asarray(H_hat, dtype=np.complex128)
    if H_hat.shape != (meas.num_antennas, meas.num_users):
        raise ShapeError(f"objective: H_hat shape {H_hat.shape} incompatible with measurements")
    resid = meas.Z - np.abs(H_hat @ meas.S.T + meas.B)
    return float(np.mean(resid * resid))


def kappa(Z, Y, sigma2):
    """EM concentration ``2 Z |Y| / sigma2``."""
    if not sigma2 > 0:
        raise DomainError("kappa: sigma2 must be positive")
    return 2.0 * np.asarray(Z) * np.abs(Y) / sigma2


def _run(meas, cfg, reconstruct):
    h = initial_estimate(meas, cfg)
    pinv = meas.pilot_pinv
    st = meas.S.T
    trace = []
    traj = [h.copy()] if cfg.record_trajectory else []
    h0_obj = objective(h, meas)
    iters = 0
    for it in range(1, cfg.max_iters + 1):
        y = h @ st + meas.B
        y_rec = reconstruct(y)
        h_new = (y_rec - meas.B) @ pinv
        if not np.all(np.isfinite(h_new)):
            raise DivergenceError(f"non-finite estimate at iteration {it}", iteration=it)
        iters = it
        trace.append(objective(h_new, meas))
        if cfg.record_trajectory:
            traj.append(h_new.copy())
        done = False
        if cfg.tol is not None:
            denom = max(np.linalg.norm(h_new), np.finfo(float).tiny)
            done = np.linalg.norm(h_new - h) / denom < cfg.tol
        h = h_new
        if done:
            break
    return SolveResult(H_hat=h, objective_trace=np.asarray(trace), iters_run=iters,
                       initial_objective=h0_obj, trajectory=traj)


def gs_solve(meas, cfg=SolverConfig()):
    """Plain Gerchberg-Saxton: keep the measured magnitude, take the model phase."""
    z = meas.Z
    return _run(meas, cfg, lambda y: kernels.phase_reconstruct(z, y, 1.0, False))


def emgs_solve(meas, cfg=SolverConfig(), ratio=None):
    """EM Gerchberg-Saxton with the Bessel-ratio soft weight.

    ``ratio`` overrides the weighting function (called on the kappa matrix);
    by default it is I1/I0. Requires ``sigma2 > 0``; use :func:`gs_solve`
    for noiseless data, which is the ``sigma2 -> 0`` limit.
    """
    if not meas.sigma2 > 0:
        raise DomainError("emgs_solve requires sigma2 > 0; use gs_solve for noiseless data")
    z = meas.Z
    s2 = meas.sigma2
    if ratio is None:
        return _run(meas, cfg, lambda y: kernels.phase_reconstruct(z, y, s2, True))

    def reconstruct(y):
        return kernels.phase_reconstruct(z, y, 1.0, False) * ratio(kappa(z, y, s2))

    return _run(meas, cfg, reconstruct)


def nmse(H_true, H_hat):
    H_true = np.asarray(H_true)
    H_hat = np.asarray(H_hat)
    if H_true.shape != H_hat.shape:
        raise ShapeError(f"nmse: shape {H_true.shape} != {H_hat.shape}")
    ref = float(np.sum(np.abs(H_true) ** 2))
    if ref == 0.0:
        raise DomainError("nmse: reference channel is zero")
    return float(np.sum(np.abs(H_true - H_hat) ** 2)) / ref


def nmse_db(H_true, H_hat, floor_db=NMSE_FLOOR_DB):
    v = nmse(H_true, H_hat)
    if v <= 10.0 ** (floor_db / 10.0):
        return float(floor_db)
    return 10.0 * math.log10(v)
