"""Dataset generation, end-to-end training, checkpointing and evaluation."""
from dataclasses import asdict, dataclass, field
import hashlib
import json
import logging
import math
import time

import numpy as np

from raqr import channel, classic
from raqr import diffengine as de
from raqr.channel import ScenarioConfig, substream
from raqr.errors import CheckpointError, ConfigError, DivergenceError, ShapeError
from raqr.storage import read_container, write_container
from raqr.urformer import Batch, URformer, URformerConfig, URformerParams, nmse_loss

log = logging.getLogger(__name__)

DATASET_VERSION = 1
CHECKPOINT_VERSION = 1

# trial key used for the dataset-wide pilot matrix; per-sample keys are 0..N-1
PILOT_TRIAL_KEY = 2**63
STREAM_SNR = 4


@dataclass(frozen=True)
class TrainConfig:
    num_samples: int = 20000
    batch_size: int = 64
    epochs: int = 50
    learning_rate: float = 1e-3
    final_learning_rate: float = 1e-5
    snr_range_db: tuple = (-5.0, 15.0)
    rsr_db: float = 10.0
    seed: int = 0
    validation_fraction: float = 0.1
    grad_clip_norm: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    prefit_filter: bool = True
    tensor_dtype: str = "<f8"

    def __post_init__(self):
        object.__setattr__(self, "snr_range_db", tuple(float(v) for v in self.snr_range_db))
        lo, hi = self.snr_range_db
        if not lo <= hi:
            raise ConfigError(f"empty SNR interval {self.snr_range_db}")
        if not 0 < self.validation_fraction < 1:
            raise ConfigError("validation_fraction must lie in (0, 1)")
        if self.num_samples < 2:
            raise ConfigError("need at least two samples")
        if self.batch_size < 1 or self.batch_size > self.num_samples * (1 - self.validation_fraction):
            raise ConfigError(
                f"batch_size={self.batch_size} exceeds the training split of {self.num_samples} samples"
            )
        if self.epochs < 0:
            raise ConfigError("epochs must be nonnegative")
        if not (self.learning_rate > 0 and self.final_learning_rate > 0 and self.grad_clip_norm > 0):
            raise ConfigError("learning rates and clip norm must be positive")

    def to_dict(self):
        d = asdict(self)
        d["snr_range_db"] = list(self.snr_range_db)
        return d


# ------------------------------------------------------------------ dataset

def dataset_pilots(scen, seed):
    return channel.generate_pilots(scen, substream(seed, PILOT_TRIAL_KEY, channel.STREAM_PILOTS))


def build_dataset(scen, train_cfg, path):
    """Draw ``train_cfg.num_samples`` scenarios sharing one pilot matrix and write them to ``path``.

    Sample ``i`` uses substreams ``(seed, i, *)`` with ``seed = train_cfg.seed``
    and an SNR drawn uniformly from ``train_cfg.snr_range_db``.
    """
    seed = train_cfg.seed
    scen = scen.replace(seed=seed, rsr_db=train_cfg.rsr_db)
    n = train_cfg.num_samples
    m, k, p = scen.num_antennas, scen.num_users, scen.num_pilots
    S = dataset_pilots(scen, seed)
    H = np.empty((n, m, k), dtype=np.complex128)
    b = np.empty((n, m), dtype=np.complex128)
    Z = np.empty((n, m, p))
    sigma2 = np.empty(n)
    snr = np.empty(n)
    lo, hi = train_cfg.snr_range_db
    for i in range(n):
        snr[i] = substream(seed, i, STREAM_SNR).uniform(lo, hi)
        sc = channel.simulate(scen, trial=i, pilots=S, snr_db=snr[i])
        H[i] = sc.H
        b[i] = sc.meas.b
        Z[i] = sc.meas.Z
        sigma2[i] = sc.meas.sigma2
    manifest = {
        "kind": "dataset",
        "version": DATASET_VERSION,
        "scenario": scen.to_dict(),
        "seed": seed,
        "num_samples": n,
        "snr_range_db": list(train_cfg.snr_range_db),
    }
    tensors = {
        "H.re": H.real, "H.im": H.imag,
        "S.re": S.real, "S.im": S.imag,
        "b.re": b.real, "b.im": b.imag,
        "Z": Z, "sigma2": sigma2, "snr_db": snr,
    }
    return write_container(path, manifest, tensors, dtype="<f8")


@dataclass(frozen=True, eq=False)
class Dataset:
    scenario: ScenarioConfig
    seed: int
    H: np.ndarray
    S: np.ndarray
    b: np.ndarray
    Z: np.ndarray
    sigma2: np.ndarray
    snr_db: np.ndarray
    manifest: dict = field(default_factory=dict)

    def __len__(self):
        return self.H.shape[0]

    def batch(self, idx):
        idx = np.asarray(idx)
        p = self.S.shape[0]
        B = np.repeat(self.b[idx][:, :, None], p, axis=2)
        return Batch(Z=self.Z[idx], B=B, sigma2=self.sigma2[idx], S=self.S, H=self.H[idx])


def load_dataset(path):
    manifest, t = read_container(path)
    if manifest.get("kind") != "dataset":
        raise CheckpointError(f"{path} is not a dataset file")
    if manifest.get("version") != DATASET_VERSION:
        raise CheckpointError(f"{path}: unsupported dataset version {manifest.get('version')}")
    try:
        scen = ScenarioConfig(**manifest["scenario"])
        return Dataset(
            scenario=scen,
            seed=manifest["seed"],
            H=t["H.re"] + 1j * t["H.im"],
            S=t["S.re"] + 1j * t["S.im"],
            b=t["b.re"] + 1j * t["b.im"],
            Z=t["Z"],
            sigma2=t["sigma2"],
            snr_db=t["snr_db"],
            manifest=manifest,
        )
    except KeyError as exc:
        raise CheckpointError(f"{path}: missing dataset field {exc}") from exc


# ------------------------------------------------------------------ checkpoints

def save_checkpoint(path, params, pilots, metadata=None, dtype="<f8"):
    S = np.asarray(pilots, dtype=np.complex128)
    manifest = {
        "kind": "urformer_checkpoint",
        "version": CHECKPOINT_VERSION,
        "config": params.cfg.to_dict(),
        "num_antennas": params.num_antennas,
        "num_users": params.num_users,
        "num_pilots": int(S.shape[0]),
        # json floats round-trip exactly
        "pilots": {"re": S.real.tolist(), "im": S.imag.tolist()},
        "training": metadata or {},
    }
    return write_container(path, manifest, params.arrays(), dtype=dtype)


@dataclass
class Checkpoint:
    params: URformerParams
    pilots: np.ndarray
    manifest: dict

    @property
    def num_pilots(self):
        return self.pilots.shape[0]


def load_checkpoint(path):
    manifest, tensors = read_container(path)
    if manifest.get("kind") != "urformer_checkpoint":
        raise CheckpointError(f"{path} is not a URformer checkpoint")
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {manifest.get('version')}")
    cfg = URformerConfig(**manifest["config"])
    try:
        params = URformerParams.from_arrays(cfg, manifest["num_antennas"], manifest["num_users"], tensors)
    except ShapeError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    pil = manifest["pilots"]
    S = np.asarray(pil["re"], dtype=np.float64) + 1j * np.asarray(pil["im"], dtype=np.float64)
    return Checkpoint(params=params, pilots=S, manifest=manifest)


def checkpoint_census(manifest):
    """Parameter tensor names and shapes listed in a checkpoint manifest."""
    return {e["name"]: tuple(e["shape"]) for e in manifest.get("tensors", [])}


def file_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ------------------------------------------------------------------ training

def _split(n, cfg):
    order = substream(cfg.seed, 0, 101).permutation(n)
    n_val = max(1, int(round(n * cfg.validation_fraction)))
    return np.sort(order[n_val:]), np.sort(order[:n_val])


def _cosine_lr(cfg, step, total):
    if total <= 1:
        return cfg.learning_rate
    frac = step / (total - 1)
    return cfg.final_learning_rate + 0.5 * (cfg.learning_rate - cfg.final_learning_rate) * (1 + math.cos(math.pi * frac))


def mean_nmse(model, dataset, idx, chunk=256):
    """Mean linear NMSE of ``model`` over dataset rows ``idx``."""
    total = 0.0
    for start in range(0, len(idx), chunk):
        batch = dataset.batch(idx[start:start + chunk])
        est = model.estimate(batch)
        err = np.sum(np.abs(est - batch.H) ** 2, axis=(1, 2)) / np.sum(np.abs(batch.H) ** 2, axis=(1, 2))
        total += float(np.sum(err))
    return total / len(idx)


def _db(x):
    return 10.0 * math.log10(max(x, 1e-300))


def train(dataset, ur_cfg, train_cfg, checkpoint_path=None, params=None, on_epoch=None):
    """Fit URformer parameters to ``dataset`` by minimising the mean NMSE.

    Returns ``(best_params, report)`` where ``best_params`` are those with the
    lowest validation NMSE seen, initialization included. A non-finite loss
    rolls the epoch back and halves the learning rate once; a second
    failure raises :class:`DivergenceError`.
    """
    started = time.perf_counter()
    n = len(dataset)
    if train_cfg.batch_size > n * (1 - train_cfg.validation_fraction):
        raise ConfigError("batch_size exceeds the training split of this dataset")
    m, k = dataset.H.shape[1:]
    if params is None:
        params = URformerParams.init(ur_cfg, m, k, seed=train_cfg.seed,
                                     prefit_filter=train_cfg.prefit_filter)
    elif (params.num_antennas, params.num_users) != (m, k) or params.cfg != ur_cfg:
        raise ConfigError("initial params do not match the dataset / config")
    model = URformer(params)
    train_idx, val_idx = _split(n, train_cfg)
    leaves = params.parameters()
    opt = de.Adam(leaves, lr=train_cfg.learning_rate, beta1=train_cfg.beta1,
                  beta2=train_cfg.beta2, eps=train_cfg.adam_eps)
    steps_per_epoch = math.ceil(len(train_idx) / train_cfg.batch_size)
    total_steps = steps_per_epoch * train_cfg.epochs

    init_val = mean_nmse(model, dataset, val_idx)
    best_val, best_epoch, best_arrays = init_val, 0, params.arrays()
    history = []
    lr_scale = 1.0
    retries = 0
    step = 0
    epoch = 1
    while epoch <= train_cfg.epochs:
        snapshot = (params.arrays(), _copy_state(opt.state), step)
        order = train_idx[substream(train_cfg.seed, epoch, 102).permutation(len(train_idx))]
        losses = []
        failed = None
        for bi in range(steps_per_epoch):
            idx = np.sort(order[bi * train_cfg.batch_size:(bi + 1) * train_cfg.batch_size])
            batch = dataset.batch(idx)
            h_r, h_i = model.forward(batch)
            loss = nmse_loss(h_r, h_i, batch.H)
            if not np.isfinite(loss.value):
                failed = bi
                break
            opt.zero_grad()
            loss.backward()
            de.clip_grad_norm(leaves, train_cfg.grad_clip_norm)
            opt.lr = lr_scale * _cosine_lr(train_cfg, step, total_steps)
            opt.step()
            step += 1
            losses.append(float(loss.value) * len(idx))
        if failed is not None:
            if retries:
                raise DivergenceError(f"non-finite loss at epoch {epoch}, batch {failed} after LR halving")
            log.warning("non-finite loss at epoch %d batch %d; halving LR and retrying", epoch, failed)
            retries += 1
            lr_scale *= 0.5
            arrays, state, step = snapshot
            _restore(params, arrays)
            opt.state = state
            continue
        val = mean_nmse(model, dataset, val_idx)
        rec = {"epoch": epoch, "train_nmse_db": _db(sum(losses) / len(train_idx)),
               "val_nmse_db": _db(val), "lr": opt.lr}
        history.append(rec)
        log.info("epoch %d train %.2f dB val %.2f dB", epoch, rec["train_nmse_db"], rec["val_nmse_db"])
        if on_epoch is not None:
            on_epoch(rec)
        if val < best_val:
            best_val, best_epoch, best_arrays = val, epoch, params.arrays()
        epoch += 1

    _restore(params, best_arrays)
    metadata = {"epoch": best_epoch, "seed": train_cfg.seed, "val_nmse_db": _db(best_val),
                "train_config": train_cfg.to_dict(), "dataset_seed": dataset.seed,
                "snr_range_db": list(train_cfg.snr_range_db)}
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, params, dataset.S, metadata, dtype=train_cfg.tensor_dtype)
    report = {
        "epochs": history,
        "init_val_nmse_db": _db(init_val),
        "best_val_nmse_db": _db(best_val),
        "best_epoch": best_epoch,
        "lr_retries": retries,
        "wallclock_s": time.perf_counter() - started,
        "checkpoint": None if checkpoint_path is None else str(checkpoint_path),
        "seed": train_cfg.seed,
    }
    return params, report


def _copy_state(state):
    return {"t": state.get("t", 0),
            "m": [a.copy() for a in state.get("m", [])],
            "v": [a.copy() for a in state.get("v", [])]}


def _restore(params, arrays):
    for name, arr in arrays.items():
        params.tensors[name].value = arr.copy()


# ------------------------------------------------------------------ evaluation

METHODS = ("gs", "emgs", "urformer")


def measurement_digest(meas):
    h = hashlib.sha256()
    for a in (meas.Z, meas.S, meas.B):
        h.update(np.ascontiguousarray(a).tobytes())
    h.update(np.float64(meas.sigma2).tobytes())
    return h.hexdigest()[:16]


def evaluate(scen, sweep_param, values, trials, methods=("gs", "emgs"), models=None,
             solver_cfg=classic.SolverConfig(), timing=False, estimator=None):
    """NMSE table: one row per (method, sweep value, trial).

    ``sweep_param`` is ``"snr_db"`` or ``"num_pilots"``. ``models`` maps a
    pilot count to a :class:`Checkpoint`; when it covers the current P,
    every method at that point uses the checkpoint's pilot matrix so the
    comparison stays paired. ``estimator`` is an optional extra callable
    ``(scenario) -> H_hat`` reported as method ``"custom"``; it sees the
    whole :class:`raqr.channel.Scenario`, truth included.
    """
    if sweep_param not in ("snr_db", "num_pilots"):
        raise ConfigError(f"unknown sweep parameter {sweep_param!r}")
    if trials < 1 or not values:
        raise ConfigError("need at least one trial and one sweep value")
    methods = tuple(methods)
    for meth in methods:
        if meth not in METHODS:
            raise ConfigError(f"unknown method {meth!r}")
    models = models or {}
    rows = []
    for value in values:
        cfg = scen.replace(**{sweep_param: int(value) if sweep_param == "num_pilots" else float(value)})
        ckpt = models.get(cfg.num_pilots)
        if "urformer" in methods:
            if ckpt is None:
                raise CheckpointError(f"no URformer checkpoint for P={cfg.num_pilots}")
            _check_compatible(ckpt, cfg)
        pilots = None if ckpt is None else ckpt.pilots
        model = None if ckpt is None else URformer(ckpt.params)
        for trial in range(trials):
            sc = channel.simulate(cfg, trial=trial, pilots=pilots)
            digest = measurement_digest(sc.meas)
            for meth in methods + (("custom",) if estimator is not None else ()):
                t0 = time.perf_counter()
                if meth == "gs":
                    res = classic.gs_solve(sc.meas, solver_cfg)
                    h_hat, iters = res.H_hat, res.iters_run
                elif meth == "emgs":
                    res = classic.emgs_solve(sc.meas, solver_cfg)
                    h_hat, iters = res.H_hat, res.iters_run
                elif meth == "urformer":
                    h_hat = model.estimate(Batch.from_measurements([sc.meas]), sc.meas.pilot_pinv)[0]
                    iters = ckpt.params.cfg.num_layers
                else:
                    h_hat, iters = estimator(sc), 0
                elapsed = (time.perf_counter() - t0) * 1e3
                rows.append({
                    "method": meth,
                    "sweep_param": sweep_param,
                    "sweep_value": value,
                    "trial": trial,
                    "seed": cfg.seed,
                    "nmse_db": classic.nmse_db(sc.H, h_hat),
                    "objective": classic.objective(h_hat, sc.meas),
                    "iters": iters,
                    "wallclock_ms": elapsed if timing else None,
                    "digest": digest,
                })
    return rows


def _check_compatible(ckpt, cfg):
    p = ckpt.params
    if (p.num_antennas, p.num_users, ckpt.num_pilots) != (cfg.num_antennas, cfg.num_users, cfg.num_pilots):
        raise CheckpointError(
            f"checkpoint is for M={p.num_antennas}, K={p.num_users}, P={ckpt.num_pilots}; "
            f"scenario has M={cfg.num_antennas}, K={cfg.num_users}, P={cfg.num_pilots}"
        )


def summarize(rows):
    """``{(method, sweep_value): mean nmse_db}``."""
    acc = {}
    for r in rows:
        acc.setdefault((r["method"], r["sweep_value"]), []).append(r["nmse_db"])
    return {key: float(np.mean(v)) for key, v in acc.items()}


def report_json(report):
    return json.dumps(report, indent=2, sort_keys=True)
