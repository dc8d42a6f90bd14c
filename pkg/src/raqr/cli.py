"""Command-line interface: ``raqr {gen-data,train,eval,sweep,inspect-checkpoint}``.

Configuration comes from an optional JSON file (``--config``) with sections
``scenario``, ``train``, ``urformer``, ``solver`` and ``experiment``; flags
override file values, which override built-in defaults. Every results CSV
gets a ``<csv>.json`` sidecar in the same layout, so passing the sidecar
back as ``--config`` reruns the experiment.
"""
import argparse
import csv
from dataclasses import asdict, dataclass, fields
import io
import json
import logging
import os
import sys

from raqr import classic, kernels
from raqr.channel import ScenarioConfig
from raqr.errors import CheckpointError, ConfigError, RaqrError
from raqr.storage import read_manifest
from raqr.train import (METHODS, TrainConfig, build_dataset, evaluate, file_digest, load_checkpoint,
                        load_dataset, report_json, train)
from raqr.urformer import URformerConfig

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

SCHEMA_VERSION = 1
CSV_HEADER = ["method", "sweep_param", "sweep_value", "trial", "seed", "nmse_db",
              "objective", "iters", "wallclock_ms"]
KINDS = {"snr": "snr_sweep", "pilots": "pilot_sweep", "single": "single_run", "classic": "classic_only"}
DEFAULT_POINTS = {"snr_sweep": [0, 5, 10, 15, 20], "classic_only": [0, 5, 10, 15, 20],
                  "pilot_sweep": [8, 12, 16, 20]}
SOLVER_KEYS = ("max_iters", "init", "init_scale", "init_seed", "tol")


@dataclass(frozen=True)
class ExperimentSpec:
    kind: str = "snr_sweep"
    points: tuple = ()
    methods: tuple = ("gs", "emgs")
    trials: int = 100
    checkpoints: tuple = ()
    timing: bool = False

    def __post_init__(self):
        if self.kind not in DEFAULT_POINTS and self.kind != "single_run":
            raise ConfigError(f"unknown experiment kind {self.kind!r}")
        object.__setattr__(self, "methods", tuple(self.methods))
        object.__setattr__(self, "checkpoints", tuple(self.checkpoints))
        if not self.points:
            if self.kind == "single_run":
                raise ConfigError("single_run needs one sweep point")
            object.__setattr__(self, "points", tuple(DEFAULT_POINTS[self.kind]))
        if self.kind == "pilot_sweep":
            pts = tuple(int(p) for p in self.points)
        else:
            pts = tuple(float(p) for p in self.points)
        object.__setattr__(self, "points", pts)
        if self.kind == "single_run" and len(pts) != 1:
            raise ConfigError("single_run takes exactly one point")
        if not self.methods:
            raise ConfigError("methods must be nonempty")
        for m in self.methods:
            if m not in METHODS:
                raise ConfigError(f"unknown method {m!r}; choose from {', '.join(METHODS)}")
        if self.kind == "classic_only" and "urformer" in self.methods:
            raise ConfigError("classic_only excludes urformer")
        if int(self.trials) != self.trials or self.trials < 1:
            raise ConfigError("trials must be a positive integer")

    @property
    def sweep_param(self):
        return "num_pilots" if self.kind == "pilot_sweep" else "snr_db"

    def to_dict(self):
        d = asdict(self)
        d["points"] = list(self.points)
        d["methods"] = list(self.methods)
        d["checkpoints"] = list(self.checkpoints)
        return d


# ------------------------------------------------------------------ config plumbing

def _load_config(path):
    if path is None:
        return {}
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return doc


def _section(doc, name, cls, overrides, keep=None):
    base = dict(doc.get(name, {}))
    allowed = {f.name for f in fields(cls)} if keep is None else set(keep)
    unknown = set(base) - allowed
    if unknown:
        raise ConfigError(f"unknown {name} keys: {sorted(unknown)}")
    base.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return cls(**base)
    except TypeError as exc:
        raise ConfigError(f"bad {name} section: {exc}") from exc


def _scenario(doc, args):
    return _section(doc, "scenario", ScenarioConfig, {
        "num_antennas": args.antennas, "num_users": args.users, "num_pilots": args.pilots,
        "snr_db": getattr(args, "snr_db", None), "rsr_db": args.rsr_db,
        "seed": getattr(args, "scenario_seed", None),
    })


def _solver(doc, args):
    return _section(doc, "solver", classic.SolverConfig, {"max_iters": args.max_iters}, keep=SOLVER_KEYS)


def _solver_dict(cfg):
    return {k: getattr(cfg, k) for k in SOLVER_KEYS}


def _train_cfg(doc, args):
    snr = None if getattr(args, "snr_range", None) is None else tuple(args.snr_range)
    return _section(doc, "train", TrainConfig, {
        "num_samples": getattr(args, "samples", None), "batch_size": getattr(args, "batch_size", None),
        "epochs": getattr(args, "epochs", None), "learning_rate": getattr(args, "lr", None),
        "seed": args.seed, "snr_range_db": snr,
        "validation_fraction": getattr(args, "val_fraction", None),
        "grad_clip_norm": getattr(args, "clip", None),
    })


def _urformer_cfg(doc, args):
    return _section(doc, "urformer", URformerConfig, {
        "num_layers": args.layers, "d_model": args.d_model,
        "num_encoders": args.encoders, "num_heads": args.heads,
    })


def _csv_list(text):
    return [t for t in text.split(",") if t]


# ------------------------------------------------------------------ outputs

def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_rows(path, rows):
    """Write result rows as CSV via a ``.partial`` sibling."""
    order = {m: i for i, m in enumerate(METHODS + ("custom",))}
    rows = sorted(rows, key=lambda r: (r["sweep_value"], r["trial"], order[r["method"]]))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in rows:
        w.writerow([_fmt(r[k]) for k in CSV_HEADER])
    _atomic_write(path, buf.getvalue())


def _atomic_write(path, text):
    tmp = os.fspath(path) + ".partial"
    try:
        with open(tmp, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except OSError as exc:
        raise RaqrError(f"cannot write {path}: {exc}") from exc


def _sidecar(spec, scen, solver, ckpts):
    return {
        "schema_version": SCHEMA_VERSION,
        "experiment": spec.to_dict(),
        "scenario": scen.to_dict(),
        "solver": _solver_dict(solver),
        "checkpoint_digests": {p: c["sha256"] for p, c in ckpts.items()},
        "kernels_backend": kernels.BACKEND,
    }


# ------------------------------------------------------------------ subcommands

def run_experiment(spec, scen, solver=classic.SolverConfig(), out=None):
    """Run ``spec`` on ``scen``; writes ``out`` and ``out + '.json'`` when given.

    Checkpoints are loaded and checked against the scenario before any
    trial runs. Returns the result rows.
    """
    models, meta = {}, {}
    for path in spec.checkpoints:
        ck = load_checkpoint(path)
        if ck.num_pilots in models:
            raise ConfigError(f"two checkpoints for P={ck.num_pilots}")
        models[ck.num_pilots] = ck
        meta[path] = {"sha256": file_digest(path)}
    if "urformer" in spec.methods:
        pilot_counts = spec.points if spec.kind == "pilot_sweep" else [scen.num_pilots]
        for p in pilot_counts:
            if p not in models:
                raise CheckpointError(f"urformer requested but no checkpoint has P={p}")
            ck = models[p]
            if (ck.params.num_antennas, ck.params.num_users) != (scen.num_antennas, scen.num_users):
                raise CheckpointError(
                    f"checkpoint for P={p} is M={ck.params.num_antennas}, K={ck.params.num_users}; "
                    f"scenario is M={scen.num_antennas}, K={scen.num_users}"
                )
    rows = evaluate(scen, spec.sweep_param, list(spec.points), spec.trials, spec.methods,
                    models=models, solver_cfg=solver, timing=spec.timing)
    if out is not None:
        write_rows(out, rows)
        _atomic_write(os.fspath(out) + ".json",
                      json.dumps(_sidecar(spec, scen, solver, meta), indent=2, sort_keys=True) + "\n")
    return rows


def cmd_gen_data(args, doc):
    scen = _scenario(doc, args)
    tc = _train_cfg(doc, args)
    build_dataset(scen, tc, args.out)
    print(args.out)


def cmd_train(args, doc):
    tc = _train_cfg(doc, args)
    ur = _urformer_cfg(doc, args)
    ds = load_dataset(args.data)
    _, report = train(ds, ur, tc, checkpoint_path=args.out)
    text = report_json(report)
    if args.report:
        _atomic_write(args.report, text + "\n")
    print(text)


def _dims_from_checkpoint(args, doc):
    """Fill unset M, K, P from the first checkpoint's manifest."""
    if not args.checkpoint:
        return
    manifest, _ = read_manifest(args.checkpoint[0])
    file_scen = doc.get("scenario", {})
    for flag, key in (("antennas", "num_antennas"), ("users", "num_users"), ("pilots", "num_pilots")):
        if getattr(args, flag) is None and key not in file_scen and key in manifest:
            setattr(args, flag, manifest[key])


def cmd_sweep(args, doc):
    _dims_from_checkpoint(args, doc)
    scen = _scenario(doc, args)
    solver = _solver(doc, args)
    exp = dict(doc.get("experiment", {}))
    if args.kind is not None:
        exp["kind"] = KINDS[args.kind]
    if args.points is not None:
        exp["points"] = [float(p) for p in _csv_list(args.points)]
    if args.methods is not None:
        exp["methods"] = _csv_list(args.methods)
    if args.trials is not None:
        exp["trials"] = args.trials
    if args.checkpoint:
        exp["checkpoints"] = args.checkpoint
    if args.timing:
        exp["timing"] = True
    if args.seed is not None:
        scen = scen.replace(seed=args.seed)
    try:
        spec = ExperimentSpec(**exp)
    except TypeError as exc:
        raise ConfigError(f"bad experiment section: {exc}") from exc
    rows = run_experiment(spec, scen, solver, args.out)
    _print_summary(rows)


def cmd_eval(args, doc):
    args.kind = "single"
    if args.points is None:
        args.points = str(args.at_snr_db)
    if args.methods is None:
        args.methods = "gs,emgs,urformer"
    cmd_sweep(args, doc)


def _print_summary(rows):
    acc = {}
    for r in rows:
        acc.setdefault((r["method"], r["sweep_value"]), []).append(r["nmse_db"])
    for (m, v), vals in sorted(acc.items(), key=lambda kv: (kv[0][1], kv[0][0])):
        print(f"{m:9s} {v:8g} {sum(vals) / len(vals):9.3f} dB  (n={len(vals)})")


def cmd_inspect(args, doc):
    manifest, _ = read_manifest(args.checkpoint)
    if manifest.get("kind") != "urformer_checkpoint":
        raise CheckpointError(f"{args.checkpoint} is not a URformer checkpoint")
    print(json.dumps(manifest, indent=2, sort_keys=True))


# ------------------------------------------------------------------ parser

def _add_scenario_flags(p):
    g = p.add_argument_group("scenario")
    g.add_argument("--antennas", type=int, help="M")
    g.add_argument("--users", type=int, help="K")
    g.add_argument("--pilots", type=int, help="P")
    g.add_argument("--rsr-db", type=float)


def build_parser():
    parser = argparse.ArgumentParser(prog="raqr", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a training dataset")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--samples", type=int)
    p.add_argument("--batch-size", type=int, help="checked against --samples; training reuses it")
    p.add_argument("--seed", type=int)
    p.add_argument("--snr-range", type=float, nargs=2, metavar=("LO", "HI"))
    _add_scenario_flags(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train URformer on a dataset")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--report", help="also write the JSON report here")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--val-fraction", type=float)
    p.add_argument("--clip", type=float)
    p.add_argument("--layers", type=int)
    p.add_argument("--d-model", type=int)
    p.add_argument("--encoders", type=int)
    p.add_argument("--heads", type=int)
    p.set_defaults(func=cmd_train)

    for name, func in (("sweep", cmd_sweep), ("eval", cmd_eval)):
        p = sub.add_parser(name, help="NMSE sweep" if name == "sweep" else "single-point comparison")
        p.add_argument("--config")
        p.add_argument("--out", required=True, help="results CSV")
        if name == "sweep":
            p.add_argument("--kind", choices=sorted(KINDS))
        else:
            p.add_argument("--at-snr-db", type=float, default=10.0)
        p.add_argument("--points", help="comma-separated sweep values")
        p.add_argument("--methods", help="comma-separated subset of gs,emgs,urformer")
        p.add_argument("--trials", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--checkpoint", action="append", help="URformer checkpoint (repeat per P)")
        p.add_argument("--max-iters", type=int, help="classic solver iterations")
        p.add_argument("--timing", action="store_true",
                       help="fill wallclock_ms (outputs are then not byte-reproducible)")
        _add_scenario_flags(p)
        p.set_defaults(func=func)

    p = sub.add_parser("inspect-checkpoint", help="print a checkpoint manifest")
    p.add_argument("checkpoint")
    p.set_defaults(func=cmd_inspect, config=None)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    for name in ("antennas", "users", "pilots", "rsr_db", "seed", "layers", "d_model",
                 "encoders", "heads", "max_iters"):
        if not hasattr(args, name):
            setattr(args, name, None)
    try:
        doc = _load_config(args.config)
        args.func(args, doc)
    except (ConfigError, CheckpointError) as exc:
        print(f"raqr: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except RaqrError as exc:
        print(f"raqr: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
