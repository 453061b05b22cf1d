"""Command-line entry point: generate | train | eval | analyze | export-plots.

Every command takes ``--config`` (YAML or JSON, nested sections) and flags
that override it.  Exit codes: 0 success, 2 usage/configuration, 3 data or
schema problems, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import warnings
from dataclasses import asdict, fields

import numpy as np

from . import evaluation as ev
from .integrators import IntegrationError
from .models import PoDiNNModel, build_node, build_podinn, ground_truth_model, structure, true_bivector_matrix
from .systems import (GEN_ATOL, GEN_RTOL, SYSTEMS, DatasetError, generate, get_system, read_dataset,
                      write_dataset)
from .training import (ConfigError, TrainConfig, TrainingError, adam_from_checkpoint, config_hash,
                       load_checkpoint, train)

log = logging.getLogger("podinn")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


# ---------------------------------------------------------------------------
# configuration


def load_config(path):
    if not path:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    if path.endswith(".json"):
        obj = json.loads(text)
    else:
        import yaml

        obj = yaml.safe_load(text)
    if obj is None:
        return {}
    if not isinstance(obj, dict):
        raise UsageError("config file must hold a mapping")
    return obj


def pick(args, cfg, flag, *keys, default=None):
    """Flag value if given, else ``cfg[keys[0]][keys[1]]...``, else ``default``."""
    v = getattr(args, flag, None)
    if v is not None:
        return v
    node = cfg
    for k in keys:
        if not isinstance(node, dict) or k not in node:
            return default
        node = node[k]
    return node


def _resolved_record(command, **values):
    rec = {"command": command, **values}
    rec["config_hash"] = config_hash(rec)
    return rec


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, default=float)


def _read_data(path):
    if not path:
        raise UsageError("--data is required")
    try:
        return read_dataset(path)
    except DatasetError as exc:
        raise DataError(str(exc)) from exc


def _load_model(args, ds=None):
    """Checkpointed model, or the analytic ground-truth model of the dataset's system."""
    if getattr(args, "ground_truth", False):
        system = args.system or (ds.meta["system"] if ds is not None else None)
        if not system:
            raise UsageError("--ground-truth needs --system or --data")
        model, params = ground_truth_model(system)
        return model, params, {"build": model.build}
    if not args.checkpoint:
        raise UsageError("--checkpoint (or --ground-truth) is required")
    try:
        return load_checkpoint(args.checkpoint)
    except ConfigError as exc:
        raise DataError(str(exc)) from exc


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args, cfg):
    system = pick(args, cfg, "system", "system")
    if not system:
        raise UsageError(f"--system is required; choose from {sorted(SYSTEMS)}")
    if system not in SYSTEMS:
        raise UsageError(f"unknown system {system!r}; choose from {sorted(SYSTEMS)}")
    spec = get_system(system)
    rec = _resolved_record(
        "generate", system=system,
        n_traj=int(pick(args, cfg, "n_traj", "data", "n_traj", default=spec.train_size[0])),
        n_steps=int(pick(args, cfg, "n_steps", "data", "n_steps", default=spec.train_size[1])),
        dt=float(pick(args, cfg, "dt", "data", "dt", default=spec.dt)),
        seed=int(pick(args, cfg, "seed", "seed", default=0)),
        rtol=float(pick(args, cfg, "rtol", "integrator", "rtol", default=GEN_RTOL)),
        atol=float(pick(args, cfg, "atol", "integrator", "atol", default=GEN_ATOL)),
    )
    out = pick(args, cfg, "out", "out")
    if not out:
        raise UsageError("--out is required")
    ds = generate(spec, rec["n_traj"], rec["n_steps"], rec["dt"], rec["seed"], rec["rtol"], rec["atol"])
    ds.meta["config_hash"] = rec["config_hash"]
    write_dataset(ds, out)
    log.info("wrote %d x %d trajectories of system %s to %s", rec["n_traj"], rec["n_steps"], system, out)
    return rec


def _train_config(args, cfg):
    tc = dict(cfg.get("train") or {})
    known = {f.name for f in fields(TrainConfig)}
    unknown = set(tc) - known
    if unknown:
        raise UsageError(f"unknown train settings: {sorted(unknown)}")
    for name in ("iterations", "batch_size", "lr", "substeps", "checkpoint_every", "log_every"):
        v = getattr(args, name, None)
        if v is not None:
            tc[name] = v
    tc["seed"] = int(pick(args, cfg, "seed", "seed", default=tc.get("seed", 0)))
    try:
        return TrainConfig(**tc)
    except (TypeError, ConfigError) as exc:
        raise UsageError(str(exc)) from exc


def cmd_train(args, cfg):
    ds = _read_data(pick(args, cfg, "data", "data", "path"))
    out = pick(args, cfg, "out", "out")
    if not out:
        raise UsageError("--out is required")
    tconf = _train_config(args, cfg)
    system = ds.meta["system"]
    start, adam = 0, None
    if args.resume:
        try:
            model, params, info = load_checkpoint(args.resume)
        except ConfigError as exc:
            raise DataError(str(exc)) from exc
        if model.build.get("system") != system:
            raise UsageError("checkpoint was trained on a different system")
        start = int(info["iteration"])
        adam = adam_from_checkpoint(info, params)
        build = model.build
    else:
        kind = pick(args, cfg, "model", "model", "kind", default="podinn")
        hidden = tuple(int(h) for h in pick(args, cfg, "hidden", "model", "hidden", default=(200, 200)))
        if kind == "podinn":
            model, params = build_podinn(system, pick(args, cfg, "n_d", "model", "n_d"),
                                         pick(args, cfg, "n_g", "model", "n_g"), hidden, tconf.seed)
        elif kind == "neural-ode":
            model, params = build_node(system, hidden, tconf.seed)
        else:
            raise UsageError(f"unknown model kind {kind!r}; use podinn or neural-ode")
        build = model.build
    rec = _resolved_record("train", data_hash=ds.meta.get("config_hash"), system=system, build=build,
                           train=asdict(tconf))
    if start >= tconf.iterations:
        raise UsageError(f"checkpoint is already at iteration {start} of {tconf.iterations}")

    def progress(it, loss, lr):
        log.info("iteration %d loss %.4e lr %.3e", it, loss, lr)

    train(model, params, ds, tconf, out_dir=out, start_iteration=start, adam=adam, callback=progress)
    ckpt = os.path.join(out, "checkpoint.json")
    with open(ckpt, encoding="utf-8") as fh:
        obj = json.load(fh)
    obj["config_hash"] = rec["config_hash"]
    obj["config"] = rec
    _write_json(ckpt, obj)
    return rec


def cmd_eval(args, cfg):
    ds = _read_data(pick(args, cfg, "data", "data", "path"))
    spec = get_system(ds.meta["system"])
    model, params, info = _load_model(args, ds)
    theta = float(pick(args, cfg, "theta", "theta", default=spec.theta))
    rtol = float(pick(args, cfg, "rtol", "integrator", "rtol", default=1e-9))
    atol = float(pick(args, cfg, "atol", "integrator", "atol", default=1e-7))
    rec = _resolved_record("eval", data_hash=ds.meta.get("config_hash"), model=info.get("config_hash", info["build"]),
                           theta=theta, rtol=rtol, atol=atol)
    report = ev.evaluate(model, params, ds, theta, rtol, atol, extra={"config_hash": rec["config_hash"]})
    out = pick(args, cfg, "out", "out")
    if out:
        report.write(out)
    print(f"overall MSE {report.overall:.6e}  mean VPT {report.mean_vpt:.4f}  (theta={theta:g})")
    return rec


def cmd_analyze(args, cfg):
    model, params, info = _load_model(args)
    if not isinstance(model, PoDiNNModel):
        raise UsageError("analyze needs a port-based model checkpoint")
    factor = float(pick(args, cfg, "factor", "factor", default=1000.0))
    biv = model.bivector.with_values(params["B"])
    rec = _resolved_record("analyze", model=info.get("config_hash", info["build"]), factor=factor)
    report = coupling_report_for(biv, model, factor)
    laws = ev.kirchhoff_view(report, model.layout)
    obj = {**report.to_json(), "kirchhoff": laws, "config_hash": rec["config_hash"]}
    system = model.build.get("system")
    st = structure(system) if system else None
    if st is not None and model.layout.names == [n for n, _ in st.storage + st.resistive + st.external]:
        true_model, true_params = ground_truth_model(system)
        grid = np.linspace(-2.0, 2.0, 41)
        ok, _, perm, flips = ev.pattern_matches_up_to_gauge(
            model.bivector_matrix(params), true_bivector_matrix(model.layout, st.wedges), model.layout,
            ev.resistor_curves(model, params, grid), ev.resistor_curves(true_model, true_params, grid), factor)
        obj["matches_ground_truth"] = bool(ok)
        obj["resistor_gauge"] = {"perm": [int(k) for k in perm], "flips": [bool(f) for f in flips]}
    out = pick(args, cfg, "out", "out")
    if out:
        os.makedirs(out, exist_ok=True)
        _write_json(os.path.join(out, "couplings.json"), obj)
    for d in report.detected:
        print("detected ", d["wedge"])
    print(f"{len(report.suppressed)} entries effectively zero; storage rank {report.rank} of {len(report.storage_names)}")
    if report.warning:
        print("warning:", report.warning)
    for line in laws:
        print(line)
    return rec


def coupling_report_for(biv, model, factor):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return ev.coupling_report(biv, model.layout, factor)


def cmd_export_plots(args, cfg):
    ds = _read_data(pick(args, cfg, "data", "data", "path"))
    model, params, info = _load_model(args, ds)
    out = pick(args, cfg, "out", "out")
    if not out:
        raise UsageError("--out is required")
    rtol = float(pick(args, cfg, "rtol", "integrator", "rtol", default=1e-9))
    atol = float(pick(args, cfg, "atol", "integrator", "atol", default=1e-7))
    from .models import rollout

    signals = [ds.signals(i) for i in range(ds.obs.shape[0])]
    pred = np.swapaxes(rollout(model, params, ds.obs[:, 0], ds.times, signals, rtol=rtol, atol=atol), 0, 1)
    os.makedirs(out, exist_ok=True)
    names = ds.meta["obs_names"]
    for i in range(ds.obs.shape[0]):
        for k, name in enumerate(names):
            ev.write_series_csv(os.path.join(out, f"traj{i}_{name}_truth.csv"), ds.obs[i, :, k], ("step", "value"), 0)
            ev.write_series_csv(os.path.join(out, f"traj{i}_{name}_abs_error.csv"),
                                np.abs(pred[i, :, k] - ds.obs[i, :, k]), ("step", "value"), 0)
    return _resolved_record("export-plots", data_hash=ds.meta.get("config_hash"),
                            model=info.get("config_hash", info["build"]), rtol=rtol, atol=atol)


# ---------------------------------------------------------------------------
# parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser():
    p = _Parser(prog="podinn", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out")
        return sp

    g = common(sub.add_parser("generate", help="simulate a benchmark system"))
    g.add_argument("--system")
    g.add_argument("--n-traj", dest="n_traj", type=int)
    g.add_argument("--n-steps", dest="n_steps", type=int)
    g.add_argument("--dt", type=float)
    g.add_argument("--rtol", type=float)
    g.add_argument("--atol", type=float)

    t = common(sub.add_parser("train", help="fit a model by one-step prediction"))
    t.add_argument("--data")
    t.add_argument("--model", choices=["podinn", "neural-ode"])
    t.add_argument("--n-d", dest="n_d", type=int)
    t.add_argument("--n-g", dest="n_g", type=int)
    t.add_argument("--hidden", type=int, nargs="+")
    t.add_argument("--iterations", type=int)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--substeps", type=int)
    t.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    t.add_argument("--log-every", dest="log_every", type=int)
    t.add_argument("--resume")

    for name, helptext in (("eval", "roll out and score a model"), ("export-plots", "write truth/error CSVs")):
        e = common(sub.add_parser(name, help=helptext))
        e.add_argument("--data")
        e.add_argument("--checkpoint")
        e.add_argument("--ground-truth", dest="ground_truth", action="store_true")
        e.add_argument("--system")
        e.add_argument("--rtol", type=float)
        e.add_argument("--atol", type=float)
        if name == "eval":
            e.add_argument("--theta", type=float)

    a = common(sub.add_parser("analyze", help="report detected couplings"))
    a.add_argument("--checkpoint")
    a.add_argument("--factor", type=float)
    return p


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval, "analyze": cmd_analyze,
            "export-plots": cmd_export_plots}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"podinn: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(args.config)
        COMMANDS[args.command](args, cfg)
    except (UsageError, ConfigError) as exc:
        print(f"podinn: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, DatasetError, FileNotFoundError) as exc:
        print(f"podinn: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (IntegrationError, TrainingError, FloatingPointError) as exc:
        print(f"podinn: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
