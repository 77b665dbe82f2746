"""Command-line entry point: ``seqbattnet {synth,train,eval,predict,embed}``.

Errors go to stderr as ``error[CODE]: message`` with a nonzero exit status.
``SEQBATTNET_OUT`` sets the default output root when ``--out`` is omitted.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import datetime as _dt
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import data, decoder, objective, trainer
from .encoder import HrmConfig
from .objective import LossConfig

log = logging.getLogger("seqbattnet")

EXIT = {"E_CONFIG": 2, "E_INPUT": 3, "E_IO": 4, "E_GENERATION": 5, "E_DIVERGENCE": 6,
        "E_MISMATCH": 7, "E_PARSE": 8}


class CliError(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


def _now():
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _out_dir(args, command):
    if args.out:
        return Path(args.out)
    root = os.environ.get("SEQBATTNET_OUT")
    if not root:
        raise CliError("E_CONFIG", "--out not given and SEQBATTNET_OUT is unset")
    return Path(root) / command


def _read_json(path):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise CliError("E_IO", f"{path}: no such file")
    except json.JSONDecodeError as exc:
        raise CliError("E_PARSE", f"{path}: invalid JSON ({exc})")


def _build(cls, d, where):
    """Instantiate a config dataclass, reporting the offending field path."""
    if not isinstance(d, dict):
        raise CliError("E_CONFIG", f"{where}: expected an object")
    known = {f.name for f in dataclasses.fields(cls)}
    for key in d:
        if key not in known:
            raise CliError("E_CONFIG", f"{where}.{key}: unknown field")
    try:
        return cls(**d)
    except (TypeError, ValueError) as exc:
        raise CliError("E_CONFIG", f"{where}: {exc}")


class RunManifest:
    """Resolved configuration written before any work and completed afterwards."""

    def __init__(self, command, out, config_path, resolved, seed):
        self.path = Path(out) / "run_manifest.json"
        self.doc = {"command": command, "config": str(config_path) if config_path else None,
                    "resolved": resolved, "seed": seed, "out": str(out),
                    "started": _now(), "finished": None}

    def write(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text(json.dumps(self.doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    def finish(self, **extra):
        self.doc["finished"] = _now()
        self.doc.update(extra)
        self.write()


# ---------------------------------------------------------------------------
# synth


def oracle_from_json(d, seed=None):
    d = dict(d)
    preset = d.pop("preset", None)
    dt = d.pop("dt", None)
    battery = d.pop("battery", None)
    if battery is None:
        try:
            p = data.get_preset(preset or "tri")
        except KeyError as exc:
            raise CliError("E_CONFIG", f"config.preset: {exc.args[0]}")
        battery = p.battery(dt=1.0 if dt is None else float(dt))
    else:
        if dt is not None:
            battery = dict(battery, dt=dt)
        battery = _build(decoder.BatteryConfig, battery, "config.battery")
    if seed is not None:
        d["seed"] = seed
    d["battery"] = battery
    for key in ("r_true", "tau_true", "stage_c_rate", "stage_count", "random_current"):
        if key in d:
            d[key] = tuple(d[key])
    return _build(data.OracleConfig, d, "config")


def cmd_synth(args):
    cfg = oracle_from_json(_read_json(args.config), args.seed)
    out = _out_dir(args, "synth")
    man = RunManifest("synth", out, args.config, cfg.to_dict(), cfg.seed)
    try:
        man.write()
    except OSError as exc:
        raise CliError("E_IO", f"{out}: {exc}")
    try:
        cycles = data.synth_generate(cfg)
    except data.GenerationError as exc:
        raise CliError("E_GENERATION", str(exc))
    b = cfg.battery
    name = args.name or f"synth_seed{cfg.seed}"
    data.save_cycles(cycles, out / f"{name}.csv")
    preset = data.DatasetPreset("custom", b.C_rated, b.C_EOL, b.V0, b.V_EOD, b.n)
    data.write_manifest(out, preset)
    man.finish(cycles=len(cycles))
    return 0


# ---------------------------------------------------------------------------
# train


def _load_dir(path, preset=None, n=None):
    try:
        cycles = data.load_cycles(path, preset, n=n)
    except (data.ParseError, data.SchemaError) as exc:
        raise CliError("E_PARSE", str(exc))
    except FileNotFoundError as exc:
        raise CliError("E_IO", str(exc))
    if not cycles:
        raise CliError("E_INPUT", f"{path}: no usable cycles")
    return cycles


def _resolve_preset(spec):
    try:
        return data.get_preset(spec)
    except KeyError as exc:
        raise CliError("E_CONFIG", exc.args[0])
    except (data.SchemaError, json.JSONDecodeError) as exc:
        raise CliError("E_CONFIG", str(exc))


def train_configs(d, seed=None):
    d = dict(d or {})
    sections = {"train", "hrm", "loss", "stack_sigmoid"}
    if d and not set(d) <= sections:
        d = {"train": d}
    tc = _build(trainer.TrainConfig, d.get("train", {}), "config.train")
    if seed is not None:
        tc = dataclasses.replace(tc, seed=seed)
    hrm_d = dict(d.get("hrm", {}))
    for key in ("input_shift", "input_scale"):
        if key in hrm_d:
            hrm_d[key] = tuple(hrm_d[key])
    hrm = _build(HrmConfig, hrm_d, "config.hrm")
    loss = _build(LossConfig, d.get("loss", {}), "config.loss")
    return tc, hrm, loss, bool(d.get("stack_sigmoid", False))


def _median_dt(cycles):
    return float(np.median([c.dt for c in cycles]))


def cmd_train(args):
    preset = _resolve_preset(args.preset)
    tc, hrm, loss, stack = train_configs(_read_json(args.config) if args.config else {}, args.seed)
    out = _out_dir(args, "train")
    train_cycles = _load_dir(args.train, preset)
    val_cycles = _load_dir(args.val, preset)
    battery = preset.battery(dt=_median_dt(train_cycles), e_rc=hrm.e_rc)
    resolved = {"train": tc.to_dict(), "hrm": hrm.to_dict(), "loss": loss.to_dict(),
                "battery": battery.to_dict(), "stack_sigmoid": stack}
    man = RunManifest("train", out, args.config, resolved, tc.seed)
    man.write()
    members = []
    for r in range(tc.num_runs):
        seed = tc.seed + r
        run_dir = out / f"run{r}"
        try:
            ckpt, hist = trainer.train(train_cycles, val_cycles, battery, hrm, loss, tc,
                                       seed=seed, stack_sigmoid=stack)
        except trainer.DivergenceError as exc:
            raise CliError("E_DIVERGENCE", f"run {r}: {exc}")
        ckpt.save(run_dir / "checkpoint.json")
        trainer.write_history(hist, run_dir / "history.csv")
        members.append(f"run{r}/checkpoint.json")
        log.info("run %d: best val %.6g at epoch %d", r, ckpt.best_val, ckpt.epoch)
    (out / "ensemble.json").write_text(
        json.dumps({"format": "seqbattnet-ensemble/1", "members": members}, indent=2) + "\n",
        encoding="utf-8")
    man.finish(members=members)
    return 0


# ---------------------------------------------------------------------------
# model loading


def load_models(path):
    doc = _read_json(path)
    if doc.get("format", "").startswith("seqbattnet-ensemble"):
        base = Path(path).parent
        return [trainer.Checkpoint.load(base / m).model() for m in doc["members"]]
    if doc.get("format", "").startswith("seqbattnet-checkpoint"):
        return [trainer.Checkpoint.from_dict(doc).model()]
    raise CliError("E_CONFIG", f"{path}: neither a checkpoint nor an ensemble manifest")


def _check_consistent(models, data_path):
    """Data manifest constants (when present) must match the model's battery."""
    p = Path(data_path)
    man = (p if p.is_dir() else p.parent) / "manifest.json"
    if not man.is_file():
        return
    pre = data.load_manifest(man)
    b = models[0].battery
    if (pre.C_rated, pre.C_EOL, pre.V0, pre.V_EOD, pre.n) != (b.C_rated, b.C_EOL, b.V0, b.V_EOD, b.n):
        raise CliError("E_MISMATCH", f"{man}: battery constants differ from the model's")


def cmd_eval(args):
    models = load_models(args.model)
    _check_consistent(models, args.data)
    cycles = _load_dir(args.data, n=models[0].battery.n)
    try:
        report = trainer.evaluate(models, cycles)
    except objective.DomainError as exc:
        raise CliError("E_INPUT", str(exc))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("cycle", "rmse", "mae", "mape"))
        for row in report.rows:
            w.writerow((row[0],) + tuple(repr(float(v)) for v in row[1:]))
    summary = report.to_dict()
    if len(models) > 1:
        per_run = [trainer.evaluate(m, cycles) for m in models]
        summary["per_run_mean"] = {k: float(np.mean([getattr(r, k) for r in per_run]))
                                   for k in ("rmse", "mae", "mape")}
    out.with_name(out.stem + "_summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return 0


# ---------------------------------------------------------------------------
# predict / embed


def cmd_predict(args):
    models = load_models(args.model)
    n = models[0].battery.n
    try:
        cycles = data.load_cycles(args.cycle)
    except (data.ParseError, data.SchemaError) as exc:
        raise CliError("E_PARSE", str(exc))
    if args.cycle_index is not None:
        cycles = [c for c in cycles if c.cycle_index == args.cycle_index]
    if not cycles:
        raise CliError("E_INPUT", f"{args.cycle}: no matching cycle")
    cyc = cycles[0]
    if cyc.t_eod < n + 1:
        raise CliError("E_INPUT", f"cycle {cyc.cycle_index} has {cyc.t_eod} samples, needs > n={n}")
    mode = {"stop": "infer_stop", "full": "train_full"}[args.mode]
    res = trainer.ensemble_predict(models, cyc, mode)
    write_trajectory(res, cyc, args.out)
    return 0


def write_trajectory(res, cyc, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n = res.n_prefix
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("step", "time_s", "current_a", "voltage_pred_v", "soc", "source"))
        for j, v in enumerate(res.voltage):
            pred = j >= n
            soc = repr(float(res.soc_traj[j - n])) if pred else ""
            w.writerow((j + 1, repr(float(cyc.time[j])), repr(float(cyc.current[j])),
                        repr(float(v)), soc, "predicted" if pred else "measured"))


def cmd_embed(args):
    models = load_models(args.model)
    n = models[0].battery.n
    cycles = _load_dir(args.data, n=n)
    if len(cycles) < 2:
        raise CliError("E_INPUT", "PCA needs at least 2 cycles")
    windows = np.stack([c.window(n) for c in cycles])
    emb = models[0].embeddings(windows)
    rows = objective.pca2(emb, [c.cycle_index for c in cycles])
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("cycle", "pc1", "pc2"))
        for a, b, lab in rows:
            w.writerow((lab, repr(a), repr(b)))
    return 0


# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="seqbattnet", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate synthetic cycles")
    s.add_argument("--config", required=True)
    s.add_argument("--out")
    s.add_argument("--seed", type=int)
    s.add_argument("--name", help="CSV file stem")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train num_runs seeded models")
    s.add_argument("--train", required=True)
    s.add_argument("--val", required=True)
    s.add_argument("--preset", required=True, help="tri, rt-batt, nasa, synthetic, or a manifest JSON")
    s.add_argument("--config")
    s.add_argument("--out")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="per-cycle metrics")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("predict", help="voltage trajectory for one cycle")
    s.add_argument("--model", required=True)
    s.add_argument("--cycle", required=True)
    s.add_argument("--cycle-index", type=int)
    s.add_argument("--mode", choices=("stop", "full"), default="stop")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("embed", help="PCA of encoder embeddings")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_embed)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error[{exc.code}]: {exc}", file=sys.stderr)
        return EXIT[exc.code]
    except OSError as exc:
        print(f"error[E_IO]: {exc}", file=sys.stderr)
        return EXIT["E_IO"]


if __name__ == "__main__":
    sys.exit(main())
