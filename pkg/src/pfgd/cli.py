"""Command-line interface: ``pfgd fit | predict | simulate | inspect``.

Exit codes: 0 success, 1 usage, 2 data error, 3 internal error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .basis import DomainError, check_unit
from .checkpoint import (
    CheckpointError,
    is_ensemble_dir,
    load_checkpoint,
    load_ensemble,
    save_checkpoint,
    save_ensemble,
)
from .core import EstimatorConfig, Mode, OnlineQuantileRegressor, predict_many
from .ensemble import EnsembleConfig, OnlineEnsemble

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger("pfgd")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3

DEFAULTS = {
    "tau": 0.5,
    "R": 10.0,
    "A": None,
    "s": 2.0,
    "p": 1,
    "mode": "single",
    "batch_size": 1,
    "seed": 0,
    "format": None,
    "input": "-",
    "checkpoint": None,
    "checkpoint_every": 0,
    "resume": None,
    "lenient": False,
    "replicates": 0,
    "subset": "half",
    "include_intercept": False,
    "summary": None,
    # simulate
    "Q": 1.0,
    "intercept": 0.5,
    "noise": "gaussian:0.5",
    "horizon": 1024,
    "seeds": 1,
    "truth_seed": 0,
    "J_truth": 2000,
    "decay": 0.6,
    "out_dir": "sim_out",
    "window": None,
}


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _estimator_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("estimator")
    g.add_argument("--tau", type=float, help="target quantile in (0, 1)")
    g.add_argument("--R", type=float, help="l1-ball radius")
    g.add_argument("--A", type=float, help="step-size constant (default 1/(tau(1-tau)))")
    g.add_argument("--s", type=float, help="smoothness, > 1/2")
    g.add_argument("--p", type=int, help="number of covariates")
    g.add_argument("--mode", choices=[m.value for m in Mode])
    g.add_argument("--batch-size", dest="batch_size", type=int, help="samples per mini-batch step")
    g.add_argument("--seed", type=int)
    g.add_argument("--config", help="TOML file with default values for any flag")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="pfgd", description="Online additive quantile regression by projected functional SGD")
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    fit = sub.add_parser("fit", help="stream records through a learner")
    _estimator_flags(fit)
    fit.add_argument("--input", help="CSV/JSONL path, '-' for stdin")
    fit.add_argument("--format", choices=["csv", "jsonl"])
    fit.add_argument("--checkpoint", help="checkpoint file (directory for ensembles)")
    fit.add_argument("--checkpoint-every", dest="checkpoint_every", type=int,
                     help="write a checkpoint every N steps (0: only at the end)")
    fit.add_argument("--resume", help="continue from this checkpoint")
    fit.add_argument("--lenient", action="store_true", default=None,
                     help="skip malformed records instead of aborting")
    fit.add_argument("--replicates", type=int, help="run a masked ensemble of B replicates")
    fit.add_argument("--subset", help="ensemble subset rule: half, full, a fraction or a count")
    fit.add_argument("--include-intercept", dest="include_intercept", action="store_true", default=None)
    fit.add_argument("--summary", help="also write the summary as JSON here")

    pr = sub.add_parser("predict", help="evaluate a checkpoint at query points")
    _estimator_flags(pr)
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--queries", required=True, help="CSV of p columns, '-' for stdin")
    pr.add_argument("--output", default="-")

    sim = sub.add_parser("simulate", help="convergence experiment on synthetic data")
    _estimator_flags(sim)
    sim.add_argument("--Q", type=float, help="Sobolev radius of the truth")
    sim.add_argument("--intercept", type=float)
    sim.add_argument("--noise", help="gaussian:SIGMA | student_t:NU[:SCALE] | uniform:A:B")
    sim.add_argument("--horizon", type=int, help="total samples per run")
    sim.add_argument("--seeds", type=int, help="number of data seeds, starting at --seed")
    sim.add_argument("--truth-seed", dest="truth_seed", type=int)
    sim.add_argument("--J-truth", dest="J_truth", type=int)
    sim.add_argument("--decay", type=float)
    sim.add_argument("--out-dir", dest="out_dir")
    sim.add_argument("--window", type=float, nargs=2, metavar=("LO", "HI"),
                     help="abscissa range for the slope fit")

    ins = sub.add_parser("inspect", help="print checkpoint metadata")
    ins.add_argument("checkpoint")
    return ap


def _merged(args: argparse.Namespace) -> dict:
    """Defaults, overridden by the config file, overridden by flags.

    The returned dict carries ``_explicit``: keys set by the file or a flag.
    """
    opts = dict(DEFAULTS)
    explicit = set()
    cfg_path = getattr(args, "config", None)
    if cfg_path:
        try:
            with open(cfg_path, "rb") as fh:
                file_opts = tomllib.load(fh)
        except (OSError, tomllib.TOMLDecodeError) as exc:
            raise UsageError(f"cannot read config file {cfg_path}: {exc}") from exc
        unknown = set(file_opts) - set(DEFAULTS)
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
        opts.update(file_opts)
        explicit.update(file_opts)
    for k, v in vars(args).items():
        if v is not None and k in DEFAULTS:
            opts[k] = v
            explicit.add(k)
    opts["_explicit"] = explicit
    return opts


_CONFIG_KEYS = ("tau", "R", "A", "s", "p", "mode", "seed")


def _check_against(config: EstimatorConfig, opts: dict) -> None:
    """Refuse a loaded config that contradicts explicitly requested values."""
    have = config.to_dict()
    for key in _CONFIG_KEYS:
        if key not in opts["_explicit"]:
            continue
        want = opts[key]
        got = have[key]
        if key in ("tau", "R", "A", "s"):
            want = float(want)
        elif key in ("p", "seed"):
            want = int(want)
        if want != got:
            raise DataError(f"checkpoint/config mismatch on {key}: checkpoint has {got!r}, requested {want!r}")


def _estimator(opts: dict) -> EstimatorConfig:
    try:
        return EstimatorConfig(tau=opts["tau"], R=opts["R"], s=opts["s"], p=opts["p"],
                               A=opts["A"], mode=opts["mode"], seed=opts["seed"])
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _subset(text):
    if isinstance(text, (int, float)):
        return text
    if text in ("half", "full"):
        return text
    try:
        return int(text)
    except ValueError:
        return float(text)


# ---------------------------------------------------------------- records

def _open_in(path: str):
    return sys.stdin if path == "-" else open(path, newline="")


def _parse_line(line: str, fmt: str, p: int | None):
    """Return ``(x, y)`` or ``None`` for blank lines; raises ValueError."""
    line = line.strip()
    if not line:
        return None
    if fmt == "jsonl":
        rec = json.loads(line)
        x = np.asarray(rec["x"], dtype=np.float64).reshape(-1)
        y = float(rec["y"])
    else:
        vals = [float(v) for v in next(csv.reader([line]))]
        x = np.asarray(vals[:-1], dtype=np.float64)
        y = vals[-1]
    if p is not None and x.shape[0] != p:
        raise ValueError(f"expected {p} covariates, got {x.shape[0]}")
    check_unit(x)
    if not math.isfinite(y):
        raise ValueError(f"non-finite response {y!r}")
    return x, y


def _records(path: str, fmt: str, p: int, lenient: bool, counters: dict):
    """Yield valid ``(x, y)`` records one at a time; nothing is retained."""
    fh = _open_in(path)
    try:
        for lineno, line in enumerate(fh, start=1):
            try:
                rec = _parse_line(line, fmt, p)
            except (ValueError, KeyError, TypeError, json.JSONDecodeError) as exc:
                if lineno == 1 and fmt == "csv" and _looks_like_header(line):
                    continue
                if not lenient:
                    raise DataError(f"line {lineno}: {exc}") from exc
                counters["skipped"] += 1
                log.warning("line %d skipped: %s", lineno, exc)
                continue
            if rec is not None:
                yield rec
    finally:
        if fh is not sys.stdin:
            fh.close()


def _looks_like_header(line: str) -> bool:
    for field_ in next(csv.reader([line.strip()]), []):
        try:
            float(field_)
        except ValueError:
            return True
    return False


def _infer_format(path: str, fmt: str | None) -> str:
    if fmt:
        return fmt
    return "jsonl" if path.endswith((".jsonl", ".ndjson")) else "csv"


# ---------------------------------------------------------------- commands

def cmd_fit(args) -> int:
    opts = _merged(args)
    fmt = _infer_format(opts["input"], opts["format"])
    counters = {"skipped": 0}
    ensemble = opts["replicates"] and opts["replicates"] > 0

    if opts["resume"]:
        try:
            if ensemble or is_ensemble_dir(opts["resume"]):
                learner = load_ensemble(opts["resume"])
                ensemble = True
                _check_against(learner.config.base, opts)
            else:
                ck = load_checkpoint(opts["resume"])
                learner = OnlineQuantileRegressor(ck.config, ck.state, ck.loss)
                _check_against(ck.config, opts)
        except CheckpointError as exc:
            raise DataError(str(exc)) from exc
    elif ensemble:
        if opts["mode"] != Mode.SINGLE.value:
            raise UsageError("ensembles run in single-sample mode")
        base = _estimator(opts)
        try:
            learner = OnlineEnsemble(EnsembleConfig(
                base, int(opts["replicates"]), _subset(opts["subset"]), int(opts["seed"]),
                bool(opts["include_intercept"])))
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
    else:
        learner = OnlineQuantileRegressor(_estimator(opts))

    cfg = learner.config.base if ensemble else learner.config
    batch_size = int(opts["batch_size"])
    if cfg.mode is Mode.SINGLE and batch_size != 1:
        raise UsageError("--batch-size needs --mode minibatch")
    if batch_size < 1:
        raise UsageError("--batch-size must be >= 1")
    every = int(opts["checkpoint_every"])

    def checkpoint():
        if not opts["checkpoint"]:
            return
        if ensemble:
            save_ensemble(opts["checkpoint"], learner)
        else:
            save_checkpoint(opts["checkpoint"], learner.config, learner.state, learner.loss)

    def steps_done():
        return learner.t if ensemble else learner.state.t

    pending_X, pending_y = [], []

    def flush():
        if cfg.mode is Mode.MINI_BATCH:
            learner.partial_fit_batch(np.stack(pending_X), np.array(pending_y))
        else:
            learner.partial_fit(pending_X[0], pending_y[0])
        pending_X.clear()
        pending_y.clear()
        if every and steps_done() % every == 0:
            checkpoint()

    try:
        for x, y in _records(opts["input"], fmt, cfg.p, bool(opts["lenient"]), counters):
            pending_X.append(x)
            pending_y.append(y)
            if len(pending_X) == batch_size:
                flush()
        if pending_X:
            flush()
    except OSError as exc:
        raise DataError(str(exc)) from exc
    checkpoint()

    if ensemble:
        states = learner.replicate_states(0)
        loss = learner.loss[0]
        summary = {"t": learner.t, "N": states[0].N, "J": learner.J,
                   "l1_norm": max(s.l1_norm for s in states), "replicates": len(states)}
    else:
        st = learner.state
        loss = learner.loss
        summary = {"t": st.t, "N": st.N, "J": st.J, "l1_norm": st.l1_norm}
    summary["streamed_pinball"] = loss.mean
    summary["skipped"] = counters["skipped"]
    text = json.dumps(summary)
    print(text)
    if opts["summary"]:
        Path(opts["summary"]).write_text(text + "\n")
    return EXIT_OK


def cmd_predict(args) -> int:
    opts = _merged(args)
    try:
        if is_ensemble_dir(args.checkpoint):
            ens = load_ensemble(args.checkpoint)
            states = ens.replicate_states(0)
            cfg = ens.config.base
        else:
            ck = load_checkpoint(args.checkpoint)
            states = [ck.state]
            cfg = ck.config
    except CheckpointError as exc:
        raise DataError(str(exc)) from exc
    _check_against(cfg, opts)

    rows = []
    fh = _open_in(args.queries)
    try:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                x = np.array([float(v) for v in next(csv.reader([line]))])
            except ValueError as exc:
                if lineno == 1 and _looks_like_header(line):
                    continue
                raise DataError(f"row {lineno}: {exc}") from exc
            if x.shape[0] != cfg.p:
                raise DataError(f"row {lineno}: expected {cfg.p} coordinates, got {x.shape[0]}")
            try:
                check_unit(x)
            except DomainError as exc:
                raise DataError(f"row {lineno}: {exc}") from exc
            rows.append(x)
    finally:
        if fh is not sys.stdin:
            fh.close()

    X = np.array(rows).reshape(-1, cfg.p)
    preds = np.mean([predict_many(s, cfg.basis, X) for s in states], axis=0) if len(states) > 1 \
        else predict_many(states[0], cfg.basis, X)
    out = sys.stdout if args.output == "-" else open(args.output, "w")
    try:
        for v in preds:
            out.write(f"{float(v)!r}\n")
    finally:
        if out is not sys.stdout:
            out.close()
    return EXIT_OK


def cmd_simulate(args) -> int:
    # deferred: pulls in scipy, which fit/predict never need
    from .simlab import (
        EvaluationReport,
        Noise,
        make_sobolev_truth,
        manifest,
        mean_log_curve,
        run_sweep,
        sweep_slope,
    )

    opts = _merged(args)
    cfg = _estimator(opts)
    try:
        noise = Noise.parse(opts["noise"])
        model = make_sobolev_truth(cfg.p, cfg.s, opts["Q"], cfg.R, int(opts["truth_seed"]),
                                   tau=cfg.tau, noise=noise, intercept=opts["intercept"],
                                   J_truth=int(opts["J_truth"]), decay=opts["decay"])
    except (ValueError, TypeError) as exc:
        raise UsageError(str(exc)) from exc
    batch = int(opts["batch_size"])
    if cfg.mode is Mode.SINGLE and batch != 1:
        raise UsageError("--batch-size needs --mode minibatch")
    seeds = list(range(int(opts["seed"]), int(opts["seed"]) + int(opts["seeds"])))
    runs = run_sweep(cfg, model, int(opts["horizon"]), seeds, batch_size=batch)

    out = Path(opts["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    for sd, run in zip(seeds, runs):
        with open(out / f"run_seed{sd}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(EvaluationReport.COLUMNS)
            for r in run:
                w.writerow([repr(v) if isinstance(v, float) else v for v in r.as_row().values()])

    slope = None
    if runs and runs[0]:
        xs, ml = mean_log_curve(runs)
        with open(out / "summary.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["N", "log_N", "mean_log_l2_error_sq"])
            for x, v in zip(xs, ml):
                w.writerow([int(x), repr(math.log(x)), repr(float(v))])
        window = tuple(opts["window"]) if opts["window"] else None
        try:
            slope = sweep_slope(runs, window)
        except ValueError:
            slope = None
    man = manifest(cfg, model, seeds=seeds, horizon=int(opts["horizon"]), batch_size=batch,
                   window=opts["window"], slope=slope,
                   target_slope=-2 * cfg.s / (2 * cfg.s + 1))
    (out / "manifest.json").write_text(json.dumps(man, indent=1))
    print(json.dumps({"slope": slope, "target": man["target_slope"], "out_dir": str(out)}))
    return EXIT_OK


def cmd_inspect(args) -> int:
    path = Path(args.checkpoint)
    try:
        if is_ensemble_dir(path):
            info = json.loads((path / "manifest.json").read_text())
            ck = load_checkpoint(path / info["files"][0])
            info["t"], info["N"], info["J"] = ck.state.t, ck.state.N, ck.state.J
            info["config"] = ck.config.to_dict()
        else:
            ck = load_checkpoint(path)
            info = {
                "format": "pfgd-checkpoint",
                "config": ck.config.to_dict(),
                "config_digest": ck.config.digest(),
                "t": ck.state.t,
                "N": ck.state.N,
                "J": ck.state.J,
                "p": ck.state.p,
                "length": int(ck.state.theta.shape[0]),
                "l1_norm": ck.state.l1_norm,
                "streamed_pinball": ck.loss.mean,
            }
    except (CheckpointError, OSError, KeyError) as exc:
        raise DataError(str(exc)) from exc
    print(json.dumps(info, indent=1))
    return EXIT_OK


COMMANDS = {"fit": cmd_fit, "predict": cmd_predict, "simulate": cmd_simulate, "inspect": cmd_inspect}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"pfgd: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, DomainError) as exc:
        print(f"pfgd: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"pfgd: internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


def entry() -> None:
    sys.exit(main())
