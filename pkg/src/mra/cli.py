"""Command-line front end: every experiment as a reproducible subcommand.

Settings resolve in a fixed precedence order: built-in defaults, then the
``MRA_SEED`` / ``MRA_THREADS`` environment fallbacks, then the ``--config``
INI section named after the subcommand, then a replayed manifest, then
explicit flags. Every run writes ``<out>.manifest.json`` echoing the fully
resolved configuration and the package version, and ``--from-manifest``
replays it. Exit codes: 0 on success, 2 for argument or configuration
errors, 1 for runtime failures; errors print a one-line diagnostic.
"""

from __future__ import annotations

import argparse
import configparser
import json
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (
    detect_ghost,
    deviation_estimate,
    efn_magnitude_law,
    highdim_stagnation_scan,
    phase_drift_scan,
)
from .estimators import exponential_schedule, run as run_estimator
from .model import (
    DatasetFormatError,
    ModelConfig,
    WAVEFORMS,
    generate,
    load,
    resolve_truth_source,
    save,
)
from .population import fourier_blocks, population_jacobian, population_run
from .signals import dft

__all__ = ["main"]

_ENV_SEED = "MRA_SEED"
_ENV_THREADS = "MRA_THREADS"


class UsageError(ValueError):
    """Bad or missing argument values; maps to exit code 2."""


# ---------------------------------------------------------------------------
# option framework: one table per subcommand, uniform layered resolution


def _int(v):
    return int(v)


def _float(v):
    return float(v)


def _str(v):
    return str(v)


def _ints(v):
    if isinstance(v, str):
        return [int(s) for s in v.split(",") if s.strip()]
    return [int(s) for s in v]


def _shape(v):
    if not isinstance(v, str):
        return tuple(int(s) for s in v)
    parts = v.lower().split("x")
    return tuple(int(s) for s in parts)


@dataclass(frozen=True)
class _Opt:
    name: str
    conv: object
    default: object = None
    required: bool = False
    help: str = ""


_GLOBAL_OPTS = [
    _Opt("out", _str, required=True, help="output file path"),
    _Opt("outdir", _str, default=".", help="directory that relative outputs land in"),
    _Opt("seed", _int, help=f"base seed (env {_ENV_SEED} is the fallback)"),
    _Opt("threads", _int, help=f"worker pool size, 1 is the bit-reproducible reference (env {_ENV_THREADS})"),
]

_COMMAND_OPTS = {
    "gen": [
        _Opt("n", _int, required=True, help="number of observations"),
        _Opt("sigma", _float, required=True, help="noise standard deviation"),
        _Opt("d", _shape, help="signal shape for waveform truths, e.g. 5 or 16x16"),
        _Opt("truth", _str, required=True, help=f"truth source: {'|'.join(WAVEFORMS)} or a .csv/.pgm file"),
        _Opt("truth_norm", _float, help="rescale the truth to this l2 norm"),
    ],
    "run": [
        _Opt("algo", _str, required=True, help="estimator: em, hard, or sgd"),
        _Opt("data", _str, required=True, help="dataset file written by `mra gen`"),
        _Opt("init", _str, required=True, help="initialization: mean, a waveform name, or a signal file"),
        _Opt("iters", _int, required=True, help="number of iterations"),
        _Opt("sigma", _float, help="override the dataset noise level"),
        _Opt("freqs", _ints, help="comma-separated frequencies to track as phase/mag columns"),
        _Opt("batch_size", _int, default=256, help="sgd minibatch size"),
        _Opt("alpha0", _float, default=0.95, help="sgd initial step size"),
        _Opt("decay", _float, default=0.99, help="sgd step-size decay rate"),
    ],
    "pop": [
        _Opt("d", _shape, help="signal length for waveform sources"),
        _Opt("sigma", _float, required=True, help="noise standard deviation"),
        _Opt("truth", _str, default="zero", help="truth source (waveform name or file)"),
        _Opt("init", _str, default="bump", help="initialization direction (waveform name or file)"),
        _Opt("beta", _float, help="rescale the initialization to this l2 norm"),
        _Opt("nodes", _int, default=11, help="Gauss-Hermite nodes per axis"),
        _Opt("iters", _int, required=True, help="number of iterations"),
        _Opt("freqs", _ints, help="frequencies to track as phase/mag columns"),
    ],
    "jacobian": [
        _Opt("d", _shape, help="signal length for waveform sources"),
        _Opt("sigma", _float, required=True, help="noise standard deviation"),
        _Opt("truth", _str, required=True, help="truth source (waveform name or file)"),
        _Opt("at", _str, default="truth", help="evaluation point: 'truth' or a signal source"),
        _Opt("nodes", _int, default=11, help="Gauss-Hermite nodes per axis"),
        _Opt("method", _str, default="quadrature", help="jacobian method: quadrature or fd"),
    ],
    "efn": [
        _Opt("init", _str, required=True, help="initialization (waveform name or .csv/.pgm file)"),
        _Opt("d", _shape, help="signal shape for waveform inits"),
        _Opt("n", _ints, required=True, help="comma-separated dataset sizes"),
        _Opt("iters", _int, required=True, help="accumulated-drift horizon"),
        _Opt("trials", _int, default=64, help="Monte-Carlo trials per size"),
        _Opt("sigma", _float, default=1.0, help="noise standard deviation"),
        _Opt("freqs", _ints, help="frequencies to report (default: all nonzero, or top 8 for images)"),
    ],
    "ghost": [
        _Opt("data", _str, required=True, help="dataset file written by `mra gen`"),
        _Opt("init", _str, required=True, help="initialization: mean, a waveform name, or a signal file"),
        _Opt("d", _shape, help="signal shape for waveform inits"),
        _Opt("iters", _int, required=True, help="number of iterations per estimator"),
        _Opt("margin", _float, default=0.1, help="relative rebound threshold"),
        _Opt("freqs", _ints, help="frequencies to track in the trajectories"),
    ],
    "scan": [
        _Opt("kind", _str, required=True, help="scan type: deviation or stagnation"),
        _Opt("d", _str, help="signal shape (deviation) or comma-separated lengths (stagnation)"),
        _Opt("truth", _str, help="deviation: truth source"),
        _Opt("truth_norm", _float, help="deviation: rescale the truth to this l2 norm"),
        _Opt("probes", _str, help="deviation: comma-separated probe sources (default: truth and truth/2)"),
        _Opt("sigma", _float, default=1.0, help="noise standard deviation"),
        _Opt("n", _ints, help="dataset sizes (deviation: several; stagnation: one)"),
        _Opt("tau", _float, help="stagnation: initialization norm"),
        _Opt("trials", _int, default=8, help="Monte-Carlo trials"),
    ],
    "efn-law": [
        _Opt("init", _str, required=True, help="initialization (waveform name or .csv/.pgm file)"),
        _Opt("d", _shape, help="signal shape for waveform inits"),
        _Opt("iters", _int, required=True, help="horizon T; rows cover t = 0..T"),
        _Opt("freqs", _ints, help="frequencies to predict (default: all nonzero, or top 8 for images)"),
    ],
}

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mra",
        description="Multi-reference alignment experiments: data generation, "
        "estimators, population-limit diagnostics, and drift scans.",
    )
    parser.add_argument("--version", action="version", version=f"mra {__version__}")
    subs = parser.add_subparsers(dest="command", metavar="command")
    for cmd, opts in _COMMAND_OPTS.items():
        sub = subs.add_parser(cmd, help=f"{cmd} experiment")
        sub.add_argument("--config", help="INI config file; settings are read from the section named after the subcommand")
        sub.add_argument("--from-manifest", dest="from_manifest", help="replay a written manifest")
        for opt in opts + _GLOBAL_OPTS:
            flag = "--" + opt.name.replace("_", "-")
            sub.add_argument(flag, dest=opt.name, default=None, help=opt.help)
    return parser


def _config_layer(path: str, cmd: str) -> dict:
    if not Path(path).exists():
        raise UsageError(f"config file {path!r} does not exist")
    parser = configparser.ConfigParser()
    parser.read(path)
    return dict(parser[cmd]) if parser.has_section(cmd) else {}


def _manifest_layer(path: str, cmd: str) -> dict:
    if not Path(path).exists():
        raise UsageError(f"manifest {path!r} does not exist")
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("command") != cmd:
        raise UsageError(f"manifest {path!r} is for `mra {payload.get('command')}`, not `mra {cmd}`")
    return dict(payload.get("config", {}))


def _resolve(cmd: str, args: argparse.Namespace) -> dict:
    opts = _COMMAND_OPTS[cmd] + _GLOBAL_OPTS
    env = {}
    if os.environ.get(_ENV_SEED):
        env["seed"] = os.environ[_ENV_SEED]
    if os.environ.get(_ENV_THREADS):
        env["threads"] = os.environ[_ENV_THREADS]
    config = _config_layer(args.config, cmd) if args.config else {}
    manifest = _manifest_layer(args.from_manifest, cmd) if args.from_manifest else {}
    flags = {o.name: getattr(args, o.name) for o in opts if getattr(args, o.name) is not None}

    resolved = {}
    for opt in opts:
        value = opt.default
        for layer in (env, config, manifest, flags):
            if opt.name in layer and layer[opt.name] is not None:
                value = layer[opt.name]
        if value is None:
            if opt.required:
                raise UsageError(f"--{opt.name.replace('_', '-')} is required")
            resolved[opt.name] = None
            continue
        try:
            resolved[opt.name] = opt.conv(value)
        except (TypeError, ValueError) as exc:
            raise UsageError(f"bad value for --{opt.name.replace('_', '-')}: {exc}") from exc
    if resolved["threads"] is None:
        resolved["threads"] = 1
    if resolved["threads"] < 1:
        raise UsageError("--threads must be >= 1")
    return resolved


def _json_ready(value):
    if isinstance(value, tuple):
        return list(value)
    return value


def _write_manifest(cmd: str, cfg: dict, out_path: Path) -> None:
    payload = {
        "command": cmd,
        "version": __version__,
        "config": {k: _json_ready(v) for k, v in cfg.items()},
    }
    manifest_path = Path(str(out_path) + ".manifest.json")
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _out_path(cfg: dict) -> Path:
    out = Path(cfg["out"])
    return out if out.is_absolute() else Path(cfg["outdir"]) / out


def _require_seed(cfg: dict, why: str) -> int:
    if cfg["seed"] is None:
        raise UsageError(f"--seed is required {why} (or set {_ENV_SEED})")
    return cfg["seed"]


def _resolve_point(source: str, shape, seed, what: str) -> np.ndarray:
    if source == "random" and seed is None:
        raise UsageError(f"--seed is required for a random {what}")
    try:
        return resolve_truth_source(source, shape, seed)
    except ValueError as exc:
        raise UsageError(f"bad {what}: {exc}") from exc


def _default_freqs(x: np.ndarray, count: int = 8):
    """All nonzero frequencies for short signals, top-|coefficient| for images."""
    X = np.abs(dft(x)).ravel()
    if x.ndim == 1 and x.size <= count + 1:
        return list(range(1, x.size))
    order = np.argsort(X[1:])[::-1] + 1
    return sorted(int(k) for k in order[: min(count, X.size - 1)])


# ---------------------------------------------------------------------------
# subcommand runners


def _cmd_gen(cfg: dict, out: Path) -> None:
    seed = _require_seed(cfg, "to draw a dataset")
    dataset = generate(
        ModelConfig(
            n=cfg["n"],
            sigma=cfg["sigma"],
            seed=seed,
            truth=cfg["truth"],
            shape=cfg["d"],
            truth_norm=cfg["truth_norm"],
        )
    )
    save(dataset, out)


def _load_dataset_init(cfg: dict):
    dataset = load(cfg["data"])
    if cfg["init"] == "mean":
        init = dataset.observations.mean(axis=0)
    else:
        init = _resolve_point(cfg["init"], cfg.get("d") or dataset.shape, cfg["seed"], "init")
    return dataset, init


def _cmd_run(cfg: dict, out: Path) -> None:
    algo = cfg["algo"]
    if algo not in ("em", "hard", "sgd"):
        raise UsageError(f"unknown --algo {algo!r}; expected em, hard, or sgd")
    dataset, init = _load_dataset_init(cfg)
    kwargs = {"freqs": cfg["freqs"]}
    if cfg["sigma"] is not None:
        kwargs["sigma"] = cfg["sigma"]
    if algo == "sgd":
        kwargs["seed"] = _require_seed(cfg, "for sgd minibatches")
        kwargs["batch_size"] = cfg["batch_size"]
        kwargs["schedule"] = exponential_schedule(cfg["alpha0"], cfg["decay"])
    trajectory = run_estimator(algo, init, dataset, cfg["iters"], **kwargs)
    trajectory.to_csv(out)


def _cmd_pop(cfg: dict, out: Path) -> None:
    x_star = _resolve_point(cfg["truth"], cfg["d"], cfg["seed"], "truth")
    init = _resolve_point(cfg["init"], x_star.shape, cfg["seed"], "init")
    if cfg["beta"] is not None:
        norm = float(np.linalg.norm(init))
        if cfg["beta"] == 0.0:
            init = np.zeros(x_star.shape)
        elif norm == 0.0:
            raise UsageError("cannot rescale an all-zero init to a nonzero --beta")
        else:
            init = init * (cfg["beta"] / norm)
    trajectory = population_run(
        init, x_star, cfg["sigma"], cfg["iters"], m=cfg["nodes"], freqs=cfg["freqs"]
    )
    trajectory.to_csv(out)


def _cmd_jacobian(cfg: dict, out: Path) -> None:
    if cfg["method"] not in ("quadrature", "fd"):
        raise UsageError(f"unknown --method {cfg['method']!r}; expected quadrature or fd")
    x_star = _resolve_point(cfg["truth"], cfg["d"], cfg["seed"], "truth")
    point = x_star if cfg["at"] == "truth" else _resolve_point(cfg["at"], x_star.shape, cfg["seed"], "--at point")
    jac = population_jacobian(point, x_star, cfg["sigma"], m=cfg["nodes"], method=cfg["method"])
    report = fourier_blocks(jac)
    with open(out, "w", encoding="utf-8") as fh:
        json.dump(report.to_json_dict(), fh, indent=2)
        fh.write("\n")


def _cmd_efn(cfg: dict, out: Path) -> None:
    seed = _require_seed(cfg, "for Monte-Carlo trials")
    init = _resolve_point(cfg["init"], cfg["d"], cfg["seed"], "init")
    freqs = cfg["freqs"] if cfg["freqs"] is not None else _default_freqs(init)
    report = phase_drift_scan(
        init,
        cfg["n"],
        T=cfg["iters"],
        trials=cfg["trials"],
        seed=seed,
        sigma=cfg["sigma"],
        freqs=freqs,
    )
    report.to_csv(out)


def _cmd_ghost(cfg: dict, out: Path) -> None:
    dataset, init = _load_dataset_init(cfg)

    def curve(algo):
        traj = run_estimator(algo, init, dataset, cfg["iters"], freqs=cfg["freqs"])
        return traj.columns["mse_orbit"]

    algos = ("em", "hard")
    if cfg["threads"] > 1:
        with ThreadPoolExecutor(max_workers=min(cfg["threads"], len(algos))) as pool:
            curves = list(pool.map(curve, algos))
    else:
        curves = [curve(a) for a in algos]
    payload = {"margin": cfg["margin"]}
    for algo, mse in zip(algos, curves):
        payload[algo] = detect_ghost(mse, cfg["margin"]).to_json_dict()
    with open(out, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")


def _scan_deviation(cfg: dict, seed: int) -> dict:
    if cfg["truth"] is None or cfg["n"] is None:
        raise UsageError("deviation scans need --truth and --n")
    shape = _shape(cfg["d"]) if cfg["d"] else None
    x_star = _resolve_point(cfg["truth"], shape, seed, "truth")
    if cfg["truth_norm"] is not None:
        norm = float(np.linalg.norm(x_star))
        if norm == 0.0:
            raise UsageError("cannot rescale an all-zero truth")
        x_star = x_star * (cfg["truth_norm"] / norm)
    if cfg["probes"]:
        probes = [
            _resolve_point(src.strip(), x_star.shape, seed, "probe")
            for src in cfg["probes"].split(",")
        ]
    else:
        probes = [x_star, 0.5 * x_star]
    table = deviation_estimate(
        probes, x_star, cfg["sigma"], cfg["n"], trials=cfg["trials"], seed=seed
    )
    return {
        "kind": "deviation",
        "n_values": [int(n) for n in table.n_values],
        "means": [float(v) for v in table.means],
        "stderrs": [float(v) for v in table.stderrs],
        "slope": table.slope,
        "trials": cfg["trials"],
    }


def _scan_stagnation(cfg: dict, seed: int) -> dict:
    if cfg["tau"] is None or cfg["d"] is None or cfg["n"] is None:
        raise UsageError("stagnation scans need --tau, --d, and --n")
    if len(cfg["n"]) != 1:
        raise UsageError("stagnation scans take exactly one --n value")
    table = highdim_stagnation_scan(
        cfg["tau"], _ints(cfg["d"]), cfg["n"][0], trials=cfg["trials"], seed=seed, sigma=cfg["sigma"]
    )
    def clean(v):
        return None if math.isnan(v) else float(v)

    return {
        "kind": "stagnation",
        "tau": table.tau,
        "d_values": [int(d) for d in table.d_values],
        "means": [float(v) for v in table.means],
        "stderrs": [float(v) for v in table.stderrs],
        "decorrelation": [clean(v) for v in table.decorrelation],
        "trials": cfg["trials"],
    }


def _cmd_scan(cfg: dict, out: Path) -> None:
    seed = _require_seed(cfg, "for Monte-Carlo trials")
    if cfg["kind"] == "deviation":
        payload = _scan_deviation(cfg, seed)
    elif cfg["kind"] == "stagnation":
        payload = _scan_stagnation(cfg, seed)
    else:
        raise UsageError(f"unknown --kind {cfg['kind']!r}; expected deviation or stagnation")
    with open(out, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")


def _cmd_efn_law(cfg: dict, out: Path) -> None:
    import csv

    init = _resolve_point(cfg["init"], cfg["d"], cfg["seed"], "init")
    freqs = cfg["freqs"] if cfg["freqs"] is not None else _default_freqs(init)
    X0 = np.abs(dft(init)).ravel()
    mags = [float(X0[int(k) % X0.size]) for k in freqs]
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", *(f"mag_k{k}" for k in freqs)])
        for t in range(cfg["iters"] + 1):
            row = [m * efn_magnitude_law(m * m, t) for m in mags]
            writer.writerow([t, *(f"{v:.17g}" for v in row)])


_RUNNERS = {
    "gen": _cmd_gen,
    "run": _cmd_run,
    "pop": _cmd_pop,
    "jacobian": _cmd_jacobian,
    "efn": _cmd_efn,
    "ghost": _cmd_ghost,
    "scan": _cmd_scan,
    "efn-law": _cmd_efn_law,
}


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help(sys.stderr)
        return 2
    try:
        cfg = _resolve(args.command, args)
    except UsageError as exc:
        print(f"mra {args.command}: {exc}", file=sys.stderr)
        return 2
    try:
        out = _out_path(cfg)
        _RUNNERS[args.command](cfg, out)
        _write_manifest(args.command, cfg, out)
    except UsageError as exc:
        print(f"mra {args.command}: {exc}", file=sys.stderr)
        return 2
    except DatasetFormatError as exc:
        print(f"mra {args.command}: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"mra {args.command}: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"mra {args.command}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
