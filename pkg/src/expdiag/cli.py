"""Command-line entry point: ``expdiag {analyze,diagnose,temporal,meta,simulate}``.

Every command writes one JSON report (sorted keys, schema-versioned, with an
embedded run manifest).  Exit codes: 0 success with nothing flagged, 1 a
detector flagged, 2 or more an operational error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__
from .bias_diagnosis import DEFAULT_ALPHA, check_shared_hash_overlap, diagnose
from .datamodel import (SCHEMA_VERSION, ExperimentConfig, IngestedLog, ingest, load, load_config,
                        persist, read_events, save_config)
from .metacorr import (build_history, comovement, estimate_conditionals, fit_delta_relation,
                       fit_prior)
from .simulator import CorpusSpec, generate, generate_corpus, spec_from_dict
from .statscore import InsufficientData, UndefinedLift
from .temporal import analyze_trigger_day, detect_novelty, impact_series
from .trigger_engine import Mode, classify_coverage, lift

EXIT_OK, EXIT_FLAGGED, EXIT_ERROR = 0, 1, 2
SEED_ENV = "EXPDIAG_SEED"


class CLIError(Exception):
    pass


def _clean(obj: Any) -> Any:
    """JSON-safe copy: NaN/inf become null, numpy scalars become Python numbers."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return f if math.isfinite(f) else None
    return obj


def dumps(obj: Any) -> str:
    return json.dumps(_clean(obj), sort_keys=True, indent=2, allow_nan=False) + "\n"


def sha256(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def manifest(args: argparse.Namespace, inputs: Sequence[str], seeds: dict[str, int] | None = None
             ) -> dict[str, Any]:
    digests = {}
    for p in inputs:
        path = Path(p)
        if path.is_dir():
            for f in sorted(path.iterdir()):
                if f.is_file():
                    digests[str(f)] = sha256(f)
        else:
            digests[str(path)] = sha256(path)
    return {"command": args.command, "tool_version": __version__, "inputs": sorted(inputs),
            "input_digests": digests, "seeds": seeds or {}, "timestamp": args.timestamp,
            "options": {k: v for k, v in sorted(vars(args).items())
                        if k not in ("command", "func", "timestamp", "out", "plot_data")}}


def write_report(args: argparse.Namespace, result: dict[str, Any], man: dict[str, Any]) -> None:
    text = dumps({"schema_version": SCHEMA_VERSION, "manifest": man, "result": result})
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)


def write_tsv(path: str, rows: list[dict[str, Any]]) -> None:
    """Plain tab-separated table with a header row; missing values are empty."""
    if not rows:
        Path(path).write_text("")
        return
    cols = list(rows[0])
    lines = ["\t".join(cols)]
    for row in rows:
        cells = []
        for c in cols:
            v = _clean(row.get(c))
            cells.append("" if v is None else (repr(v) if isinstance(v, float) else str(v)))
        lines.append("\t".join(cells))
    Path(path).write_text("\n".join(lines) + "\n")


def _config(path: str) -> ExperimentConfig:
    if not Path(path).exists():
        raise FileNotFoundError(f"config not found: {path}")
    return load_config(path)


def _log(events: str, config: str | ExperimentConfig) -> IngestedLog:
    cfg = _config(config) if isinstance(config, str) else config
    if not Path(events).exists():
        raise FileNotFoundError(f"events not found: {events}")
    return ingest(read_events(events), cfg)


def _range(text: str | None) -> tuple[int, int] | None:
    if text is None:
        return None
    try:
        x, y = (int(v) for v in text.split(","))
    except ValueError:
        raise CLIError(f"range must look like 'x,y' (got {text!r})") from None
    return x, y


# --------------------------------------------------------------------------
# commands


def cmd_analyze(args: argparse.Namespace) -> int:
    log = _log(args.events, args.config)
    rng = _range(args.range) or (log.first_day, log.n_days)
    metrics = args.metrics.split(",") if args.metrics else sorted(log.metrics)
    out = {}
    for m in metrics:
        entry: dict[str, Any] = {"coverage": classify_coverage(log, m).kind.value}
        for name, r, mode in (("cross_day", rng, Mode.TRIGGERED),
                              ("single_day", (rng[1], rng[1]), Mode.SINGLE_DAY)):
            try:
                entry[name] = {"range": list(r), **lift(log, m, r, mode).to_dict()}
            except (InsufficientData, UndefinedLift) as exc:
                entry[name] = {"range": list(r), "error": str(exc)}
        out[m] = entry
    write_report(args, {"experiment_id": log.experiment_id, "range": list(rng), "metrics": out},
                 manifest(args, [args.events, args.config]))
    return EXIT_OK


def _sibling(spec: str) -> tuple[str, str]:
    if ":" not in spec:
        raise CLIError(f"--sibling expects EVENTS:CONFIG (got {spec!r})")
    ev, cfg = spec.rsplit(":", 1)
    return ev, cfg


def cmd_diagnose(args: argparse.Namespace) -> int:
    log = _log(args.events, args.config)
    siblings, inputs = [], [args.events, args.config]
    for s in args.sibling or []:
        ev, cfg = _sibling(s)
        sib = _log(ev, cfg)
        # overlap was requested explicitly, so incomparable hashes are an error
        check_shared_hash_overlap(log, sib, _range(args.range), args.alpha)
        siblings.append(sib)
        inputs += [ev, cfg]
    report = diagnose(log, siblings, _range(args.range), args.alpha)
    if args.plot_data:
        write_tsv(args.plot_data, list(report.series))
    write_report(args, report.to_dict(), manifest(args, inputs))
    return EXIT_FLAGGED if report.primary.mismatch else EXIT_OK


def cmd_temporal(args: argparse.Namespace) -> int:
    log = _log(args.events, args.config)
    finding = analyze_trigger_day(log, args.metric, args.w_threshold, args.alpha)
    series = impact_series(log, args.metric)
    result: dict[str, Any] = {"experiment_id": log.experiment_id, "metric_id": args.metric,
                              "trigger_day": finding.to_dict(), "series": series.rows()}
    flagged = finding.flag
    if len(series.single) >= 7 and all(s is not None for s in series.single):
        nov = detect_novelty(series, alpha_extremes=args.alpha_extremes)
        result["novelty"] = nov.to_dict()
        flagged = flagged or nov.flag
        fitted = dict(zip(nov.days, nov.fitted))
        rows = [{**r, "novelty_fit": fitted.get(i + 1)} for i, r in enumerate(series.rows())]
    else:
        result["novelty"] = {"skipped": "needs at least 7 days with defined single-day lifts"}
        rows = series.rows()
    if args.plot_data:
        write_tsv(args.plot_data, rows)
    write_report(args, result, manifest(args, [args.events, args.config]))
    return EXIT_FLAGGED if flagged else EXIT_OK


def cmd_meta(args: argparse.Namespace) -> int:
    corpus = Path(args.corpus_dir)
    store_path = corpus / "store.npz"
    if not store_path.exists():
        raise FileNotFoundError(f"corpus store not found: {store_path}")
    try:
        x, y = args.pair.split(",")
    except ValueError:
        raise CLIError(f"--pair expects X,Y (got {args.pair!r})") from None
    rho = args.rho
    if rho is None:
        corr_path = corpus / "correlations.json"
        corr = json.loads(corr_path.read_text()) if corr_path.exists() else {}
        if f"{x}|{y}" in corr:
            rho = float(corr[f"{x}|{y}"])
        elif f"{y}|{x}" in corr:
            rho = float(corr[f"{y}|{x}"])
        else:
            raise CLIError(f"no correlation for {x},{y}: pass --rho or add correlations.json")
    history = build_history(load(store_path), min_days=args.min_days)
    result: dict[str, Any] = {"pair": [x, y], "rho": rho, "n_records": len(history)}
    for key, fn in (
            ("comovement", lambda: comovement(history, x, y, rho, args.alpha, seed=args.seed)),
            ("delta_relation", lambda: fit_delta_relation(history, x, y, args.q))):
        try:
            result[key] = fn().to_dict()
        except InsufficientData as exc:
            result[key] = {"error": str(exc)}
    for metric in (x, y):
        prior = fit_prior(history, metric)
        result[f"prior_{metric}"] = {"pi1": prior.pi1, "v_sq": prior.v_sq,
                                     "unidentifiable": prior.unidentifiable,
                                     "iterations": prior.iterations}
    result["conditionals"] = estimate_conditionals(history, x, y, rho, args.alpha,
                                                   seed=args.seed).tolist()
    write_report(args, result, manifest(args, [args.corpus_dir], {"null_simulation": args.seed}))
    return EXIT_OK


def _spec_seed(data: dict[str, Any], override: int | None) -> int:
    if override is not None:
        return override
    if data.get("seed") is not None:
        return int(data["seed"])
    if os.environ.get(SEED_ENV):
        return int(os.environ[SEED_ENV])
    raise CLIError(f"seed missing: set it in the spec, pass --seed or set {SEED_ENV}")


def cmd_simulate(args: argparse.Namespace) -> int:
    path = Path(args.spec)
    if not path.exists():
        raise FileNotFoundError(f"spec not found: {path}")
    text = path.read_text()
    if path.suffix in (".yaml", ".yml"):
        import yaml
        data = yaml.safe_load(text)
    else:
        data = json.loads(text)
    data = dict(data)
    data["seed"] = _spec_seed(data, args.seed)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if data.get("kind") == "Corpus":
        data.pop("kind")
        spec = CorpusSpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in data.items()})
        corpus = generate_corpus(spec)
        persist(corpus.store, out / "store.npz")
        (out / "correlations.json").write_text(dumps(corpus.correlations))
        (out / "truth.json").write_text(dumps({"spec": spec.to_dict(), "truth": corpus.truth}))
        written = ["store.npz", "correlations.json", "truth.json"]
    else:
        sim = generate(spec_from_dict(data))
        sim.events.write_jsonl(out / "events.jsonl")
        save_config(sim.config, out / "config.json")
        (out / "truth.json").write_text(dumps(sim.truth.to_dict()))
        written = ["events.jsonl", "config.json", "truth.json"]
        for ev, cfg in sim.siblings:
            ev.write_jsonl(out / f"sibling_{cfg.experiment_id}.jsonl")
            save_config(cfg, out / f"sibling_{cfg.experiment_id}.config.json")
            written += [f"sibling_{cfg.experiment_id}.jsonl",
                        f"sibling_{cfg.experiment_id}.config.json"]
    outputs = {name: sha256(out / name) for name in written}
    write_report(args, {"outputs": outputs}, manifest(args, [args.spec], {"seed": data["seed"]}))
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="expdiag", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--out", help="report path (default: stdout)")
        sp.add_argument("--timestamp", default=None,
                        help="timestamp recorded in the manifest (default: none, for "
                             "byte-identical reruns)")

    a = sub.add_parser("analyze", help="cross-day and latest single-day lifts per metric")
    a.add_argument("events")
    a.add_argument("--config", required=True)
    a.add_argument("--range", help="x,y (default: counted days)")
    a.add_argument("--metrics", help="comma-separated metric ids (default: all)")
    common(a)
    a.set_defaults(func=cmd_analyze)

    d = sub.add_parser("diagnose", help="sample size ratio test and root-cause checks")
    d.add_argument("events")
    d.add_argument("--config", required=True)
    d.add_argument("--sibling", action="append", metavar="EVENTS:CONFIG",
                   help="experiment sharing the hash namespace (repeatable)")
    d.add_argument("--alpha", type=float, default=DEFAULT_ALPHA)
    d.add_argument("--range", help="x,y (default: counted days)")
    d.add_argument("--plot-data", help="TSV path for the per-day new/returned series")
    common(d)
    d.set_defaults(func=cmd_diagnose)

    t = sub.add_parser("temporal", help="trigger-day and novelty detectors for one metric")
    t.add_argument("events")
    t.add_argument("--config", required=True)
    t.add_argument("--metric", required=True)
    t.add_argument("--w-threshold", type=float, default=0.8)
    t.add_argument("--alpha", type=float, default=0.01)
    t.add_argument("--alpha-extremes", type=float, default=0.005)
    t.add_argument("--plot-data", help="TSV path for the impact series")
    common(t)
    t.set_defaults(func=cmd_temporal)

    m = sub.add_parser("meta", help="co-movement, lift relation and priors for a metric pair")
    m.add_argument("corpus_dir")
    m.add_argument("--pair", required=True, help="X,Y")
    m.add_argument("--rho", type=float, help="user-level correlation (default: correlations.json)")
    m.add_argument("--alpha", type=float, default=0.05)
    m.add_argument("--q", type=float, default=0.05)
    m.add_argument("--min-days", type=int, default=7)
    m.add_argument("--seed", type=int, default=None)
    common(m)
    m.set_defaults(func=cmd_meta)

    s = sub.add_parser("simulate", help="generate a scenario log or corpus from a spec file")
    s.add_argument("spec")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--seed", type=int, default=None)
    common(s)
    s.set_defaults(func=cmd_simulate)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "command", None) == "meta" and args.seed is None:
        args.seed = int(os.environ.get(SEED_ENV, 0))
    try:
        return args.func(args)
    except Exception as exc:  # report every failure as a machine-readable object
        err = {"error": {"type": type(exc).__name__, "message": str(exc).strip("'\"")},
               "schema_version": SCHEMA_VERSION}
        sys.stderr.write(json.dumps(err, sort_keys=True) + "\n")
        return EXIT_ERROR


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
