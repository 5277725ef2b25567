"""Command-line entry point: generate, decompose, detect, report."""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

from .evalrun import RunConfig, downstream_report, median_tp_by_tag, run_pipeline
from .exceptions import ConfigError, NetworkError, ScenarioError, SeriesTooShort, WDNFaultError
from .preprocess import stl_decompose
from .scenario import LabeledStream, Scenario, generate_with_history, standard_timeline

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


def _load_scenario(ref: str) -> Scenario:
    if ref == "standard":
        return standard_timeline()
    try:
        return Scenario.load(ref)
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ConfigError(f"cannot read scenario {ref}: {exc}") from exc


def cmd_generate(args) -> None:
    scn = _load_scenario(args.scenario)
    if args.seed is not None:
        scn = replace(scn, rng_seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    live, hist = generate_with_history(scn)
    live.to_csv(out / "stream.csv")
    hist.to_csv(out / "history.csv")
    scn.save(out / "scenario.json")
    print(f"wrote {len(live)} steps for {len(live.sensor_ids)} sensors to {out}")


def cmd_decompose(args) -> None:
    try:
        stream = LabeledStream.from_csv(args.stream)
    except OSError as exc:
        raise ConfigError(f"cannot read stream {args.stream}: {exc}") from exc
    sensors = [args.sensor] if args.sensor else list(stream.sensor_ids)
    missing = [s for s in sensors if s not in stream.sensor_ids]
    if missing:
        raise ConfigError(f"sensors not in the stream: {missing}")
    out = Path(args.out)
    for s in sensors:
        dec = stl_decompose(stream.sensor(s), args.period)
        path = out if len(sensors) == 1 else out.with_name(f"{out.stem}_{s}{out.suffix}")
        dec.to_csv(path)
        print(f"sensor {s}: {path}")


def _maybe_stream(path):
    return LabeledStream.from_csv(path) if path else None


def cmd_detect(args) -> None:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    scenario = args.scenario
    if scenario != "standard":
        scenario = str(Path(scenario).resolve())
        if not Path(scenario).exists():
            raise ConfigError(f"scenario file {scenario} not found")
    cfg = replace(cfg, scenario=scenario, output_dir=args.out)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    summary = run_pipeline(cfg, _maybe_stream(args.stream), _maybe_stream(args.history))
    for s, info in summary["sensors"].items():
        g = info["mean_gmean_blockage"]
        print(f"sensor {s}: blockage G-mean {'n/a' if g is None else f'{g:.3f}'}, "
              f"drift alarms {[a['step'] for a in info['drift_alarms']]}, "
              f"retrains {[r['step'] for r in info['retrains']]}")


def cmd_report(args) -> None:
    run = Path(args.run)
    if not (run / "scenario.json").exists() or not (run / "config.json").exists():
        raise ConfigError(f"{run} is not a run directory")
    rows = downstream_report(run, args.blocked_pipe)
    pipe = args.blocked_pipe or sorted({e.pipe_id for e in Scenario.load(run / "scenario.json").blockage_events})[0]
    path = run / f"report_pipe_{pipe}.csv"
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["sensor", "tag", "tp", "fp"])
        w.writeheader()
        w.writerows(rows)
    print(f"{'sensor':>8} {'tag':>10} {'TP':>6} {'FP':>6}")
    for r in rows:
        print(f"{r['sensor']:>8} {r['tag']:>10} {r['tp']:>6} {r['fp']:>6}")
    med = median_tp_by_tag(rows)
    print(f"median TP downstream={med['downstream']} upstream={med['upstream']}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="wdnfault", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="simulate a scenario into a labeled stream")
    g.add_argument("--scenario", required=True, help="scenario JSON, or 'standard' for the bundled timeline")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_generate)

    d = sub.add_parser("decompose", help="STL-decompose stream columns")
    d.add_argument("--stream", required=True)
    d.add_argument("--period", type=int, default=336)
    d.add_argument("--out", required=True)
    d.add_argument("--sensor")
    d.set_defaults(func=cmd_decompose)

    t = sub.add_parser("detect", help="run the streaming detectors")
    t.add_argument("--scenario", required=True)
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--stream", help="reuse a generated stream CSV")
    t.add_argument("--history", help="reuse a generated reference-year CSV")
    t.set_defaults(func=cmd_detect)

    r = sub.add_parser("report", help="per-sensor TP/FP table around a blocked pipe")
    r.add_argument("--run", required=True)
    r.add_argument("--blocked-pipe")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (ConfigError, ScenarioError, NetworkError, SeriesTooShort, OSError, json.JSONDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except WDNFaultError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
