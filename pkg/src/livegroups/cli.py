"""Command line front end: ``livegroups simulate|replay|bounds|scenarios``.

Exit codes: 0 success, 1 usage error, 2 input error, 3 internal invariant
violation.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from . import __version__
from .consensus import ProximityScale
from .metrics import (
    BoundParams,
    ReplayResult,
    bound_expected_tau,
    bound_tau_with_confidence,
    replay,
    summarize,
    tau_histogram,
    tau_values,
)
from .netsim import ConfigError, SimConfig, apply_overrides, run
from .scenario import BUILTIN, GroundTruthGroups, Scenario, ScenarioError
from .trace import RunManifest, TraceFormatError, canonical_hash, read_trace, write_trace

log = logging.getLogger("livegroups")

OUT_ENV = "LIVEGROUPS_OUT"
EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_INVARIANT = 0, 1, 2, 3


class UsageError(Exception):
    pass


class InvariantViolation(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _parse_sets(items: Sequence[str]) -> Dict[str, str]:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _flatten(d: dict, prefix: str = "") -> Dict[str, object]:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def load_scenario(spec: str) -> Scenario:
    path = Path(spec)
    if path.exists():
        return Scenario.load(path)
    if spec in BUILTIN:
        return BUILTIN[spec]()
    raise ScenarioError(f"no scenario file {spec!r} (and not a built-in: {', '.join(sorted(BUILTIN))})")


# -- artifact writers -----------------------------------------------------------


def _fmt(x: Optional[float]) -> str:
    return "" if x is None else f"{x:.3f}"


def write_metrics(out: Path, result: ReplayResult, records, meta: dict, partial: bool = False,
                  errors: Sequence = ()) -> dict:
    n = int(meta["n_nodes"])
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("epoch", "start_ms", "tau", "converged", "complete", "convergence_ms"))
        for e in result.epochs:
            w.writerow((e.epoch, _fmt(e.start_ms), e.tau, int(e.converged), int(e.complete), _fmt(e.convergence_ms)))
    with open(out / "histogram.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("tau", "count"))
        w.writerows(tau_histogram(tau_values(result.epochs)))
    summary = summarize(result, records, n, float(meta["duration_ms"]), int(meta["mate_threshold"]))
    summary["partial"] = partial
    summary["parse_errors"] = len(errors)
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    return summary


def _simulate_one(scenario: Scenario, config: SimConfig, overrides: dict, out: Path) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    trace = run(config, scenario)
    meta = trace.meta()
    with open(out / "trace.csv", "w", newline="") as fh:
        write_trace(trace.records, fh, meta)
    (out / "scenario.json").write_text(scenario.to_json() + "\n")
    truth = scenario.truth()
    result = replay(trace.records, trace.n_nodes, scenario.scale, truth, trace.duration_ms, config.epoch_period_ms)
    if result.final_states != trace.final_states:
        raise InvariantViolation("replayed node states diverge from the simulator's")
    summary = write_metrics(out, result, trace.records, meta)
    cfg_dict = config.to_dict()
    manifest = RunManifest(
        config_hash=canonical_hash(cfg_dict),
        scenario_hash=canonical_hash(scenario.to_dict()),
        seed=config.seed,
        tool_version=__version__,
        start_ms=0.0,
        end_ms=trace.duration_ms,
        config=cfg_dict,
        overrides={k: str(v) for k, v in sorted(overrides.items())},
    )
    (out / "manifest.json").write_text(manifest.to_json() + "\n")
    return summary


def _simulate_job(args):
    scenario_dict, cfg_dict, overrides, out = args
    return _simulate_one(Scenario.from_dict(scenario_dict), SimConfig.from_dict(cfg_dict), overrides, Path(out))


def cmd_simulate(args) -> int:
    scenario = load_scenario(args.scenario)
    overrides: Dict[str, object] = dict(_flatten(scenario.config))
    if args.config:
        try:
            overrides.update(_flatten(json.loads(Path(args.config).read_text())))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc
    overrides.update(_parse_sets(args.set))
    if args.seed is not None:
        overrides["seed"] = args.seed
    config, scenario = apply_overrides(SimConfig(), scenario, overrides)
    out = Path(args.out or os.environ.get(OUT_ENV) or "out")
    if args.runs <= 1:
        summary = _simulate_one(scenario, config, overrides, out)
        _print_summary(summary, out)
        return EXIT_OK
    jobs = []
    for k in range(args.runs):
        cfg_k = SimConfig.from_dict({**config.to_dict(), "seed": config.seed + k})
        ov = {**overrides, "seed": config.seed + k}
        jobs.append((scenario.to_dict(), cfg_k.to_dict(), ov, str(out / f"seed_{config.seed + k}")))
    workers = max(1, min(args.runs, args.jobs or os.cpu_count() or 1))
    if workers == 1:
        summaries = [_simulate_job(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            summaries = list(pool.map(_simulate_job, jobs))
    for j, s in zip(jobs, summaries):
        _print_summary(s, Path(j[3]))
    return EXIT_OK


def _print_summary(summary: dict, out: Path) -> None:
    ch = summary["channel"]
    tau = summary["tau_mean"]
    print(
        f"{out}: epochs={summary['epochs']} converged={summary['epochs_converged']} "
        f"tau_mean={'n/a' if tau is None else f'{tau:.2f}'} loss={ch['loss_rate']:.3f} "
        f"tx_rate={ch['tx_rate_per_node']:.2f}/s"
    )


def cmd_replay(args) -> int:
    trace_path = Path(args.trace)
    with open(trace_path) as fh:
        parsed = read_trace(fh)
    for lineno, msg in parsed.errors:
        print(f"{trace_path}:{lineno}: {msg}", file=sys.stderr)
    scen_path = Path(args.scenario) if args.scenario else trace_path.parent / "scenario.json"
    scenario = Scenario.load(scen_path)
    meta = parsed.meta
    n = int(meta["n_nodes"])
    if n != scenario.n_nodes:
        raise ScenarioError(f"trace has {n} nodes but scenario {scen_path} has {scenario.n_nodes}")
    scale = ProximityScale(M=int(meta["M"]), mate_threshold=int(meta["mate_threshold"]))
    duration = float(meta["duration_ms"])
    result = replay(parsed.records, n, scale, scenario.truth(), duration, float(meta["epoch_period_ms"]))
    out = Path(args.out) if args.out else trace_path.parent / "replay"
    out.mkdir(parents=True, exist_ok=True)
    summary = write_metrics(out, result, parsed.records, meta, partial=parsed.partial, errors=parsed.errors)
    _print_summary(summary, out)
    if parsed.partial:
        print(f"{trace_path}: trace is partial ({len(parsed.errors)} bad rows)", file=sys.stderr)
    return EXIT_OK


def cmd_bounds(args) -> int:
    try:
        p = BoundParams(args.N, args.Delta, args.epsilon)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    e1, e2 = bound_expected_tau(p), bound_tau_with_confidence(p)
    if args.json:
        print(json.dumps({"N": p.N, "Delta": p.Delta, "epsilon": p.epsilon,
                          "expected_tau": e1, "tau_with_confidence": e2}, sort_keys=True))
    else:
        print(f"N={p.N} Delta={p.Delta} epsilon={p.epsilon}")
        print(f"E[tau] <  {e1:.2f}")
        print(f"tau    <  {e2:.2f}  (probability {1 - p.epsilon:g})")
    return EXIT_OK


def cmd_scenarios(args) -> int:
    if args.action == "list":
        for name in sorted(BUILTIN):
            print(f"{name}: {BUILTIN[name]().description}")
        return EXIT_OK
    if not args.name:
        raise UsageError("scenarios generate needs a scenario name")
    if args.name not in BUILTIN:
        raise UsageError(f"unknown scenario {args.name!r}; try 'scenarios list'")
    text = BUILTIN[args.name]().to_json() + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="livegroups", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="run a scenario and write trace + metrics")
    s.add_argument("--scenario", required=True, help="scenario JSON file or built-in name")
    s.add_argument("--seed", type=int)
    s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="config override, e.g. epoch_period_ms=400 or channel.loss_floor=0.1")
    s.add_argument("--config", help="JSON file of overrides (below --set in precedence)")
    s.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./out)")
    s.add_argument("--runs", type=int, default=1, help="independent seeds seed..seed+runs-1")
    s.add_argument("--jobs", type=int, help="worker processes for --runs")
    s.set_defaults(func=cmd_simulate)

    r = sub.add_parser("replay", help="recompute metrics from a stored trace")
    r.add_argument("trace")
    r.add_argument("--scenario", help="scenario JSON (default: scenario.json next to the trace)")
    r.add_argument("--out")
    r.set_defaults(func=cmd_replay)

    b = sub.add_parser("bounds", help="print the convergence bounds")
    b.add_argument("N", type=int)
    b.add_argument("Delta", type=int)
    b.add_argument("epsilon", type=float)
    b.add_argument("--json", action="store_true")
    b.set_defaults(func=cmd_bounds)

    c = sub.add_parser("scenarios", help="list or generate built-in scenarios")
    c.add_argument("action", choices=("list", "generate"))
    c.add_argument("name", nargs="?")
    c.add_argument("--out")
    c.set_defaults(func=cmd_scenarios)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"livegroups: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ScenarioError, ConfigError, TraceFormatError, OSError) as exc:
        print(f"livegroups: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except InvariantViolation as exc:
        print(f"livegroups: invariant violated: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
