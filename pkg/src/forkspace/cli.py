"""Command-line entry point. Every experiment writes CSV to stdout or ``--out``."""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from pathlib import Path
from typing import Any, Sequence

from . import bench
from . import security as sec
from .filesystem import OverlayCosts
from .strategies import STRATEGIES, TCLONE, CostModel, rows_to_csv
from .traces import SMALL_SPEC, Trace, TraceError, best_of_n_trace, random_trace
from .workspace import CHROMIUM_SPEC, WorkspaceSpec

WORKSPACES = {"small": SMALL_SPEC, "chromium": CHROMIUM_SPEC}


class InvariantViolation(RuntimeError):
    pass


def load_config(arg: str | None) -> dict[str, Any]:
    """``--config`` takes a JSON file path or an inline JSON object."""
    if not arg:
        return {}
    text = Path(arg).read_text() if Path(arg).is_file() else arg
    cfg = json.loads(text)
    if not isinstance(cfg, dict):
        raise ValueError("config must be a JSON object")
    unknown = set(cfg) - {"cost", "overlay", "seed", "divergence", "workspace"}
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    return cfg


def _workspace(cfg: dict[str, Any], default: WorkspaceSpec) -> WorkspaceSpec:
    ws = cfg.get("workspace")
    if ws is None:
        return default
    if isinstance(ws, str):
        try:
            return WORKSPACES[ws]
        except KeyError:
            raise ValueError(f"unknown workspace {ws!r}; choose from {sorted(WORKSPACES)}") from None
    return WorkspaceSpec.from_json(ws)


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _check(rows: list[dict[str, Any]], problems: list[str]) -> str:
    bench.validate_rows(rows)
    if problems:
        raise InvariantViolation("; ".join(problems))
    return rows_to_csv(rows)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_replay(args: argparse.Namespace, cfg: dict[str, Any]) -> str:
    trace = Trace.load(args.trace)
    if args.seed is not None and args.seed != trace.seed:
        raise TraceError(f"trace was generated with seed {trace.seed}, not {args.seed}")
    names = list(STRATEGIES) if args.strategy == "all" else [args.strategy]
    rows = bench.replay_rows(trace, [STRATEGIES[n] for n in names], cost=CostModel.from_json(cfg.get("cost", {})),
                             verify=args.verify)
    problems = [f"{r['strategy']}: {r['diffs']} diffs against the oracle" for r in rows if r["diffs"]]
    return _check(rows, problems)


def cmd_gen_trace(args: argparse.Namespace, cfg: dict[str, Any]) -> str:
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    if args.kind == "random":
        trace = random_trace(args.length, seed, _workspace(cfg, SMALL_SPEC))
    else:
        trace = best_of_n_trace(args.steps, args.n, seed, _workspace(cfg, SMALL_SPEC))
    return trace.dumps()


def cmd_scalability(args: argparse.Namespace, cfg: dict[str, Any]) -> str:
    rows = bench.run_scalability(args.max_clones, spec=_workspace(cfg, CHROMIUM_SPEC),
                                 divergence=float(cfg.get("divergence", 0.01)),
                                 cost=CostModel.from_json(cfg.get("cost", {})), seed=int(cfg.get("seed", 0)))
    problems = []
    by_n: dict[int, dict[str, dict[str, Any]]] = {}
    for r in rows:
        by_n.setdefault(r["n"], {})[r["strategy"]] = r
    for n, pair in by_n.items():
        if pair["tclone"]["copied_bytes"]:
            problems.append(f"tclone copied page bytes at n={n}")
        if pair["tclone"]["footprint_bytes"] >= pair["criu"]["footprint_bytes"]:
            problems.append(f"tclone footprint not below eager at n={n}")
    return _check(rows, problems)


def cmd_ablation(args: argparse.Namespace, cfg: dict[str, Any]) -> str:
    rows = bench.run_ablation(spec=_workspace(cfg, CHROMIUM_SPEC), n=args.n,
                              cost=CostModel.from_json(cfg.get("cost", {})), seed=int(cfg.get("seed", 0)))
    problems = []
    if rows[-1]["dump_on_path_ms"] != 0:
        problems.append("final stage still has dump cost on the critical path")
    if rows[-1]["fork_copied_bytes"] != 0:
        problems.append("final stage copied page bytes at fork")
    return _check(rows, problems)


def cmd_layer_bench(args: argparse.Namespace, cfg: dict[str, Any]) -> str:
    costs = OverlayCosts(**cfg.get("overlay", {}))
    rows = bench.run_layer_bench(args.max_depth, file_bytes=args.file_bytes, costs=costs,
                                 seed=int(cfg.get("seed", 0)))
    problems = [f"overlay lookup at depth {r['depth']} probed {r['probes']} layers"
                for r in rows if r["system"] == "overlay" and r["op"] == "read_ro" and r["probes"] != r["depth"] + 1]
    return _check(rows, problems)


def cmd_e2e(args: argparse.Namespace, cfg: dict[str, Any]) -> str:
    rows = bench.run_e2e(args.tasks, spec=_workspace(cfg, SMALL_SPEC), cost=CostModel.from_json(cfg.get("cost", {})),
                         seed=int(cfg.get("seed", 0)))
    return _check(rows, [])


def cmd_profile(args: argparse.Namespace, cfg: dict[str, Any]) -> str:
    if args.action == "record":
        cls = sec.ProfileClass.PRIVILEGED if args.privileged else sec.ProfileClass.APPLICATION
        return sec.record_profile(sec.load_trace(args.trace), args.app, profile_class=cls).dumps()
    if args.action == "compose":
        registry: dict[str, sec.SecurityProfile] = {}
        for path in args.profile:
            p = sec.SecurityProfile.loads(Path(path).read_text())
            for app in p.apps:
                registry[app] = p
        return sec.compose_profile(registry, registry, mode=sec.Mode(args.mode)).dumps()
    # enforce
    profile = sec.SecurityProfile.loads(Path(args.profile[0]).read_text())
    if args.mode:
        profile = profile.with_mode(sec.Mode(args.mode))
    log = sec.EnforcementLog(args.log)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["branch", "kind", "target", "decision", "blocked"])
    for ev in sec.load_trace(args.trace):
        d = sec.enforce(profile, ev, log)
        w.writerow([ev.branch_id, ev.kind.value, ev.target, d.value, int(sec.blocks(profile, d))])
    return buf.getvalue()


def build_parser() -> argparse.ArgumentParser:
    # accepted before or after the subcommand; the later one wins
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", help="write output here instead of stdout")
    common.add_argument("--config", help="JSON file or inline object with cost/overlay/seed/divergence/workspace")
    p = argparse.ArgumentParser(prog="forkspace", description=__doc__)
    p.add_argument("--out", dest="top_out", help="write output here instead of stdout")
    p.add_argument("--config", dest="top_config",
                   help="JSON file or inline object with cost/overlay/seed/divergence/workspace")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("replay", parents=[common], help="replay a trace file against a strategy")
    r.add_argument("--trace", required=True)
    r.add_argument("--strategy", default=TCLONE.name, choices=[*STRATEGIES, "all"])
    r.add_argument("--verify", action="store_true", help="compare every branch against the eager oracle")
    r.add_argument("--seed", type=int, help="expected trace seed")
    r.set_defaults(func=cmd_replay)

    g = sub.add_parser("gen-trace", parents=[common], help="generate a replayable trace (JSONL)")
    g.add_argument("--kind", choices=["random", "best-of-n"], default="random")
    g.add_argument("--length", type=int, default=1000)
    g.add_argument("--steps", type=int, default=3)
    g.add_argument("--n", type=int, default=4)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gen_trace)

    s = sub.add_parser("scalability", parents=[common], help="clone latency and footprint versus clone count")
    s.add_argument("--max-clones", type=int, default=16)
    s.set_defaults(func=cmd_scalability)

    a = sub.add_parser("ablation", parents=[common], help="critical path of the five cumulative strategies")
    a.add_argument("--n", type=int, default=4)
    a.set_defaults(func=cmd_ablation)

    lb = sub.add_parser("layer-bench", parents=[common], help="file op latency versus layer depth")
    lb.add_argument("--max-depth", type=int, default=50)
    lb.add_argument("--file-bytes", type=int, default=1 << 20)
    lb.set_defaults(func=cmd_layer_bench)

    e = sub.add_parser("e2e", parents=[common], help="sorted best-of-4 task latencies (CDF)")
    e.add_argument("--tasks", type=int, default=20)
    e.set_defaults(func=cmd_e2e)

    pr = sub.add_parser("profile", parents=[common], help="record, compose or enforce security profiles")
    pr.add_argument("action", choices=["record", "compose", "enforce"])
    pr.add_argument("--trace", help="access-event JSONL")
    pr.add_argument("--app")
    pr.add_argument("--privileged", action="store_true")
    pr.add_argument("--profile", action="append", default=[], help="profile JSON (repeatable for compose)")
    pr.add_argument("--mode", choices=[m.value for m in sec.Mode])
    pr.add_argument("--log", help="append enforcement records to this JSONL file")
    pr.set_defaults(func=cmd_profile)
    return p


def _validate_profile_args(p: argparse.ArgumentParser, args: argparse.Namespace) -> None:
    if args.command != "profile":
        return
    need = {"record": ("trace", "app"), "compose": ("profile",), "enforce": ("trace", "profile")}[args.action]
    missing = [f"--{k}" for k in need if not getattr(args, k)]
    if missing:
        p.error(f"profile {args.action} requires {', '.join(missing)}")
    if args.action == "compose" and args.mode is None:
        args.mode = sec.Mode.ENFORCE.value


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args.out = args.out or args.top_out
    args.config = args.config or args.top_config
    _validate_profile_args(parser, args)
    try:
        cfg = load_config(args.config)
        text = args.func(args, cfg)
    except InvariantViolation as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return 2
    except (bench.SchemaError, TraceError, sec.ProfileError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    _emit(text, args.out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
