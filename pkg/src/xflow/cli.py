"""Command line: `xflow run`, `xflow report`, `xflow agent`."""

from __future__ import annotations

import argparse
import json
import os
import signal
import subprocess
import sys
import time
from pathlib import Path

from . import analyzer
from .agent import AgentBuildError, agent_path, build_agent
from .data_folder import ledger_paths

DEFAULT_OUT = "./xflow-out"
EXIT_OK, EXIT_FATAL, EXIT_WARN = 0, 1, 2


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def build_env(args: argparse.Namespace, agent: Path, base: dict[str, str] | None = None) -> dict[str, str]:
    """Child environment: flags override the inherited XFLOW_* values."""
    env = dict(os.environ if base is None else base)
    pre = env.get("LD_PRELOAD", "").strip()
    env["LD_PRELOAD"] = f"{agent} {pre}".strip() if pre else str(agent)
    env["XFLOW_OUT_DIR"] = str(Path(args.out).resolve())
    if args.timing_rate is not None:
        env["XFLOW_TIMING_RATE"] = str(args.timing_rate)
    if args.dump_signal is not None:
        env["XFLOW_DUMP_SIGNAL"] = args.dump_signal
    if args.deny is not None:
        env["XFLOW_DENY_IMAGES"] = args.deny
    if args.shadow_depth is not None:
        env["XFLOW_SHADOW_DEPTH"] = str(args.shadow_depth)
    return env


def cmd_run(args: argparse.Namespace) -> int:
    command = list(args.command)
    if command and command[0] == "--":
        command = command[1:]
    if not command:
        print("xflow run: missing command (usage: xflow run [options] -- CMD ARGS...)", file=sys.stderr)
        return EXIT_FATAL
    try:
        agent = agent_path()
    except AgentBuildError as e:
        print(f"xflow run: {e}", file=sys.stderr)
        return EXIT_FATAL
    if not agent.is_file():
        print(f"xflow run: agent not found at {agent} (unset XFLOW_AGENT or run `xflow agent --rebuild`)",
              file=sys.stderr)
        return EXIT_FATAL
    if args.out is None:
        args.out = os.environ.get("XFLOW_OUT_DIR") or DEFAULT_OUT
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        print(f"xflow run: cannot create {out}: {e}", file=sys.stderr)
        return EXIT_FATAL
    env = build_env(args, agent)
    try:
        proc = subprocess.Popen(command, env=env)
    except OSError as e:
        print(f"xflow run: cannot launch {command[0]!r}: {e.strerror or e}", file=sys.stderr)
        return EXIT_FATAL
    meta = {"pid": proc.pid, "command": command, "agent": str(agent), "started": time.time()}
    (out / "xflow.run").write_text(json.dumps(meta, indent=2) + "\n")
    old = signal.signal(signal.SIGINT, signal.SIG_IGN)
    try:
        rc = proc.wait()
    finally:
        signal.signal(signal.SIGINT, old)
    n = len(ledger_paths(out, proc.pid))
    print(f"xflow: {n} ledger file(s) for pid {proc.pid} in {out}", file=sys.stderr)
    return 128 - rc if rc < 0 else rc


def cmd_report(args: argparse.Namespace) -> int:
    wait = None
    if args.wait_apis is not None:
        wait = [s for s in args.wait_apis.split(",") if s]
    try:
        agg = analyzer.merge_directory(args.out, args.pid, wait)
        views: list[analyzer.View] = []
        imbalance = None
        if args.view in (None, "component"):
            comp = args.image or agg.main_image
            views.append(analyzer.component_view(agg, comp))
            if args.view is None:
                callee = analyzer.largest_callee(agg, comp)
                if callee:
                    views.append(analyzer.api_view(agg, callee))
        elif args.view == "api":
            lib = args.image or analyzer.largest_callee(agg, agg.main_image)
            if lib is None:
                raise analyzer.AnalysisError("no callee library found; pass --image")
            views.append(analyzer.api_view(agg, lib))
        else:
            imbalance = analyzer.imbalance_report(agg, args.threshold)
    except analyzer.AnalysisError as e:
        print(f"xflow report: {e}", file=sys.stderr)
        return EXIT_FATAL
    pid = args.pid if args.pid is not None else analyzer.default_pid(args.out)
    if args.format == "json":
        sys.stdout.write(analyzer.render_json(agg, views, imbalance, pid))
    else:
        sys.stdout.write(analyzer.render_text(agg, views, imbalance))
    return EXIT_WARN if agg.warnings else EXIT_OK


def cmd_agent(args: argparse.Namespace) -> int:
    try:
        path = build_agent(force=True) if args.rebuild else agent_path()
    except AgentBuildError as e:
        print(f"xflow agent: {e}", file=sys.stderr)
        return EXIT_FATAL
    print(path)
    return EXIT_OK


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="xflow", description="Cross-component API profiler.")
    sub = p.add_subparsers(dest="cmd", required=True)

    r = sub.add_parser("run", help="run a command with the agent preloaded")
    r.add_argument("--out", help=f"ledger directory (env XFLOW_OUT_DIR, default {DEFAULT_OUT})")
    r.add_argument("--timing-rate", type=_positive_int, help="time one call in N per site")
    r.add_argument("--dump-signal", help="signal that snapshots ledgers mid-run, e.g. USR1")
    r.add_argument("--deny", help="comma-separated image path substrings to leave alone")
    r.add_argument("--shadow-depth", type=_positive_int, help="per-thread shadow stack depth")
    r.add_argument("command", nargs=argparse.REMAINDER, help="-- CMD ARGS...")
    r.set_defaults(func=cmd_run)

    rep = sub.add_parser("report", help="analyse ledgers")
    rep.add_argument("--out", default=os.environ.get("XFLOW_OUT_DIR", DEFAULT_OUT), help="ledger directory")
    rep.add_argument("--view", choices=("component", "api", "imbalance"))
    rep.add_argument("--image", help="component or library name (path, basename or substring)")
    rep.add_argument("--format", choices=("text", "json"), default="text")
    rep.add_argument("--pid", type=int, help="process to report (default: the last `xflow run`)")
    rep.add_argument("--threshold", type=float, default=4.0, help="imbalance ratio threshold")
    rep.add_argument("--wait-apis", help="comma-separated symbols counted as Wait (replaces the default set)")
    rep.set_defaults(func=cmd_report)

    a = sub.add_parser("agent", help="print the path of the built agent")
    a.add_argument("--rebuild", action="store_true")
    a.set_defaults(func=cmd_agent)
    return p


def main(argv: list[str] | None = None) -> int:
    args = make_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
