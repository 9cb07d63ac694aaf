"""Command-line front end.

Exit codes are a stable contract: 0 success, 1 an invariant or bound
failed, 2 usage or config error.  All reports are deterministic for a
fixed config and seed; `--json` swaps the text rendering for a
machine-readable one.
"""

from __future__ import annotations

import argparse
import json
import sys

from .bench import BenchConfig, run_bench, run_churn
from .errors import ProtocolError, ScenarioError
from .scenario import crash_suite, run_scenario


def _load_json(path: str):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as err:
        raise ScenarioError(f"{path}: {err.strerror or err}") from err
    except json.JSONDecodeError as err:
        raise ScenarioError(
            f"{path}:{err.lineno}: {err.msg}") from err


def _cmd_scenario(args) -> int:
    cfg = _load_json(args.file)
    if not isinstance(cfg, dict):
        raise ScenarioError(f"{args.file}: scenario config must be an object")
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.faults:
        extra = _load_json(args.faults)
        if not isinstance(extra, list):
            raise ScenarioError(f"{args.faults}: fault file must be a list")
        cfg["faults"] = list(cfg.get("faults", [])) + extra
    _, report = run_scenario(cfg)
    print(report.to_json() if args.json else report.to_text())
    return 0 if report.ok() else 1


def _cmd_bench(args) -> int:
    config = (BenchConfig.from_dict(_load_json(args.config))
              if args.config else BenchConfig())
    report = run_bench(config, args.mode)
    print(report.to_json() if args.json else report.to_text())
    return 0 if report.ok() else 1


def _cmd_prune_report(args) -> int:
    cfg = _load_json(args.file)
    if not isinstance(cfg, dict):
        raise ScenarioError(f"{args.file}: churn config must be an object")
    blocks = int(cfg.get("blocks", 100))
    ops = cfg.get("ops", [1000, 10000])
    if isinstance(ops, int):
        ops = [ops]
    seed = int(cfg.get("seed", 7))
    reports = [run_churn(blocks=blocks, ops=int(n), seed=seed) for n in ops]
    ok = all(r.bound_ok() for r in reports)
    if args.json:
        print(json.dumps({"ok": ok, "runs": [r.to_dict() for r in reports]},
                         indent=2, sort_keys=True))
    else:
        print("\n".join(r.to_text() for r in reports))
    return 0 if ok else 1


def _cmd_crash_suite(args) -> int:
    cfg = _load_json(args.file)
    if not isinstance(cfg, dict):
        raise ScenarioError(f"{args.file}: scenario config must be an object")
    report = crash_suite(cfg)
    print(report.to_json() if args.json else report.to_text())
    return 0 if report.ok() else 1


def main(argv=None) -> int:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--json", action="store_true",
                        help="machine-readable report")
    parser = argparse.ArgumentParser(
        prog="safius",
        description="Accountable filesystem protocols over an untrusted "
                    "block store, run under a deterministic simulator.")
    sub = parser.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("scenario", parents=[shared],
                       help="run a scenario config file")
    p.add_argument("file")
    p.add_argument("--seed", type=int, default=None,
                   help="override the config's seed")
    p.add_argument("--faults", default=None,
                   help="JSON file with extra fault injections")
    p.set_defaults(fn=_cmd_scenario)

    p = sub.add_parser("bench", parents=[shared],
                       help="run the store workload and report counters "
                            "and the latency histogram")
    p.add_argument("--mode", default="async-sign",
                   choices=("sync-sign", "async-sign", "no-sign"))
    p.add_argument("--config", default=None, help="bench config JSON file")
    p.set_defaults(fn=_cmd_bench)

    p = sub.add_parser("prune-report", parents=[shared],
                       help="churn a bounded block set and report vault "
                            "size before and after pruning")
    p.add_argument("file")
    p.set_defaults(fn=_cmd_prune_report)

    p = sub.add_parser("crash-suite", parents=[shared],
                       help="enumerate crash points in a marked scenario "
                            "step and check recovery against clean oracles")
    p.add_argument("file")
    p.set_defaults(fn=_cmd_crash_suite)

    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ScenarioError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except ProtocolError as err:
        print(f"protocol error: {type(err).__name__}: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
