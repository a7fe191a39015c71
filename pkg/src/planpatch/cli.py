"""Command-line experiment harness.

Verbs: run (one method over the 21-trial matrix), sweep (demo-count sweep),
door (door-analog trials), replay (stream a recorded episode), serve (teleop
session socket).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

from . import bench
from . import config as cfg


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="planpatch",
                                description="plan-then-patch experiment harness")
    p.add_argument("--config", type=str, default=None,
                   help="JSON config file overriding framework defaults")
    sub = p.add_subparsers(dest="verb", required=True)

    runp = sub.add_parser("run", help="run one method over the trial matrix")
    runp.add_argument("--method", choices=bench.METHODS, default="planner")
    runp.add_argument("--obstacle", action="store_true")
    runp.add_argument("--demos", type=int, default=20)
    runp.add_argument("--seed", type=int, default=0)
    runp.add_argument("--out", type=str, default="out")

    swp = sub.add_parser("sweep", help="demo-count sweep of the patched method")
    swp.add_argument("--demos", type=int, nargs="+", default=[1, 5, 10, 20])
    swp.add_argument("--seed", type=int, default=0)
    swp.add_argument("--out", type=str, default="out")

    doorp = sub.add_parser("door", help="pure-planner door-analog trials")
    doorp.add_argument("--trials", type=int, default=10)
    doorp.add_argument("--seed", type=int, default=0)
    doorp.add_argument("--out", type=str, default="out")

    rep = sub.add_parser("replay", help="stream a recorded episode log")
    rep.add_argument("log", type=str)
    rep.add_argument("--no-delay", action="store_true")

    srv = sub.add_parser("serve", help="teleop session service")
    srv.add_argument("--serve-port", type=int, default=8765)
    srv.add_argument("--demos", type=int, default=1)
    srv.add_argument("--seed", type=int, default=0)
    srv.add_argument("--out", type=str, default="out")
    return p


def load_config(path: str | None) -> cfg.FrameworkConfig:
    if path is None:
        return cfg.FrameworkConfig()
    with open(path) as fh:
        return cfg.FrameworkConfig.from_json(fh.read())


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    conf = load_config(args.config)

    if args.verb == "run":
        spec = bench.ExperimentSpec(method=args.method, obstacle=args.obstacle,
                                    seed=args.seed, n_demos=args.demos,
                                    config=conf)
        table = bench.run_experiment(spec)
        out = bench.emit_report(table, args.out)
        sys.stdout.write(out["summary"])
        return 0

    if args.verb == "sweep":
        spec = bench.ExperimentSpec(method="patched", seed=args.seed,
                                    demo_counts=tuple(args.demos), config=conf)
        table = bench.demo_sweep(spec)
        out = bench.emit_report(table, args.out)
        sys.stdout.write(out["summary"])
        return 0

    if args.verb == "door":
        successes, anomalies = bench.run_door_trials(args.trials, seed=args.seed)
        os.makedirs(args.out, exist_ok=True)
        line = (f"door: trials={args.trials} success={successes} "
                f"anomalies={anomalies}\n")
        with open(os.path.join(args.out, "summary.txt"), "w") as fh:
            fh.write(line)
        sys.stdout.write(line)
        return 0 if successes == args.trials else 1

    if args.verb == "replay":
        from .teleop import iter_replay
        for frame in iter_replay(args.log):
            sys.stdout.write(json.dumps(frame) + "\n")
            if not args.no_delay:
                time.sleep(0.05)
        return 0

    if args.verb == "serve":
        from .teleop import TeleopService
        service = TeleopService(port=args.serve_port, n_demos=args.demos,
                                seed=args.seed, config=conf, out_dir=args.out)
        service.serve_forever()
        return 0

    return 2


if __name__ == "__main__":
    raise SystemExit(main())
