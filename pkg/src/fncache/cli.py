"""Batch-experiment command line: `replay` runs a trace over the simulated
stack, `avail` and `cost` evaluate the closed-form models, `gen-trace`
emits synthetic workloads. Every subcommand prints a JSON document that
echoes its inputs; exit status is nonzero on any invariant violation."""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys

from .analytics import (
    AvailabilityQuery,
    CostModelInputs,
    availability_hour,
    cost_hour,
    crossover_rate,
    loss_approx,
    loss_exact,
)
from .config import ConfigError, SystemConfig, load_config
from .ec import ECConfig
from .replay import ReplayError, replay_trace
from .tracegen import (
    PROFILES,
    TraceError,
    generate_trace,
    read_trace,
    trace_to_text,
    write_trace,
)


def _emit(payload: dict, path) -> None:
    text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    if path:
        with open(path, "w", encoding="utf-8") as fp:
            fp.write(text)
    else:
        sys.stdout.write(text)


def _load_cfg(path) -> SystemConfig:
    return load_config(path) if path else SystemConfig()


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _cmd_replay(args) -> int:
    cfg = _load_cfg(args.config)
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.mode is not None:
        over["mode"] = args.mode
    if over:
        cfg = cfg.with_overrides(**over)
    records = read_trace(args.trace)
    report = replay_trace(cfg, records, pace=(cfg.mode == "realtime"))
    _emit({
        "inputs": {"trace": args.trace, "config": cfg.to_dict()},
        "report": report.to_dict(),
    }, args.report)
    return 0


def _parse_dist(spec: str, n_lambda: int, n: int, m: int) -> AvailabilityQuery:
    kind, sep, rest = spec.partition(":")
    if not sep:
        raise ValueError("--dist must look like zipf:S, poisson:L or table:FILE")
    if kind == "zipf":
        s_text, _, nmax_text = rest.partition(":")
        n_max = int(nmax_text) if nmax_text else None
        return AvailabilityQuery.zipf(n_lambda, n, m, float(s_text), n_max=n_max)
    if kind == "poisson":
        return AvailabilityQuery.poisson(n_lambda, n, m, float(rest))
    if kind == "table":
        with open(rest, encoding="utf-8") as fp:
            probs = [float(tok) for tok in fp.read().split()]
        return AvailabilityQuery.table(n_lambda, n, m, probs)
    raise ValueError(f"unknown distribution kind {kind!r}")


def _cmd_avail(args) -> int:
    ec = ECConfig.parse(args.ec)
    n = ec.d + ec.p
    m = ec.p + 1  # smallest count of straggler/lost chunks that breaks a read
    q = _parse_dist(args.dist, args.n_lambda, n, m)
    exact = loss_exact(q)
    approx = loss_approx(q)
    _emit({
        "inputs": {"n_lambda": args.n_lambda, "ec": args.ec,
                   "dist": args.dist,
                   "intervals_per_hour": args.intervals_per_hour},
        "loss_exact": exact,
        "loss_approx": approx,
        "availability_hour_exact": availability_hour(
            exact, args.intervals_per_hour),
        "availability_hour_approx": availability_hour(
            approx, args.intervals_per_hour),
    }, args.report)
    return 0


def _cmd_cost(args) -> int:
    cfg = _load_cfg(args.config)
    chunks = cfg.ec.d + cfg.ec.p
    f_w = 3600.0 / cfg.t_warm_s if cfg.t_warm_s > 0 else 0.0
    f_bak = 0.0
    if cfg.backup_enabled and cfg.t_bak_s > 0:
        f_bak = 3600.0 / cfg.t_bak_s
    inp = CostModelInputs(
        n_lambda=cfg.pool_size,
        memory_gb=cfg.lambda_memory_mb / 1024.0,
        c_req=cfg.c_req,
        c_dur=cfg.c_dur,
        f_w=f_w,
        f_bak=f_bak,
        n_ser=args.requests_per_hour * chunks,
        t_ser_ms=args.t_ser_ms,
        t_bak_s=args.t_bak_duration_s,
    )
    br = cost_hour(inp)
    payload = {
        "inputs": dataclasses.asdict(inp) | {
            "config": cfg.to_dict(),
            "requests_per_hour": args.requests_per_hour},
        "c_ser": br.c_ser,
        "c_w": br.c_w,
        "c_bak": br.c_bak,
        "total": br.total,
    }
    if args.crossover:
        if args.fixed_price is None:
            raise ValueError("--crossover requires --fixed-price")
        payload["fixed_price_hourly"] = args.fixed_price
        payload["crossover_requests_per_hour"] = crossover_rate(
            inp, chunks, args.fixed_price)
    _emit(payload, args.report)
    return 0


def _cmd_gen_trace(args) -> int:
    records = generate_trace(
        args.profile, args.hours, args.seed,
        n_objects=args.objects, events_per_hour=args.rate, skew=args.skew)
    if args.out:
        write_trace(records, args.out)
        _emit({
            "inputs": {"profile": args.profile, "hours": args.hours,
                       "seed": args.seed, "objects": args.objects,
                       "rate": args.rate, "skew": args.skew},
            "out": args.out,
            "records": len(records),
        }, None)
    else:
        sys.stdout.write(trace_to_text(records))
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="fncache",
        description="function-runtime cache: replay harness and model calculators")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("replay", help="replay a trace over the simulated stack")
    r.add_argument("--trace", required=True, help="CSV trace file")
    r.add_argument("--config", help="JSON config file (defaults if omitted)")
    r.add_argument("--seed", type=int, help="override config seed")
    r.add_argument("--mode", choices=("virtual", "realtime"),
                   help="override config mode")
    r.add_argument("--report", help="write the JSON report here (default stdout)")
    r.set_defaults(fn=_cmd_replay)

    a = sub.add_parser("avail", help="closed-form hourly availability")
    a.add_argument("--n-lambda", type=int, required=True,
                   help="pool size the chunks are spread over")
    a.add_argument("--ec", required=True, metavar="D+P")
    a.add_argument("--dist", required=True,
                   metavar="{zipf:S[:NMAX] | poisson:L | table:FILE}")
    a.add_argument("--intervals-per-hour", type=int, default=60)
    a.add_argument("--report", help="write JSON here (default stdout)")
    a.set_defaults(fn=_cmd_avail)

    c = sub.add_parser("cost", help="hourly dollar breakdown and crossover")
    c.add_argument("--config", help="JSON config file (defaults if omitted)")
    c.add_argument("--requests-per-hour", type=float, default=0.0,
                   help="object reads served per hour (chunk fan-out applied)")
    c.add_argument("--t-ser-ms", type=float, default=100.0,
                   help="billed duration of one chunk request")
    c.add_argument("--t-bak-duration-s", type=float, default=2.0,
                   help="billed duration of one backup run")
    c.add_argument("--crossover", action="store_true",
                   help="also report the break-even request rate")
    c.add_argument("--fixed-price", type=float, metavar="DOLLARS_PER_H",
                   help="hourly price of the fixed-size alternative")
    c.add_argument("--report", help="write JSON here (default stdout)")
    c.set_defaults(fn=_cmd_cost)

    g = sub.add_parser("gen-trace", help="emit a synthetic workload trace")
    g.add_argument("--profile", required=True, choices=sorted(PROFILES))
    g.add_argument("--hours", type=float, required=True)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out", help="trace file (default: trace text on stdout)")
    g.add_argument("--objects", type=int, default=1000)
    g.add_argument("--rate", type=float, default=2000.0,
                   help="events per hour")
    g.add_argument("--skew", type=float, default=1.0)
    g.set_defaults(fn=_cmd_gen_trace)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (TraceError, ConfigError, ReplayError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
