"""Command line entry points: run, budget, sweep.

Exit codes: 0 success, 1 runtime failure, 2 usage or config error.
"""

import argparse
import copy
import math
import os
import sys
import traceback

from . import config as cfgmod
from . import data as datamod
from . import model as mdl
from .errors import BracketError, ConfigError, DpzvError
from .privacy import gdp_to_delta, noise_scale, solve_epsilon, solve_mu
from .protocol import comm_volume, resolve_noise, run_training

SWEEP_HEADER = "value,sigma_dp,final_acc,rounds_to_target,v_t_bytes"


def _build_dataset(cfg, run_cfg):
    ds = cfg["dataset"]
    if ds["kind"] == "synthetic":
        return datamod.make_synthetic(
            ds["num_samples"],
            ds["total_dim"],
            cfg["federation"]["num_devices"],
            ds["num_classes"],
            ds["margin"],
            seed=run_cfg.master_seed,
        )
    if ds["kind"] == "idx":
        features, labels = datamod.load_idx(ds["images"], ds["labels"])
    else:
        features, labels = datamod.load_csv(ds["path"])
    return datamod.from_features(
        features, labels, cfg["federation"]["num_devices"], scheme=ds["partition"]
    )


def _run_one(cfg, seed, out_dir):
    """Execute one experiment cell; returns (trace, sigma, run_cfg)."""
    run_cfg = cfgmod.to_run_config(cfg, seed_override=seed)
    dataset = _build_dataset(cfg, run_cfg)
    trace = run_training(run_cfg, dataset)
    sigma, _, _ = resolve_noise(run_cfg, dataset.num_samples)

    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "metrics.csv"), "w", encoding="utf-8") as fh:
        trace.to_csv(fh)
    with open(os.path.join(out_dir, "ledger.csv"), "w", encoding="utf-8") as fh:
        fh.write("round,device,uplink_payload_bytes,uplink_id_bytes,downlink_bytes\n")
        for r in trace.ledger.records:
            fh.write(
                f"{r['round']},{r['device']},{r['uplink_payload_bytes']},"
                f"{r['uplink_id_bytes']},{r['downlink_bytes']}\n"
            )
    return trace, sigma, run_cfg


def cmd_run(args):
    try:
        cfg = cfgmod.load_config(args.config)
        if args.out is not None:
            cfg["output_dir"] = args.out
        if args.seed is not None:
            cfg["seed"] = args.seed
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        out_dir = cfg["output_dir"]
        run_cfg = cfgmod.to_run_config(cfg)
        dataset = _build_dataset(cfg, run_cfg)
        trace, server_devices = run_training(run_cfg, dataset, return_states=True)
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "metrics.csv"), "w", encoding="utf-8") as fh:
            trace.to_csv(fh)
        with open(os.path.join(out_dir, "ledger.csv"), "w", encoding="utf-8") as fh:
            fh.write("round,device,uplink_payload_bytes,uplink_id_bytes,downlink_bytes\n")
            for r in trace.ledger.records:
                fh.write(
                    f"{r['round']},{r['device']},{r['uplink_payload_bytes']},"
                    f"{r['uplink_id_bytes']},{r['downlink_bytes']}\n"
                )
        server, devices = server_devices
        params = {0: server.head.params}
        for d in devices:
            params[d.device_id + 1] = d.model.params
        mdl.save_checkpoint(os.path.join(out_dir, "checkpoint.bin"), params)
        cfgmod.dump_resolved(cfg, os.path.join(out_dir, "resolved.yaml"))
        final = trace.final_accuracy()
        total = comm_volume(trace)
        total_noid = comm_volume(trace, include_ids=False)
        acc_text = "n/a" if final is None else f"{final:.6g}"
        print(f"rounds={run_cfg.rounds} final_acc={acc_text}")
        print(f"total_bytes={total} total_bytes_without_ids={total_noid}")
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DpzvError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 1
    except Exception:
        traceback.print_exc()
        return 1


def cmd_budget(args):
    given = {
        name: getattr(args, name)
        for name in ("epsilon", "delta", "mu")
        if getattr(args, name) is not None
    }
    if len(given) != 2:
        print(
            "budget needs exactly two of --epsilon, --delta, --mu "
            f"(got {sorted(given) or 'none'})",
            file=sys.stderr,
        )
        return 2
    try:
        if "epsilon" in given and "delta" in given:
            mu = solve_mu(args.epsilon, args.delta)
            eps, delta = args.epsilon, args.delta
            print(f"mu = {mu:.6g}")
        elif "mu" in given and "epsilon" in given:
            delta = gdp_to_delta(args.mu, args.epsilon)
            mu, eps = args.mu, args.epsilon
            print(f"delta = {delta:.6g}")
        else:
            eps = solve_epsilon(args.mu, args.delta)
            mu, delta = args.mu, args.delta
            print(f"epsilon = {eps:.6g}")
        print(f"(epsilon={eps:.6g}, delta={delta:.6g}, mu={mu:.6g})")
        extras = [args.T, args.D, args.C]
        if any(v is not None for v in extras):
            if any(v is None for v in extras):
                print("sigma_dp needs all of --T, --D, --C", file=sys.stderr)
                return 2
            sigma = noise_scale(args.C, args.T, args.D, mu)
            print(f"sigma_dp = {sigma:.6g}")
        return 0
    except BracketError as exc:
        print(
            f"unreachable target: {exc} "
            f"[bracket {exc.lo:g}..{exc.hi:g} maps to {exc.f_lo:g}..{exc.f_hi:g}]",
            file=sys.stderr,
        )
        return 2
    except (ValueError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


_SWEEP_SETTERS = {
    "epsilon": ("privacy", "epsilon"),
    "C": ("training", "clip_c"),
    "lambda": ("training", "lambda"),
    "B": ("training", "batch_size"),
}


def _parse_sweep_value(axis, token):
    token = token.strip()
    if axis == "epsilon" and token in ("inf", "Infinity"):
        return math.inf
    if axis == "B":
        return int(token)
    return float(token)


def cmd_sweep(args):
    try:
        cfg = cfgmod.load_config(args.config)
        if args.out is not None:
            cfg["output_dir"] = args.out
        if args.seed is not None:
            cfg["seed"] = args.seed
        tokens = [t for t in args.values.split(",") if t.strip()]
        if not tokens:
            print("sweep needs a nonempty --values list", file=sys.stderr)
            return 2
        values = [_parse_sweep_value(args.axis, t) for t in tokens]
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    out_root = cfg["output_dir"]
    os.makedirs(out_root, exist_ok=True)
    target = cfg["eval"]["target_accuracy"]
    rows = []
    failed = False
    for value in values:
        cell = copy.deepcopy(cfg)
        section, key = _SWEEP_SETTERS[args.axis]
        cell[section][key] = value
        if args.axis == "epsilon":
            cell["privacy"]["sigma_dp"] = None
            if cell["privacy"]["delta"] is None:
                cell["privacy"]["delta"] = 1e-3
        label = "inf" if isinstance(value, float) and math.isinf(value) else f"{value:g}"
        cell_dir = os.path.join(out_root, f"sweep_{args.axis}_{label}")
        try:
            trace, sigma, _ = _run_one(cell, cell["seed"], cell_dir)
        except (ConfigError, DpzvError, OSError, ValueError) as exc:
            print(f"sweep cell {args.axis}={label} failed: {exc}", file=sys.stderr)
            failed = True
            continue
        final = trace.final_accuracy()
        rows.append(
            f"{label},{sigma:.10g},{final:.10g},{trace.rounds_to_target(target)},"
            f"{comm_volume(trace)}"
        )
        with open(os.path.join(out_root, "summary.csv"), "w", encoding="utf-8") as fh:
            fh.write(SWEEP_HEADER + "\n")
            for row in rows:
                fh.write(row + "\n")
    print(f"wrote {len(rows)}/{len(values)} sweep rows to {out_root}/summary.csv")
    return 1 if failed else 0


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="dpzv",
        description="Deterministic simulator for scalar-feedback private VFL",
        allow_abbrev=False,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute one experiment from a config file")
    p_run.add_argument("config")
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--out", default=None)
    p_run.set_defaults(fn=cmd_run)

    p_budget = sub.add_parser("budget", help="privacy accountant queries")
    p_budget.add_argument("--epsilon", type=float, default=None)
    p_budget.add_argument("--delta", type=float, default=None)
    p_budget.add_argument("--mu", type=float, default=None)
    p_budget.add_argument("--T", type=int, default=None)
    p_budget.add_argument("--D", type=int, default=None)
    p_budget.add_argument("--C", type=float, default=None)
    p_budget.set_defaults(fn=cmd_budget)

    p_sweep = sub.add_parser("sweep", help="run one experiment per axis value")
    p_sweep.add_argument("config")
    p_sweep.add_argument("--axis", required=True, choices=sorted(_SWEEP_SETTERS))
    p_sweep.add_argument("--values", required=True)
    p_sweep.add_argument("--seed", type=int, default=None)
    p_sweep.add_argument("--out", default=None)
    p_sweep.set_defaults(fn=cmd_sweep)

    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
