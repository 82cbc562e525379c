"""Command-line harness: run | bench | verify | ablate | toy.

Exit codes: 0 success, 1 verification failure, 2 usage/config error,
3 numeric divergence. All randomness flows from the seeds in the config or
flags; nothing reads the wall clock for decisions.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from . import harness, oracle
from .config import ConfigError, load_config
from .data import PartitionError, write_partition_manifest
from .nn import save_params
from .orchestrator import DivergenceError, run, run_cost_report, write_events_jsonl, write_metrics_csv

EXIT_OK = 0
EXIT_VERIFY_FAILED = 1
EXIT_USAGE = 2
EXIT_DIVERGED = 3


def _add_plots_flag(parser: argparse.ArgumentParser, default: bool) -> None:
    group = parser.add_mutually_exclusive_group()
    group.add_argument("--plots", dest="plots", action="store_true", default=default,
                       help="render PNG figures next to the CSV output")
    group.add_argument("--no-plots", dest="plots", action="store_false")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="splitsim",
        description="Deterministic split-learning laboratory: cyclical "
                    "server-client updates with feature resampling, plus the "
                    "classic parallel SL baselines.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute one training run from a config file")
    p_run.add_argument("--config", required=True, help="key=value config file")
    p_run.add_argument("--seed", type=int, default=None, help="override [run] seed")
    p_run.add_argument("--out", default="out", help="output directory")
    p_run.add_argument("--timing", action="store_true",
                       help="record real wall times in metrics.csv (breaks "
                            "byte-for-byte reproducibility of that file)")
    _add_plots_flag(p_run, default=False)

    p_bench = sub.add_parser("bench", help="run a strategy x alpha x seed grid")
    p_bench.add_argument("--manifest", required=True,
                         help="config file with a [bench] section")
    p_bench.add_argument("--out", default="bench_out")
    p_bench.add_argument("--threads", type=int, default=None,
                         help="cell parallelism (SPLITSIM_THREADS caps this)")
    _add_plots_flag(p_bench, default=True)

    p_verify = sub.add_parser("verify", help="run the oracle suites")
    p_verify.add_argument("--json", default=None,
                          help="write the machine-readable report here")

    p_ablate = sub.add_parser("ablate", help="sweep the cut layer or server epochs")
    p_ablate.add_argument("--config", required=True)
    p_ablate.add_argument("--axis", required=True, choices=("cut", "epochs"))
    p_ablate.add_argument("--values", required=True,
                          help="comma-separated integer grid, e.g. 1,2,4,8")
    p_ablate.add_argument("--seeds", default="0,1,2,3,4")
    p_ablate.add_argument("--out", default="ablate_out")
    _add_plots_flag(p_ablate, default=True)

    p_toy = sub.add_parser("toy", help="one-neuron toy analysis of the two update rules")
    p_toy.add_argument("--out", default="toy_out")
    p_toy.add_argument("--resolution", type=int, default=200,
                       help="residual grid points per (w_c, x, y, eta) cell")
    _add_plots_flag(p_toy, default=True)
    return parser


def _int_list(raw: str) -> list[int]:
    return [int(v) for v in raw.replace(",", " ").split()]


def cmd_run(args) -> int:
    try:
        full = load_config(args.config, seed_override=args.seed)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    cfg = full.run
    if args.timing:
        cfg = dataclasses.replace(cfg, record_timing=True)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        dataset, clients = full.build_clients()
    except (PartitionError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if dataset.task == "classify":
        write_partition_manifest(out / "partition_manifest.csv", clients,
                                 dataset.n_classes)
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    try:
        state, records = run(cfg, clients)
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        (out / "diagnostic.json").write_text(json.dumps(
            {"error": str(exc), "round": exc.round_index}, indent=2))
        if exc.state is not None and exc.state.last_good is not None:
            good = exc.state.last_good
            save_params(good["server"], ckpt_dir / "server.ckpt",
                        meta={"cut": cfg.cut_index, "role": "server",
                              "round": good["round"]})
            for cid, params in good["clients"].items():
                save_params(params, ckpt_dir / f"client_{cid:04d}.ckpt",
                            meta={"cut": cfg.cut_index, "role": "client",
                                  "client_id": cid, "round": good["round"]})
            write_metrics_csv(out / "metrics.csv", exc.state.history)
        return EXIT_DIVERGED
    write_metrics_csv(out / "metrics.csv", records)
    write_events_jsonl(out / "events.jsonl", state.events)
    report = run_cost_report(state)
    (out / "cost.json").write_text(json.dumps(dataclasses.asdict(report), indent=2))
    resolved = dataclasses.asdict(cfg)
    resolved["layers"] = [[s.kind, s.in_dim, s.out_dim] for s in cfg.layers]
    (out / "run_config.json").write_text(json.dumps(resolved, indent=2))
    save_params(state.train.server.params, ckpt_dir / "server.ckpt",
                meta={"cut": cfg.cut_index, "role": "server"})
    for cid, model in state.train.clients.items():
        save_params(model.params, ckpt_dir / f"client_{cid:04d}.ckpt",
                    meta={"cut": cfg.cut_index, "role": "client", "client_id": cid})
    if args.plots:
        from . import plots as figs
        figs.save_run_curves(records, out / "run_curves.png",
                             metric="accuracy" if dataset.task == "classify" else "loss")
    last_test = [r for r in records if r.split == "test"][-1]
    extra = (f" server_epochs={cfg.cycle.server_epochs} "
             f"pass_mode={cfg.cycle.pass_mode}" if cfg.strategy.startswith("cycle") else "")
    print(f"run complete: strategy={cfg.strategy} optimizer={cfg.optimizer}"
          f"{extra} rounds={cfg.rounds} "
          f"test loss={last_test.loss:.4f} accuracy={last_test.accuracy:.4f}")
    return EXIT_OK


def cmd_bench(args) -> int:
    try:
        full = load_config(args.manifest, allow_bench=True)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    result = harness.bench(full, args.out, threads=args.threads, plots=args.plots)
    print(f"bench complete: {len(result.cells)} cells -> {args.out}/results.csv")
    for row in result.results_rows:
        alpha = f" alpha={row['alpha']}" if row["alpha"] != "" else ""
        print(f"  {row['strategy']:>11}{alpha}: "
              f"acc {row['accuracy_mean']:.4f} +- {row['accuracy_std']:.4f}  "
              f"loss {row['loss_mean']:.4f}")
    return EXIT_OK


def cmd_verify(args) -> int:
    report = harness.verify()
    for suite in report["suites"]:
        status = "PASS" if suite["passed"] else "FAIL"
        print(f"{status}  {suite['name']}: {suite['detail']}")
    if args.json:
        Path(args.json).write_text(json.dumps(report, indent=2))
    if not report["passed"]:
        print(f"verification failed at: {report['first_failure']}", file=sys.stderr)
        return EXIT_VERIFY_FAILED
    print(f"all {len(report['suites'])} suites passed")
    return EXIT_OK


def cmd_ablate(args) -> int:
    try:
        full = load_config(args.config)
        rows = harness.ablate(full, args.axis, _int_list(args.values),
                              _int_list(args.seeds), args.out, plots=args.plots)
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    print(f"ablation over {args.axis}: {len(rows)} rows -> "
          f"{args.out}/ablation_{args.axis}.csv")
    for row in rows:
        print(f"  {args.axis}={row['value']}: accuracy "
              f"{row['accuracy_mean']:.4f} +- {row['accuracy_std']:.4f}")
    return EXIT_OK


def cmd_toy(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    grid = oracle.toy_grid(args.resolution)
    report = oracle.toy_sweep(grid)
    path = out / "toy.csv"
    with open(path, "w") as f:
        f.write("w_c,w_s,x,y,eta,step_e2e,step_cycle,holds\n")
        for r in report.rows:
            f.write(f"{r.w_c:.17g},{r.w_s:.17g},{r.x:.17g},{r.y:.17g},"
                    f"{r.eta:.17g},{r.step_e2e:.17g},{r.step_cycle:.17g},"
                    f"{str(r.holds).lower()}\n")
    if args.plots:
        from . import plots as figs
        figs.save_toy_scatter(report, out / "toy_steps.png")
    print(f"toy sweep: {report.n_valid} valid points, "
          f"{report.n_violations} violations -> {path}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {"run": cmd_run, "bench": cmd_bench, "verify": cmd_verify,
                "ablate": cmd_ablate, "toy": cmd_toy}
    return handlers[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
