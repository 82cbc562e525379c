"""Experiment harness: benchmark grids, ablations, and the self-verification
suites behind `splitsim verify`. Grid cells are independent runs and may be
farmed out to worker processes (capped by SPLITSIM_THREADS)."""

from __future__ import annotations

import csv
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import nn, oracle
from .config import BenchGrid, DataConfig, FullConfig
from .data import partition
from .orchestrator import (
    RunConfig,
    convergence_round,
    run,
    write_events_jsonl,
    write_metrics_csv,
)
from .seeding import STREAM_INIT, substream
from .split import (
    ServerModel,
    SplitSpec,
    client_forward,
    merge_params,
    server_grad_for_client,
    split_params,
)
from .strategies import (
    CYCLE_PSL,
    SAMPLED_STEPS,
    SFLV2,
    CycleConfig,
    is_cycle,
)

GRAD_TAIL_ROUNDS = 100  # window for the gradient-stability comparison


def worker_cap(requested: Optional[int] = None) -> int:
    """Cell parallelism: an explicit request, defaulting to SPLITSIM_THREADS
    (or 1); the env var also acts as a hard cap on requests."""
    env = os.environ.get("SPLITSIM_THREADS")
    cap = max(1, int(env)) if env else None
    threads = requested if requested is not None else (cap or 1)
    if cap is not None:
        threads = min(threads, cap)
    return max(1, threads)


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    arr = np.asarray(list(values), dtype=np.float64)
    if arr.size < 2:
        return float(arr.mean()) if arr.size else float("nan"), float("nan")
    return float(arr.mean()), float(arr.std(ddof=1))


# ---------------------------------------------------------------------------
# Benchmark grid
# ---------------------------------------------------------------------------

@dataclass
class CellResult:
    strategy: str
    alpha: Optional[float]
    seed: int
    records: list                 # MetricsRecord history
    events: list
    convergence: Optional[int]
    grad_tail_mean: float         # mean client grad norm over the final window
    final: dict                   # last-round test metrics


@dataclass
class BenchResult:
    cells: list
    results_rows: list
    convergence_rows: list


def _grad_tail_mean(events: list, rounds: int, window: int = GRAD_TAIL_ROUNDS) -> float:
    cutoff = rounds - window
    norms = [e["grad_norm"] for e in events
             if e["phase"] == "client" and e["round"] > cutoff
             and e["grad_norm"] is not None]
    return float(np.mean(norms)) if norms else float("nan")


def run_cell(data_cfg: DataConfig, base: RunConfig, strategy: str,
             alpha: Optional[float], seed: int,
             accuracy_threshold: float) -> CellResult:
    cfg = replace(base, strategy=strategy).with_seed(seed)
    data_cfg = replace(data_cfg)
    if alpha is not None:
        data_cfg.partition = "dirichlet"
        data_cfg.alpha = alpha
    dataset = data_cfg.build_dataset(cfg.seeds.data)
    clients = partition(dataset, data_cfg.partition_spec(cfg.n_clients, cfg.seeds.data),
                        cfg.batch_size)
    state, records = run(cfg, clients)
    conv = convergence_round(records, "accuracy", accuracy_threshold)
    last = [r for r in records if r.split == "test"][-1]
    return CellResult(
        strategy=strategy, alpha=alpha, seed=seed,
        records=records, events=state.events, convergence=conv,
        grad_tail_mean=_grad_tail_mean(state.events, cfg.rounds),
        final={"loss": last.loss, "accuracy": last.accuracy,
               "macro_f1": last.macro_f1, "mcc": last.mcc})


def _run_cell_args(args):
    """Worker wrapper: never raises, so one bad cell cannot kill the grid."""
    try:
        return run_cell(*args)
    except Exception as exc:
        return (args[2], args[3], args[4], f"{type(exc).__name__}: {exc}")


def bench(full: FullConfig, out_dir, threads: Optional[int] = None,
          plots: bool = True) -> BenchResult:
    """Run the strategy x alpha x seed grid and aggregate mean +- sample std.

    A failing cell is recorded (metrics NaN, convergence unknown) and the
    grid keeps going.
    """
    grid = full.bench or BenchGrid()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(full.data, full.run, strategy, alpha, seed, grid.accuracy_threshold)
            for strategy in grid.strategies
            for alpha in grid.alphas
            for seed in grid.seeds]
    threads = worker_cap(threads)
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            outcomes = list(pool.map(_run_cell_args, jobs))
    else:
        outcomes = [_run_cell_args(job) for job in jobs]
    cells: list = []
    failures = []
    for outcome in outcomes:
        if isinstance(outcome, CellResult):
            cells.append(outcome)
        else:  # (strategy, alpha, seed, error): keep the grid going
            strategy, alpha, seed, error = outcome
            failures.append(outcome)
            cells.append(CellResult(strategy, alpha, seed, [], [], None,
                                    float("nan"),
                                    {"loss": float("nan"), "accuracy": float("nan"),
                                     "macro_f1": float("nan"), "mcc": float("nan")}))

    results_rows = []
    convergence_rows = []
    for strategy in grid.strategies:
        for alpha in grid.alphas:
            group = [c for c in cells if c.strategy == strategy and c.alpha == alpha]
            row = {"strategy": strategy, "alpha": "" if alpha is None else alpha,
                   "seeds": len(group)}
            for key in ("loss", "accuracy", "macro_f1", "mcc"):
                mean, std = mean_std([c.final[key] for c in group])
                row[f"{key}_mean"] = mean
                row[f"{key}_std"] = std
            mean, std = mean_std([c.grad_tail_mean for c in group])
            row["grad_norm_tail_mean"] = mean
            row["grad_norm_tail_std"] = std
            results_rows.append(row)
            reached = [c.convergence for c in group if c.convergence is not None]
            conv_row = {"strategy": strategy, "alpha": "" if alpha is None else alpha,
                        "threshold": grid.accuracy_threshold,
                        "seeds_reached": len(reached), "seeds": len(group)}
            if len(reached) == len(group) and group:
                mean, std = mean_std([float(v) for v in reached])
                conv_row["rounds"] = f"{mean:.17g}"
                conv_row["rounds_std"] = "" if math.isnan(std) else f"{std:.17g}"
            else:
                conv_row["rounds"] = f"> {full.run.rounds}"
                conv_row["rounds_std"] = ""
            convergence_rows.append(conv_row)

    _write_dict_csv(out / "results.csv", results_rows)
    _write_dict_csv(out / "convergence.csv", convergence_rows)
    all_records = [r for c in cells for r in c.records]
    write_metrics_csv(out / "metrics_all.csv", all_records)
    cell_dir = out / "cells"
    cell_dir.mkdir(exist_ok=True)
    for c in cells:
        stem = f"{c.strategy}_a{c.alpha if c.alpha is not None else 'cfg'}_s{c.seed}"
        if c.records:
            write_metrics_csv(cell_dir / f"{stem}.csv", c.records)
        if c.events:
            write_events_jsonl(cell_dir / f"{stem}.events.jsonl", c.events)
    if plots:
        from . import plots as figs
        figs.save_bench_curves(all_records, out / "bench_curves.png")
        figs.save_bench_final(results_rows, out / "bench_final.png")
        figs.save_grad_norms(
            {f"{row['strategy']}" + (f"@a{row['alpha']}" if row["alpha"] != "" else ""):
             row["grad_norm_tail_mean"] for row in results_rows},
            out / "bench_grad_norms.png")
    if failures:
        _write_dict_csv(out / "failures.csv",
                        [{"strategy": s, "alpha": a, "seed": sd, "error": e}
                         for s, a, sd, e in failures])
    return BenchResult(cells, results_rows, convergence_rows)


def _fmt_cell(value) -> str:
    if isinstance(value, float):
        return f"{value:.17g}"
    return str(value)


def _write_dict_csv(path, rows: list) -> None:
    if not rows:
        Path(path).write_text("")
        return
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0].keys()), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt_cell(v) for k, v in row.items()})


# ---------------------------------------------------------------------------
# Ablations (cut layer / server epochs)
# ---------------------------------------------------------------------------

def ablate(full: FullConfig, axis: str, values: Sequence[int], seeds: Sequence[int],
           out_dir, plots: bool = True) -> list[dict]:
    if axis not in ("cut", "epochs"):
        raise ValueError(f"ablation axis must be cut|epochs, got {axis!r}")
    if axis == "epochs" and not is_cycle(full.run.strategy):
        raise ValueError("the epochs axis needs a cycle strategy "
                         f"(configured: {full.run.strategy})")
    deduped = list(dict.fromkeys(values))
    if len(deduped) != len(values):
        logging.getLogger(__name__).warning(
            "duplicate ablation values removed: %s", values)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for value in deduped:
        if axis == "cut":
            if not 1 <= value <= len(full.run.layers) - 1:
                raise ValueError(
                    f"cut index {value} out of range [1, {len(full.run.layers) - 1}]")
            base = replace(full.run, cut_index=value)
        else:
            base = replace(full.run, cycle=replace(full.run.cycle, server_epochs=value))
        finals = []
        for seed in seeds:
            cfg = base.with_seed(seed)
            dataset = full.data.build_dataset(cfg.seeds.data)
            clients = partition(dataset,
                                full.data.partition_spec(cfg.n_clients, cfg.seeds.data),
                                cfg.batch_size)
            _, records = run(cfg, clients)
            finals.append([r for r in records if r.split == "test"][-1].accuracy)
        mean, std = mean_std(finals)
        rows.append({"axis": axis, "value": value,
                     "accuracy_mean": mean, "accuracy_std": std,
                     "seeds": len(list(seeds))})
    _write_dict_csv(out / f"ablation_{axis}.csv", rows)
    if plots:
        from . import plots as figs
        figs.save_ablation(rows, out / f"ablation_{axis}.png",
                           "cut index" if axis == "cut" else "server epochs")
    return rows


# ---------------------------------------------------------------------------
# Verification suites (`splitsim verify`)
# ---------------------------------------------------------------------------

def _relu_kink_distance(specs, params, x) -> float:
    """Smallest |pre-activation| any relu sees; finite differences straddle
    the kink when this is comparable to the probe step."""
    closest = np.inf
    h = x
    for i, spec in enumerate(specs):
        if spec.kind == nn.DENSE:
            h = h @ params.layers[i].weight + params.layers[i].bias
        elif spec.kind == nn.RELU:
            closest = min(closest, float(np.min(np.abs(h))))
            h = np.maximum(h, 0.0)
        elif spec.kind == nn.TANH:
            h = np.tanh(h)
    return closest


def _random_net(rng: np.random.Generator):
    """Small random net + batch for gradient checking (dims <= 8, batch <= 4).

    Parameters get generic random values (biases included) and instances
    whose relu inputs sit near the kink are redrawn: the gradient there is
    one-sided and central differences cannot measure it.
    """
    while True:
        depth = int(rng.integers(1, 4))
        dims = [int(rng.integers(2, 9)) for _ in range(depth + 1)]
        classify = bool(rng.integers(0, 2))
        specs: list[nn.LayerSpec] = []
        for i in range(depth):
            specs.append(nn.dense(dims[i], dims[i + 1]))
            if i < depth - 1:
                specs.append(nn.relu() if rng.integers(0, 2) else nn.tanh())
        if classify:
            specs.append(nn.softmax_output())
            loss_kind = nn.CROSS_ENTROPY
        else:
            loss_kind = nn.MSE
        specs = tuple(specs)
        batch = int(rng.integers(1, 5))
        x = rng.normal(size=(batch, dims[0]))
        if classify:
            labels = rng.integers(0, dims[-1], size=batch)
        else:
            labels = rng.normal(size=(batch, dims[-1]))
        params = nn.init_params(specs, rng)
        for p in params.layers:
            if p is not None:
                p.bias[...] = rng.normal(scale=0.5, size=p.bias.shape)
        if _relu_kink_distance(specs, params, x) > 1e-4:
            return specs, params, x, labels, loss_kind


def max_grad_rel_err(specs, params, x, labels, loss_kind, h: float = 1e-6) -> float:
    """Analytic vs central-difference gradient, guarded relative error.

    err = |a - n| / max(|a|, |n|, 1e-2): tiny coordinates are held to an
    absolute 1e-8, everything else to a true relative 1e-6 at the stated
    tolerance.
    """
    out, tape = nn.forward(params, specs, x)
    _, d_out = nn.loss_and_grad(loss_kind, out, labels)
    grads, _ = nn.backward(tape, d_out)
    analytic = oracle.flatten_params(
        nn.ParamBlock(tuple(specs),
                      [None if g is None else nn.DenseParams(g[0].copy(), g[1].copy())
                       for g in grads.layers]))

    def loss_at(theta):
        block = oracle.unflatten_params(theta, params)
        o, _ = nn.forward(block, specs, x)
        return nn.loss_and_grad(loss_kind, o, labels)[0]

    numeric = oracle.finite_diff_grad(loss_at, oracle.flatten_params(params), h)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-2)
    return float(np.max(np.abs(analytic - numeric) / denom))


def _suite_gradient_exactness() -> tuple[bool, str]:
    rng = np.random.default_rng(12345)
    worst = 0.0
    for _ in range(100):
        specs, params, x, labels, loss_kind = _random_net(rng)
        worst = max(worst, max_grad_rel_err(specs, params, x, labels, loss_kind))
    return worst < 1e-6, f"max rel err {worst:.3e} over 100 random nets"


def _four_block_mlp() -> tuple:
    return nn.mlp_specs(6, [8, 8, 8], 4)


def _split_vs_centralized_step(layers, cut, seed=0):
    """One end-to-end training step, split at `cut` vs unsplit; byte equality."""
    spec = SplitSpec(layers, cut)
    rng = substream(seed, STREAM_INIT)
    full = nn.init_params(layers, rng)
    data_rng = np.random.default_rng(seed + 99)
    x = data_rng.normal(size=(8, layers[0].in_dim))
    y = data_rng.integers(0, 4, size=8)

    central = full.copy()
    out, tape = nn.forward(central, layers, x)
    _, d_out = nn.loss_and_grad(nn.CROSS_ENTROPY, out, y)
    grads, _ = nn.backward(tape, d_out)
    nn.apply_update(central, grads, nn.ADAM, 1e-3)

    from .split import ClientModel, client_backward_update, server_forward_backward
    client_params, server_params = split_params(full, spec)
    client = ClientModel(0, client_params)
    server = ServerModel(server_params)
    smashed = client_forward(client, x, y)
    _, server_grads, cut_grad = server_forward_backward(server, smashed, nn.CROSS_ENTROPY)
    nn.apply_update(server.params, server_grads, nn.ADAM, 1e-3)
    client_backward_update(client, cut_grad, nn.ADAM, 1e-3)
    merged = merge_params(client.params, server.params, spec)
    return central.param_bytes() == merged.param_bytes()


def _suite_compositionality() -> tuple[bool, str]:
    layers = _four_block_mlp()
    bad = [cut for cut in range(1, len(layers))
           if not _split_vs_centralized_step(layers, cut)]
    if bad:
        return False, f"split != centralized at cut indices {bad}"
    return True, f"byte-equal updates at every cut index 1..{len(layers) - 1}"


def _seq_vs_centralized(rounds: int = 200) -> tuple[bool, str]:
    from .config import DataConfig
    from .orchestrator import RunConfig, run as run_loop
    layers = _four_block_mlp()
    data_cfg = DataConfig(n=400, classes=4, dim=6, partition="iid")
    cfg = RunConfig(n_clients=1, rounds=rounds, strategy="seq-sl", layers=layers,
                    cut_index=2, attendance=1.0, batch_size=16, eval_every=rounds,
                    lr_client=1e-3, lr_server=1e-3, seed=0)
    dataset = data_cfg.build_dataset(cfg.seeds.data)
    clients = partition(dataset, data_cfg.partition_spec(1, cfg.seeds.data),
                        cfg.batch_size)
    state, _ = run_loop(cfg, clients)
    reference = oracle.centralized_train(
        layers, clients[0].train_x, clients[0].train_y, rounds, nn.ADAM, 1e-3,
        nn.CROSS_ENTROPY, cfg.batch_size, cfg.seeds.init, cfg.seeds.shuffle,
        client_id=clients[0].client_id)
    merged = merge_params(state.train.clients[clients[0].client_id].params,
                          state.train.server.params, state.spec)
    diff = float(np.max(np.abs(oracle.flatten_params(merged)
                               - oracle.flatten_params(reference))))
    return diff == 0.0, f"max abs param diff {diff:g} after {rounds} steps"


def _suite_cyclical_semantics() -> tuple[bool, str]:
    from .orchestrator import RunConfig, run as run_loop
    from .config import DataConfig
    layers = _four_block_mlp()
    data_cfg = DataConfig(n=400, classes=4, dim=6, partition="iid")
    results = {}
    for strategy in (CYCLE_PSL, SFLV2):
        cfg = RunConfig(n_clients=1, rounds=1, strategy=strategy, layers=layers,
                        cut_index=2, attendance=1.0, batch_size=16, eval_every=1,
                        lr_client=1e-3, lr_server=1e-3, seed=0, audit=True,
                        cycle=CycleConfig(server_epochs=1, server_batch_size=16,
                                          pass_mode=SAMPLED_STEPS))
        dataset = data_cfg.build_dataset(cfg.seeds.data)
        clients = partition(dataset, data_cfg.partition_spec(1, cfg.seeds.data),
                            cfg.batch_size)
        state, _ = run_loop(cfg, clients)
        results[strategy] = state
    cycle_state, v2_state = results[CYCLE_PSL], results[SFLV2]
    server_equal = (cycle_state.train.server.params.param_bytes()
                    == v2_state.train.server.params.param_bytes())
    cid = cycle_state.plan_ids[0]
    client_differs = (cycle_state.train.clients[cid].params.param_bytes()
                      != v2_state.train.clients[cid].params.param_bytes())
    audit = cycle_state.reports[0].audit
    pre, post = audit["server_params_pre_train"], audit["server_params_post_train"]
    snap = audit["service_snapshots"][0]
    from .split import SmashedBatch
    sb = SmashedBatch(snap["client_id"], snap["features"], snap["labels"], 0)
    grad_post = server_grad_for_client(ServerModel(post.copy(), frozen=True), sb,
                                       nn.CROSS_ENTROPY).d_features
    grad_pre = server_grad_for_client(ServerModel(pre.copy(), frozen=True), sb,
                                      nn.CROSS_ENTROPY).d_features
    uses_updated = np.array_equal(grad_post, snap["cut_grad"])
    server_moved = pre.param_bytes() != post.param_bytes()
    differs_from_old = not np.array_equal(grad_pre, snap["cut_grad"])
    ok = server_equal and client_differs and uses_updated and server_moved and differs_from_old
    return ok, ("server steps identical, client steps differ, gradients taken "
                "under the post-update server" if ok else
                f"server_equal={server_equal} client_differs={client_differs} "
                f"uses_updated={uses_updated} server_moved={server_moved}")


def _suite_toy() -> tuple[bool, str]:
    grid = oracle.toy_grid(200)
    report = oracle.toy_sweep(grid)
    seed_inst = oracle.ToyInstance(1.0, 2.0, 1.0, 1.0, 0.1)
    e2e, cyc, w_s_after = oracle.toy_steps(seed_inst)
    seed_ok = (e2e == 0.4 and w_s_after == 1.8
               and math.isclose(cyc, 0.288, rel_tol=1e-12))
    ok = report.n_valid >= 10_000 and report.n_violations == 0 and seed_ok
    return ok, (f"{report.n_valid} valid grid points, {report.n_violations} "
                f"violations; seed instance steps ({e2e:g}, {cyc:g})")


def _suite_freeze_invariance() -> tuple[bool, str]:
    layers = _four_block_mlp()
    spec = SplitSpec(layers, 2)
    full = nn.init_params(layers, substream(7, STREAM_INIT))
    client_params, server_params = split_params(full, spec)
    from .split import ClientModel
    client = ClientModel(0, client_params)
    rng = np.random.default_rng(7)
    x = rng.normal(size=(4, layers[0].in_dim))
    y = rng.integers(0, 4, size=4)
    smashed = client_forward(client, x, y)
    server = ServerModel(server_params, frozen=True)
    before = server.params.param_bytes()
    state_before = (server.params.layers[0].m_w.tobytes(), server.params.step)
    server_grad_for_client(server, smashed, nn.CROSS_ENTROPY)
    after = server.params.param_bytes()
    state_after = (server.params.layers[0].m_w.tobytes(), server.params.step)
    return (before == after and state_before == state_after,
            "server bytes and optimizer state unchanged across gradient service")


def _suite_store_integrity() -> tuple[bool, str]:
    from .config import DataConfig
    from .orchestrator import RunConfig, run as run_loop
    layers = nn.mlp_specs(8, [8], 4)
    cfg = RunConfig(n_clients=5, rounds=20, strategy="cycle-sfl", layers=layers,
                    cut_index=2, attendance=0.6, batch_size=8, eval_every=20,
                    seed=1, audit=True,
                    cycle=CycleConfig(server_epochs=2, server_batch_size=8))
    data_cfg = DataConfig(n=600, classes=4, dim=8, partition="dirichlet", alpha=0.5)
    dataset = data_cfg.build_dataset(cfg.seeds.data)
    clients = partition(dataset, data_cfg.partition_spec(5, cfg.seeds.data),
                        cfg.batch_size)
    state, _ = run_loop(cfg, clients)
    for report in state.reports:
        audit = report.audit
        if audit["received_row_digests"] != audit["store_row_digests"]:
            return False, f"round {report.round_index + 1}: store != received batches"
        store_n = len(audit["store_row_digests"])
        per_pass = np.zeros(store_n, dtype=int)
        seen = 0
        for idx in audit["epoch_pass_indices"]:
            per_pass[idx] += 1
            seen += idx.size
            if seen == store_n:
                if not np.all(per_pass == 1):
                    return False, f"round {report.round_index + 1}: uneven epoch pass"
                per_pass[:] = 0
                seen = 0
        if seen != 0:
            return False, f"round {report.round_index + 1}: partial epoch pass"
    return True, f"{len(state.reports)} rounds: store multiset and epoch passes exact"


VERIFY_SUITES = (
    ("gradient-exactness", _suite_gradient_exactness),
    ("compositionality", _suite_compositionality),
    ("centralized-equivalence", _seq_vs_centralized),
    ("cyclical-update-semantics", _suite_cyclical_semantics),
    ("toy-oracle", _suite_toy),
    ("freeze-invariance", _suite_freeze_invariance),
    ("feature-store-integrity", _suite_store_integrity),
)


def verify() -> dict:
    """Run every oracle suite; report is machine-readable."""
    suites = []
    first_failure = None
    for name, fn in VERIFY_SUITES:
        try:
            passed, detail = fn()
        except Exception as exc:
            passed, detail = False, f"crashed: {exc!r}"
        suites.append({"name": name, "passed": bool(passed), "detail": detail})
        if not passed and first_failure is None:
            first_failure = name
    return {"passed": first_failure is None,
            "first_failure": first_failure,
            "suites": suites}
