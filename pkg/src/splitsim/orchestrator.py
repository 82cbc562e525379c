"""Outer training loop: participation sampling, strategy dispatch,
evaluation cadence, seeding discipline, and run state.

A run is fully determined by its RunConfig (including the seed bundle): the
metrics CSV it produces is byte-identical across repetitions. Real wall-clock
timings therefore go to the event log and cost report, while the metrics
rows carry wall_ms = 0 unless timing is explicitly requested.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import nn
from .data import ClientDataset, client_batch_stream, sample_participants
from .metrics import GradNormStats, accuracy, confusion_matrix, macro_f1, mcc
from .seeding import SHUFFLE_SERVER, STREAM_INIT, SeedBundle, substream
from .split import ClientModel, ServerModel, SplitSpec, composed_forward, split_params
from .strategies import (
    STRATEGIES,
    CostReport,
    CycleConfig,
    RoundReport,
    TrainState,
    cost_counters,
    run_round,
)

METRICS_COLUMNS = ("seed", "round", "strategy", "split", "loss", "accuracy",
                   "macro_f1", "mcc", "grad_norm_mean", "grad_norm_std", "wall_ms")


class DivergenceError(RuntimeError):
    """Non-finite loss or gradient; carries the round and the run state so
    the caller can persist the last good checkpoint."""

    def __init__(self, message: str, round_index: int, state=None):
        super().__init__(message)
        self.round_index = round_index
        self.state = state


@dataclass(frozen=True)
class RunConfig:
    n_clients: int
    rounds: int
    strategy: str
    layers: tuple[nn.LayerSpec, ...]
    cut_index: int
    loss_kind: str = nn.CROSS_ENTROPY
    optimizer: str = nn.ADAM
    lr_client: float = 3e-4
    lr_server: float = 3e-4
    batch_size: int = 32
    attendance: float = 1.0
    eval_every: int = 10
    cycle: CycleConfig = field(default_factory=CycleConfig)
    seed: int = 0
    seeds: Optional[SeedBundle] = None
    audit: bool = False
    record_timing: bool = False

    def __post_init__(self):
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.lr_client <= 0 or self.lr_server <= 0:
            raise ValueError("learning rates must be positive")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if not 0.0 < self.attendance <= 1.0:
            raise ValueError("attendance must be in (0, 1]")
        if self.seeds is None:
            object.__setattr__(self, "seeds", SeedBundle.from_master(self.seed))

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, seed=seed, seeds=SeedBundle.from_master(seed))


@dataclass
class MetricsRecord:
    seed: int
    round: int
    strategy: str
    split: str
    loss: float
    accuracy: float
    macro_f1: float
    mcc: float
    grad_norm_mean: float
    grad_norm_std: float
    wall_ms: float

    def row(self) -> list:
        return [getattr(self, col) for col in METRICS_COLUMNS]


@dataclass
class RunState:
    config: RunConfig
    spec: SplitSpec
    train: TrainState
    data: dict                      # client id -> ClientDataset
    plan_ids: tuple                 # sorted client ids, index space of the plan
    streams: dict                   # client id -> BatchStream
    round_index: int = 0
    history: list = field(default_factory=list)       # MetricsRecord
    events: list = field(default_factory=list)        # dicts for events.jsonl
    reports: list = field(default_factory=list)       # RoundReport (audit runs only)
    grad_stats: GradNormStats = field(default_factory=GradNormStats)
    last_good: Optional[dict] = None                  # params snapshot for recovery


def build_state(config: RunConfig, clients_data: Sequence[ClientDataset]) -> RunState:
    spec = SplitSpec(tuple(config.layers), config.cut_index)
    full = nn.init_params(spec.layers, substream(config.seeds.init, STREAM_INIT))
    client_half, server_half = split_params(full, spec)
    data = {c.client_id: c for c in clients_data}
    clients = {cid: ClientModel(cid, client_half.copy()) for cid in sorted(data)}
    train = TrainState(
        spec=spec,
        clients=clients,
        server=ServerModel(server_half),
        loss_kind=config.loss_kind,
        optimizer=config.optimizer,
        lr_client=config.lr_client,
        lr_server=config.lr_server,
        cycle=config.cycle,
        server_shuffle_rng=substream(config.seeds.shuffle, SHUFFLE_SERVER),
        audit=config.audit,
    )
    streams = {cid: client_batch_stream(data[cid], config.batch_size, config.seeds.shuffle)
               for cid in sorted(data)}
    return RunState(config, spec, train, data, tuple(sorted(data)), streams)


def _snapshot(state: RunState) -> dict:
    return {
        "round": state.round_index,
        "server": state.train.server.params.copy(),
        "clients": {cid: m.params.copy() for cid, m in state.train.clients.items()},
    }


def _emit_round_events(state: RunState, report: RoundReport) -> None:
    r = report.round_index + 1
    for phase, start, end in report.phase_spans:
        state.events.append({"round": r, "phase": phase, "client_id": None,
                             "loss": None, "grad_norm": None,
                             "t_start_s": start, "wall_ms": (end - start) * 1000.0})
    for loss in report.server_losses:
        state.events.append({"round": r, "phase": "server-step", "client_id": None,
                             "loss": loss, "grad_norm": None,
                             "t_start_s": None, "wall_ms": None})
    for cid in report.participants:
        state.events.append({"round": r, "phase": "client", "client_id": cid,
                             "loss": report.client_losses.get(cid),
                             "grad_norm": report.grad_norms.get(cid),
                             "t_start_s": None, "wall_ms": None})


def run(config: RunConfig,
        clients_data: Sequence[ClientDataset]) -> tuple[RunState, list[MetricsRecord]]:
    """Execute T rounds; returns the final state and the metrics history."""
    state = build_state(config, clients_data)
    n = len(state.plan_ids)
    plan = sample_participants(n, config.attendance, config.rounds,
                               config.seeds.participation)
    t_run0 = time.perf_counter()
    state.last_good = _snapshot(state)
    for t in range(config.rounds):
        state.round_index = t
        participants = tuple(state.plan_ids[j] for j in plan.rounds[t])
        batches = {pid: state.streams[pid].next_batch() for pid in participants}
        try:
            report = run_round(config.strategy, state.train, participants, batches, t)
        except nn.NumericError as exc:
            raise DivergenceError(f"round {t + 1}: {exc}", t + 1, state) from exc
        bad = [cid for cid, loss in report.client_losses.items()
               if not math.isfinite(loss)]
        if bad:
            raise DivergenceError(
                f"round {t + 1}: non-finite loss on clients {bad}", t + 1, state)
        for cid in report.participants:
            if cid in report.grad_norms:
                state.grad_stats.record(report.grad_norms[cid])
        _emit_round_events(state, report)
        if config.audit:
            state.reports.append(report)
        if (t + 1) % config.eval_every == 0 or t == config.rounds - 1:
            wall = (time.perf_counter() - t_run0) * 1000.0 if config.record_timing else 0.0
            state.history.append(evaluate(state, "train", round_number=t + 1, wall_ms=wall))
            state.history.append(evaluate(state, "test", round_number=t + 1, wall_ms=wall))
            state.last_good = _snapshot(state)
    return state, state.history


def evaluate(state: RunState, split: str, round_number: Optional[int] = None,
             wall_ms: float = 0.0) -> MetricsRecord:
    """Sample-weighted evaluation: each client's own lower half composed with
    the global server model. Pure: mutates nothing, consumes no randomness."""
    if split not in ("train", "test"):
        raise ValueError(f"split must be train|test, got {split!r}")
    config = state.config
    classify = config.loss_kind == nn.CROSS_ENTROPY
    cm = None
    if classify:
        n_classes = next(s.out_dim for s in reversed(state.spec.layers)
                         if s.kind == nn.DENSE)
        cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    loss_sum = 0.0
    total = 0
    for cid in state.plan_ids:
        data = state.data[cid]
        x = data.train_x if split == "train" else data.test_x
        y = data.train_y if split == "train" else data.test_y
        if x.shape[0] == 0:
            continue
        out = composed_forward(state.train.clients[cid].params,
                               state.train.server.params, x)
        loss, _ = nn.loss_and_grad(config.loss_kind, out, y)
        loss_sum += loss * x.shape[0]
        total += x.shape[0]
        if classify:
            cm += confusion_matrix(y, np.argmax(out, axis=1), cm.shape[0])
    if total == 0:
        raise ValueError(f"no samples in split {split!r}")
    record = MetricsRecord(
        seed=config.seed,
        round=round_number if round_number is not None else state.round_index + 1,
        strategy=config.strategy,
        split=split,
        loss=loss_sum / total,
        accuracy=accuracy(cm) if classify else float("nan"),
        macro_f1=macro_f1(cm) if classify else float("nan"),
        mcc=mcc(cm) if classify else float("nan"),
        grad_norm_mean=state.grad_stats.mean if state.grad_stats.count else float("nan"),
        grad_norm_std=state.grad_stats.std,
        wall_ms=wall_ms,
    )
    return record


def convergence_round(history: Sequence[MetricsRecord], metric: str,
                      threshold: float, split: str = "test") -> Optional[int]:
    """First 1-based round whose metric reaches the threshold; None if never."""
    if not history:
        raise ValueError("empty history")
    for record in history:
        if record.split != split:
            continue
        if getattr(record, metric) >= threshold:
            return record.round
    return None


def run_cost_report(state: RunState) -> CostReport:
    return cost_counters(state.train)


# ---------------------------------------------------------------------------
# Serialization: metrics CSV (the determinism contract) and events JSONL
# ---------------------------------------------------------------------------

def _fmt(value) -> str:
    if isinstance(value, float):
        return f"{value:.17g}"
    return str(value)


def write_metrics_csv(path, records: Sequence[MetricsRecord]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(METRICS_COLUMNS)
        for record in records:
            writer.writerow([_fmt(v) for v in record.row()])


def read_metrics_csv(path) -> list[MetricsRecord]:
    records = []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            records.append(MetricsRecord(
                seed=int(row["seed"]), round=int(row["round"]),
                strategy=row["strategy"], split=row["split"],
                loss=float(row["loss"]), accuracy=float(row["accuracy"]),
                macro_f1=float(row["macro_f1"]), mcc=float(row["mcc"]),
                grad_norm_mean=float(row["grad_norm_mean"]),
                grad_norm_std=float(row["grad_norm_std"]),
                wall_ms=float(row["wall_ms"])))
    return records


def write_events_jsonl(path, events: Sequence[dict]) -> None:
    with open(path, "w") as f:
        for event in events:
            f.write(json.dumps(event) + "\n")
