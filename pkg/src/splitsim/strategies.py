"""The eight split-learning round algorithms behind one dispatch interface.

Baselines (seq-sl, psl, sflv1, sflv2, sglr) update client and server halves
from the same backward flow, i.e. every cut gradient is taken under the
server parameters the round started with. The cycle variants instead build a
server-side feature store from all participants' smashed data, train the
single server model on resampled batches from it, then freeze the server and
serve each client a cut gradient computed under the freshly updated server.
No server model is ever duplicated or averaged in a cycle round.

All per-round orderings (service, reductions, averaging) run in ascending
client id so results are bit-reproducible.
"""

from __future__ import annotations

import hashlib
import logging
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import nn
from .metrics import batch_mean_grad_norm
from .split import (
    BROADCAST_CLIENT_ID,
    ClientModel,
    CutGradientBatch,
    ServerModel,
    SmashedBatch,
    SplitSpec,
    client_backward_update,
    client_forward,
    discard_pending_tape,
    frozen_service,
    server_apply_update,
    server_forward_backward,
)

log = logging.getLogger(__name__)

SEQ_SL = "seq-sl"
PSL = "psl"
SFLV1 = "sflv1"
SFLV2 = "sflv2"
SGLR = "sglr"
CYCLE_PSL = "cycle-psl"
CYCLE_SFL = "cycle-sfl"
CYCLE_SGLR = "cycle-sglr"

STRATEGIES = (SEQ_SL, PSL, SFLV1, SFLV2, SGLR, CYCLE_PSL, CYCLE_SFL, CYCLE_SGLR)
CYCLE_STRATEGIES = (CYCLE_PSL, CYCLE_SFL, CYCLE_SGLR)
CLIENT_AGGREGATING = (SFLV1, SFLV2, CYCLE_SFL)

EPOCH_PASSES = "epoch-passes"
SAMPLED_STEPS = "sampled-steps"


def is_cycle(strategy: str) -> bool:
    return strategy in CYCLE_STRATEGIES


class StrategyConfigError(ValueError):
    pass


@dataclass(frozen=True)
class CycleConfig:
    """Server-side training schedule for cycle rounds.

    epoch-passes runs E full shuffled passes over the feature store;
    sampled-steps draws E single resampled batches instead.
    """

    server_epochs: int = 1
    server_batch_size: int = 32
    pass_mode: str = EPOCH_PASSES

    def __post_init__(self):
        if self.server_epochs < 1:
            raise StrategyConfigError("server_epochs must be >= 1")
        if self.server_batch_size < 1:
            raise StrategyConfigError("server_batch_size must be >= 1")
        if self.pass_mode not in (EPOCH_PASSES, SAMPLED_STEPS):
            raise StrategyConfigError(f"unknown pass mode {self.pass_mode!r}")


@dataclass
class ServerFeatureStore:
    """Round-local multiset union of the received smashed batches."""

    features: np.ndarray
    labels: np.ndarray
    client_ids: np.ndarray

    @classmethod
    def build(cls, batches: list[SmashedBatch]) -> "ServerFeatureStore":
        features = np.concatenate([b.features for b in batches], axis=0)
        labels = np.concatenate([b.labels for b in batches], axis=0)
        ids = np.concatenate([np.full(b.batch_size, b.client_id) for b in batches])
        return cls(features, labels, ids)

    @property
    def size(self) -> int:
        return self.features.shape[0]


@dataclass
class CostCounters:
    """Server-side cost accounting across a run."""

    server_forward_batches: int = 0
    server_forward_rows: int = 0
    server_backward_batches: int = 0
    server_backward_rows: int = 0
    cut_bytes_up: int = 0
    cut_bytes_down: int = 0
    peak_server_replicas: int = 0
    server_aggregations: int = 0
    client_aggregations: int = 0
    smashed_batches_received: int = 0
    phase_wall_ms: dict = field(default_factory=dict)

    def count_forward(self, rows: int) -> None:
        self.server_forward_batches += 1
        self.server_forward_rows += rows

    def count_backward(self, rows: int) -> None:
        self.server_backward_batches += 1
        self.server_backward_rows += rows

    def note_replicas(self, live: int) -> None:
        self.peak_server_replicas = max(self.peak_server_replicas, live)

    def add_phase_ms(self, phase: str, ms: float) -> None:
        self.phase_wall_ms[phase] = self.phase_wall_ms.get(phase, 0.0) + ms


@dataclass
class CostReport:
    server_forward_batches: int
    server_forward_rows: int
    server_backward_batches: int
    server_backward_rows: int
    cut_bytes_up: int
    cut_bytes_down: int
    peak_server_replicas: int
    server_aggregations: int
    client_aggregations: int
    smashed_batches_received: int
    phase_wall_ms: dict


@dataclass
class TrainState:
    """Everything a strategy round touches; owned by the orchestrator."""

    spec: SplitSpec
    clients: dict[int, ClientModel]
    server: ServerModel
    loss_kind: str
    optimizer: str
    lr_client: float
    lr_server: float
    cycle: CycleConfig
    server_shuffle_rng: np.random.Generator
    counters: CostCounters = field(default_factory=CostCounters)
    audit: bool = False
    relay_source: Optional[int] = None  # seq-sl: client holding the latest weights


@dataclass
class RoundReport:
    round_index: int
    participants: tuple
    client_losses: dict      # client id -> loss of its training pass
    grad_norms: dict         # client id -> norm of the applied cut gradient
    server_losses: list      # per server optimizer step (cycle phase 2)
    phase_ms: dict
    phase_spans: list = field(default_factory=list)  # (phase, t_start, t_end) seconds
    audit: Optional[dict] = None


def _digest(params: nn.ParamBlock) -> str:
    return hashlib.sha1(params.param_bytes()).hexdigest()


def _row_digests(features: np.ndarray, labels: np.ndarray) -> list[bytes]:
    out = []
    labels = np.asarray(labels)
    for i in range(features.shape[0]):
        h = hashlib.sha1(features[i].tobytes())
        h.update(labels[i].tobytes() if labels.ndim else labels.tobytes())
        out.append(h.digest())
    return out


def _collect(state: TrainState, participants, batches) -> list[SmashedBatch]:
    smashed = []
    for pid in participants:
        x, y = batches[pid]
        sb = client_forward(state.clients[pid], x, y)
        state.counters.cut_bytes_up += sb.features.nbytes + np.asarray(sb.labels).nbytes
        state.counters.smashed_batches_received += 1
        smashed.append(sb)
    return smashed


def _fedavg(blocks: list[nn.ParamBlock], weights: list[float]) -> nn.ParamBlock:
    """Sample-count-weighted average of parameter blocks (Adam state included).

    Blocks must arrive in ascending client-id order; the reduction is a plain
    left-to-right weighted sum so that it is bit-reproducible.
    """
    total = float(sum(weights))
    out = blocks[0].copy()
    for layer in out.layers:
        if layer is None:
            continue
        for arr in (layer.weight, layer.bias, layer.m_w, layer.v_w, layer.m_b, layer.v_b):
            arr *= weights[0] / total
    for block, w in zip(blocks[1:], weights[1:]):
        scale = w / total
        for dst, src in zip(out.layers, block.layers):
            if dst is None:
                continue
            dst.weight += scale * src.weight
            dst.bias += scale * src.bias
            dst.m_w += scale * src.m_w
            dst.v_w += scale * src.v_w
            dst.m_b += scale * src.m_b
            dst.v_b += scale * src.v_b
    out.step = max(b.step for b in blocks)
    return out


def _aggregate_clients(state: TrainState, participants, batch_sizes: dict) -> None:
    """FedAvg the participating client models, broadcast to every client."""
    blocks = [state.clients[pid].params for pid in participants]
    weights = [float(batch_sizes[pid]) for pid in participants]
    averaged = _fedavg(blocks, weights)
    state.counters.client_aggregations += 1
    for client in state.clients.values():
        client.params = averaged.copy()


def _end_to_end_pair_step(state: TrainState, server: ServerModel, smashed: SmashedBatch,
                   update_client: bool = True):
    """End-to-end (same backward flow) update of one client/server pair."""
    loss, server_grads, cut_grad = server_forward_backward(server, smashed, state.loss_kind)
    state.counters.count_forward(smashed.batch_size)
    state.counters.count_backward(smashed.batch_size)
    state.counters.cut_bytes_down += cut_grad.d_features.nbytes
    server_apply_update(server, server_grads, state.optimizer, state.lr_server)
    if update_client:
        client_backward_update(state.clients[smashed.client_id], cut_grad,
                               state.optimizer, state.lr_client)
    return loss, cut_grad


# ---------------------------------------------------------------------------
# Baseline rounds (end-to-end semantics: cut gradients under the pre-update server)
# ---------------------------------------------------------------------------

def round_seq_sl(state: TrainState, participants, batches, round_index: int) -> RoundReport:
    """Sequential SL: one client at a time, relaying the client model."""
    t0 = time.perf_counter()
    losses, norms = {}, {}
    audit = _start_audit(state)
    relay = state.relay_source
    for pid in participants:
        if relay is not None and relay != pid:
            state.clients[pid].params = state.clients[relay].params.copy()
        x, y = batches[pid]
        smashed = client_forward(state.clients[pid], x, y)
        state.counters.cut_bytes_up += smashed.features.nbytes + np.asarray(y).nbytes
        state.counters.smashed_batches_received += 1
        state.counters.note_replicas(1)
        _audit_service(audit, state.server, smashed)
        loss, cut_grad = _end_to_end_pair_step(state, state.server, smashed)
        _audit_grad(audit, smashed, cut_grad)
        losses[pid] = loss
        norms[pid] = batch_mean_grad_norm(cut_grad.d_features)
        relay = pid
    state.relay_source = relay
    t1 = time.perf_counter()
    state.counters.add_phase_ms("pairwise", (t1 - t0) * 1000.0)
    return RoundReport(round_index, tuple(participants), losses, norms, [],
                       {"pairwise": (t1 - t0) * 1000.0},
                       [("pairwise", t0, t1)], audit)


def _replica_round(state: TrainState, participants, batches, round_index: int,
                   average_grads: bool) -> RoundReport:
    """Shared body of PSL / SFLV1 / SGLR: one server replica per participant."""
    t0 = time.perf_counter()
    smashed = _collect(state, participants, batches)
    audit = _start_audit(state)
    replicas = [ServerModel(state.server.params.copy()) for _ in participants]
    state.counters.note_replicas(len(replicas))
    losses, norms, cut_grads = {}, {}, []
    for replica, sb in zip(replicas, smashed):
        _audit_service(audit, replica, sb)
        loss, server_grads, cut_grad = server_forward_backward(replica, sb, state.loss_kind)
        state.counters.count_forward(sb.batch_size)
        state.counters.count_backward(sb.batch_size)
        state.counters.cut_bytes_down += cut_grad.d_features.nbytes
        server_apply_update(replica, server_grads, state.optimizer, state.lr_server)
        _audit_grad(audit, sb, cut_grad)
        losses[sb.client_id] = loss
        cut_grads.append(cut_grad)
    if average_grads:
        _require_equal_batches(smashed)
        template = CutGradientBatch(
            BROADCAST_CLIENT_ID,
            np.mean(np.stack([g.d_features for g in cut_grads], axis=0), axis=0))
        for sb in smashed:
            client_backward_update(state.clients[sb.client_id], template,
                                   state.optimizer, state.lr_client)
            norms[sb.client_id] = batch_mean_grad_norm(template.d_features)
    else:
        for sb, cut_grad in zip(smashed, cut_grads):
            client_backward_update(state.clients[sb.client_id], cut_grad,
                                   state.optimizer, state.lr_client)
            norms[sb.client_id] = batch_mean_grad_norm(cut_grad.d_features)
    state.server.params = _fedavg([r.params for r in replicas],
                                  [float(sb.batch_size) for sb in smashed])
    state.counters.server_aggregations += 1
    t1 = time.perf_counter()
    state.counters.add_phase_ms("replica-round", (t1 - t0) * 1000.0)
    return RoundReport(round_index, tuple(participants), losses, norms, [],
                       {"replica-round": (t1 - t0) * 1000.0},
                       [("replica-round", t0, t1)], audit)


def round_psl(state: TrainState, participants, batches, round_index: int) -> RoundReport:
    return _replica_round(state, participants, batches, round_index, average_grads=False)


def round_sglr(state: TrainState, participants, batches, round_index: int) -> RoundReport:
    return _replica_round(state, participants, batches, round_index, average_grads=True)


def round_sflv1(state: TrainState, participants, batches, round_index: int) -> RoundReport:
    report = _replica_round(state, participants, batches, round_index, average_grads=False)
    _aggregate_clients(state, participants,
                       {pid: batches[pid][0].shape[0] for pid in participants})
    return report


def round_sflv2(state: TrainState, participants, batches, round_index: int) -> RoundReport:
    """Single server model servicing participants one by one, plus client FedAvg."""
    t0 = time.perf_counter()
    losses, norms = {}, {}
    audit = _start_audit(state)
    state.counters.note_replicas(1)
    for pid in participants:
        x, y = batches[pid]
        smashed = client_forward(state.clients[pid], x, y)
        state.counters.cut_bytes_up += smashed.features.nbytes + np.asarray(y).nbytes
        state.counters.smashed_batches_received += 1
        _audit_service(audit, state.server, smashed)
        loss, cut_grad = _end_to_end_pair_step(state, state.server, smashed)
        _audit_grad(audit, smashed, cut_grad)
        losses[pid] = loss
        norms[pid] = batch_mean_grad_norm(cut_grad.d_features)
    _aggregate_clients(state, participants,
                       {pid: batches[pid][0].shape[0] for pid in participants})
    t1 = time.perf_counter()
    state.counters.add_phase_ms("pairwise", (t1 - t0) * 1000.0)
    return RoundReport(round_index, tuple(participants), losses, norms, [],
                       {"pairwise": (t1 - t0) * 1000.0},
                       [("pairwise", t0, t1)], audit)


def _require_equal_batches(smashed: list[SmashedBatch]) -> None:
    sizes = {sb.batch_size for sb in smashed}
    if len(sizes) > 1:
        raise StrategyConfigError(
            f"SGLR-style gradient averaging needs one shared batch size, got {sorted(sizes)}")


# ---------------------------------------------------------------------------
# Cycle rounds (feature resampling + server-first cyclical update)
# ---------------------------------------------------------------------------

def _server_train_step(state: TrainState, features: np.ndarray, labels) -> float:
    output, tape = nn.forward(state.server.params, state.server.params.specs, features)
    loss, d_output = nn.loss_and_grad(state.loss_kind, output, labels)
    grads, _ = nn.backward(tape, d_output)
    state.counters.count_forward(features.shape[0])
    state.counters.count_backward(features.shape[0])
    server_apply_update(state.server, grads, state.optimizer, state.lr_server)
    return loss


def _server_batches(state: TrainState, store_size: int):
    """Yield index arrays for phase-2 steps, per the configured pass mode.

    Indices inside a drawn batch are sorted ascending: a resample is a random
    subset / partition, and the fixed row order keeps reductions
    bit-reproducible (a full-store resample is then exactly the store).
    """
    cfg = state.cycle
    sb = min(cfg.server_batch_size, store_size)
    if cfg.server_batch_size > store_size:
        log.info("server batch %d clipped to store size %d",
                 cfg.server_batch_size, store_size)
    if cfg.pass_mode == EPOCH_PASSES:
        for _ in range(cfg.server_epochs):
            perm = state.server_shuffle_rng.permutation(store_size)
            for start in range(0, store_size, sb):
                yield np.sort(perm[start:start + sb])
    else:
        for _ in range(cfg.server_epochs):
            yield np.sort(state.server_shuffle_rng.permutation(store_size)[:sb])


def round_cycle(state: TrainState, participants, batches, round_index: int,
                base: str) -> RoundReport:
    """One cyclical round: collect, train server on the resampled feature
    store, freeze, serve cut gradients under the updated server, update
    clients per the base variant. The server model stays singular throughout.
    """
    if base not in (PSL, "sfl", SGLR):
        raise StrategyConfigError(f"unknown cycle base {base!r}")
    audit = _start_audit(state)
    spans = []

    # Phase 1: collect smashed data, form the server-side feature dataset.
    t0 = time.perf_counter()
    smashed = _collect(state, participants, batches)
    store = ServerFeatureStore.build(smashed)
    spans.append(("collect", t0, time.perf_counter()))
    if audit is not None:
        received = []
        for sb in smashed:
            received.extend(_row_digests(sb.features, sb.labels))
        audit["received_row_digests"] = sorted(received)
        audit["store_row_digests"] = sorted(_row_digests(store.features, store.labels))
        audit["server_params_pre_train"] = state.server.params.copy()
        audit["epoch_pass_indices"] = []

    # Phase 2: server trains as a standalone task on resampled batches.
    t0 = time.perf_counter()
    state.counters.note_replicas(1)
    server_losses = []
    for idx in _server_batches(state, store.size):
        if audit is not None:
            audit["epoch_pass_indices"].append(idx.copy())
        server_losses.append(_server_train_step(state, store.features[idx], store.labels[idx]))
    spans.append(("server-train", t0, time.perf_counter()))

    # Phase 3: freeze, then serve every client a gradient for its original
    # batch under the *updated* server parameters.
    t_freeze = time.perf_counter()
    state.server.frozen = True
    spans.append(("freeze", t_freeze, t_freeze))
    t0 = time.perf_counter()
    if audit is not None:
        audit["server_params_post_train"] = state.server.params.copy()
    cut_grads = {}
    losses = {}
    for sb in smashed:
        _audit_service(audit, state.server, sb)
        loss, cut_grad = frozen_service(state.server, sb, state.loss_kind)
        state.counters.count_forward(sb.batch_size)
        state.counters.count_backward(sb.batch_size)
        state.counters.cut_bytes_down += cut_grad.d_features.nbytes
        cut_grads[sb.client_id] = cut_grad
        losses[sb.client_id] = loss
        _audit_grad(audit, sb, cut_grad)
    if audit is not None:
        audit["server_digest_at_service"] = _digest(state.server.params)
        audit["server_digest_post_train"] = _digest(audit["server_params_post_train"])
    state.server.frozen = False
    spans.append(("gradient-service", t0, time.perf_counter()))

    # Phase 4: client updates per base variant.
    t0 = time.perf_counter()
    norms = {}
    if base == SGLR:
        _require_equal_batches(smashed)
        template = CutGradientBatch(
            BROADCAST_CLIENT_ID,
            np.mean(np.stack([cut_grads[sb.client_id].d_features for sb in smashed],
                             axis=0), axis=0))
        for sb in smashed:
            client_backward_update(state.clients[sb.client_id], template,
                                   state.optimizer, state.lr_client)
            norms[sb.client_id] = batch_mean_grad_norm(template.d_features)
    else:
        for sb in smashed:
            client_backward_update(state.clients[sb.client_id], cut_grads[sb.client_id],
                                   state.optimizer, state.lr_client)
            norms[sb.client_id] = batch_mean_grad_norm(cut_grads[sb.client_id].d_features)
    if base == "sfl":
        _aggregate_clients(state, participants,
                           {pid: batches[pid][0].shape[0] for pid in participants})
    spans.append(("client-update", t0, time.perf_counter()))

    phase_ms = {phase: (end - start) * 1000.0 for phase, start, end in spans}
    for phase, ms in phase_ms.items():
        state.counters.add_phase_ms(phase, ms)
    return RoundReport(round_index, tuple(participants), losses, norms,
                       server_losses, phase_ms, spans, audit)


# ---------------------------------------------------------------------------
# Audit plumbing (only active when state.audit is set)
# ---------------------------------------------------------------------------

def _start_audit(state: TrainState) -> Optional[dict]:
    if not state.audit:
        return None
    return {"service_snapshots": []}


def _audit_service(audit: Optional[dict], server: ServerModel, smashed: SmashedBatch) -> None:
    """Record the server bytes in force when this batch is about to be served."""
    if audit is None or len(audit["service_snapshots"]) >= 1:
        return
    audit["service_snapshots"].append({
        "client_id": smashed.client_id,
        "server_params": server.params.copy(),
        "features": smashed.features.copy(),
        "labels": np.asarray(smashed.labels).copy(),
    })


def _audit_grad(audit: Optional[dict], smashed: SmashedBatch,
                cut_grad: CutGradientBatch) -> None:
    if audit is None:
        return
    for snap in audit["service_snapshots"]:
        if snap["client_id"] == smashed.client_id and "cut_grad" not in snap:
            snap["cut_grad"] = cut_grad.d_features.copy()


# ---------------------------------------------------------------------------
# Dispatch
# ---------------------------------------------------------------------------

def run_round(strategy: str, state: TrainState, participants, batches,
              round_index: int) -> RoundReport:
    if not participants:
        raise StrategyConfigError("a round needs at least one participant")
    participants = tuple(sorted(participants))
    if strategy == SEQ_SL:
        report = round_seq_sl(state, participants, batches, round_index)
    elif strategy == PSL:
        report = round_psl(state, participants, batches, round_index)
    elif strategy == SFLV1:
        report = round_sflv1(state, participants, batches, round_index)
    elif strategy == SFLV2:
        report = round_sflv2(state, participants, batches, round_index)
    elif strategy == SGLR:
        report = round_sglr(state, participants, batches, round_index)
    elif strategy == CYCLE_PSL:
        report = round_cycle(state, participants, batches, round_index, base=PSL)
    elif strategy == CYCLE_SFL:
        report = round_cycle(state, participants, batches, round_index, base="sfl")
    elif strategy == CYCLE_SGLR:
        report = round_cycle(state, participants, batches, round_index, base=SGLR)
    else:
        raise StrategyConfigError(f"unknown strategy {strategy!r}")
    for pid in participants:
        discard_pending_tape(state.clients[pid])
    return report


def cost_counters(state: TrainState) -> CostReport:
    c = state.counters
    return CostReport(
        server_forward_batches=c.server_forward_batches,
        server_forward_rows=c.server_forward_rows,
        server_backward_batches=c.server_backward_batches,
        server_backward_rows=c.server_backward_rows,
        cut_bytes_up=c.cut_bytes_up,
        cut_bytes_down=c.cut_bytes_down,
        peak_server_replicas=c.peak_server_replicas,
        server_aggregations=c.server_aggregations,
        client_aggregations=c.client_aggregations,
        smashed_batches_received=c.smashed_batches_received,
        phase_wall_ms=dict(c.phase_wall_ms),
    )
