"""Strategy-round tests: relay, replica averaging, client aggregation,
gradient averaging, the cyclical phases, and the cost counters."""

import numpy as np
import pytest

from splitsim import nn
from splitsim.seeding import SHUFFLE_SERVER, STREAM_INIT, substream
from splitsim.split import (
    ClientModel,
    ServerModel,
    SmashedBatch,
    SplitSpec,
    server_forward_backward,
    split_params,
)
from splitsim.strategies import (
    CLIENT_AGGREGATING,
    CYCLE_PSL,
    CYCLE_SFL,
    CYCLE_SGLR,
    EPOCH_PASSES,
    PSL,
    SAMPLED_STEPS,
    SEQ_SL,
    SFLV1,
    SFLV2,
    SGLR,
    STRATEGIES,
    CycleConfig,
    ServerFeatureStore,
    StrategyConfigError,
    TrainState,
    _fedavg,
    cost_counters,
    run_round,
)

LAYERS = nn.mlp_specs(4, [6, 5], 3)
SPEC = SplitSpec(LAYERS, 2)


def make_state(n_clients=2, seed=0, lr=1e-2, optimizer=nn.SGD,
               cycle=None, audit=False, layers=LAYERS, cut=2):
    spec = SplitSpec(layers, cut)
    full = nn.init_params(layers, substream(seed, STREAM_INIT))
    client_half, server_half = split_params(full, spec)
    clients = {cid: ClientModel(cid, client_half.copy()) for cid in range(n_clients)}
    return TrainState(
        spec=spec,
        clients=clients,
        server=ServerModel(server_half),
        loss_kind=nn.CROSS_ENTROPY,
        optimizer=optimizer,
        lr_client=lr,
        lr_server=lr,
        cycle=cycle or CycleConfig(server_epochs=1, server_batch_size=8),
        server_shuffle_rng=substream(seed, SHUFFLE_SERVER),
        audit=audit,
    )


def make_batches(client_ids, seed=0, batch=8, dim=4, classes=3, same=False):
    rng = substream(seed, 5)
    batches = {}
    shared = (rng.normal(size=(batch, dim)), rng.integers(0, classes, size=batch))
    for cid in client_ids:
        if same:
            batches[cid] = (shared[0].copy(), shared[1].copy())
        else:
            batches[cid] = (rng.normal(size=(batch, dim)),
                            rng.integers(0, classes, size=batch))
    return batches


def client_bytes(state, cid):
    return state.clients[cid].params.param_bytes()


# -- sequential SL ------------------------------------------------------------

def test_seq_sl_two_identical_clients_equal_one_client_two_steps():
    batches = make_batches([0, 1], same=True)
    relay = make_state(n_clients=2)
    run_round(SEQ_SL, relay, (0, 1), batches, 0)

    solo = make_state(n_clients=1)
    run_round(SEQ_SL, solo, (0,), {0: batches[0]}, 0)
    run_round(SEQ_SL, solo, (0,), {0: batches[1]}, 1)

    assert client_bytes(relay, 1) == client_bytes(solo, 0)
    assert relay.server.params.param_bytes() == solo.server.params.param_bytes()


def test_seq_sl_relay_carries_weights_across_rounds():
    state = make_state(n_clients=3)
    batches = make_batches([0, 1, 2])
    run_round(SEQ_SL, state, (0, 1), batches, 0)
    before = client_bytes(state, 1)
    run_round(SEQ_SL, state, (2,), {2: batches[2]}, 1)
    # client 2 inherited client 1's trained weights before its own step
    assert state.relay_source == 2
    assert client_bytes(state, 2) != before  # trained further


def test_seq_sl_order_sensitivity_on_heterogeneous_data():
    batches = make_batches([0, 1])
    assert not np.array_equal(batches[0][0], batches[1][0])
    forward_state = make_state(n_clients=2)
    run_round(SEQ_SL, forward_state, (0, 1), batches, 0)
    swapped_state = make_state(n_clients=2)
    run_round(SEQ_SL, swapped_state, (0, 1), {0: batches[1], 1: batches[0]}, 0)
    assert (forward_state.server.params.param_bytes()
            != swapped_state.server.params.param_bytes())


# -- PSL / SFLV1 / SFLV2 --------------------------------------------------------

def test_psl_single_participant_equals_seq_sl_round():
    batches = make_batches([0])
    psl_state = make_state(n_clients=1)
    seq_state = make_state(n_clients=1)
    run_round(PSL, psl_state, (0,), batches, 0)
    run_round(SEQ_SL, seq_state, (0,), batches, 0)
    assert psl_state.server.params.param_bytes() == seq_state.server.params.param_bytes()
    assert client_bytes(psl_state, 0) == client_bytes(seq_state, 0)


def test_psl_identical_replicas_average_to_themselves():
    batches = make_batches([0, 1], same=True)
    pair = make_state(n_clients=2)
    run_round(PSL, pair, (0, 1), batches, 0)
    solo = make_state(n_clients=1)
    run_round(PSL, solo, (0,), {0: batches[0]}, 0)
    assert pair.server.params.param_bytes() == solo.server.params.param_bytes()


def test_psl_does_not_touch_client_models_of_others():
    state = make_state(n_clients=3)
    before = client_bytes(state, 2)
    run_round(PSL, state, (0, 1), make_batches([0, 1]), 0)
    assert client_bytes(state, 2) == before


def test_fedavg_weighted_mean_hand_computed():
    specs = (nn.dense(2, 2),)
    a = nn.ParamBlock(specs, [nn.DenseParams(np.full((2, 2), 1.0), np.full(2, 2.0))])
    b = nn.ParamBlock(specs, [nn.DenseParams(np.full((2, 2), 4.0), np.full(2, 8.0))])
    avg = _fedavg([a, b], [16.0, 32.0])
    expected_w = (16 * 1.0 + 32 * 4.0) / 48
    expected_b = (16 * 2.0 + 32 * 8.0) / 48
    assert np.allclose(avg.layers[0].weight, expected_w, rtol=0, atol=1e-15)
    assert np.allclose(avg.layers[0].bias, expected_b, rtol=0, atol=1e-15)


def test_sflv1_single_participant_aggregation_is_identity():
    batches = make_batches([0])
    v1 = make_state(n_clients=1)
    psl = make_state(n_clients=1)
    run_round(SFLV1, v1, (0,), batches, 0)
    run_round(PSL, psl, (0,), batches, 0)
    assert client_bytes(v1, 0) == client_bytes(psl, 0)
    assert v1.server.params.param_bytes() == psl.server.params.param_bytes()


def test_sflv1_broadcast_synchronizes_all_clients():
    state = make_state(n_clients=4)
    run_round(SFLV1, state, (0, 2), make_batches([0, 2]), 0)
    reference = client_bytes(state, 0)
    assert all(client_bytes(state, cid) == reference for cid in range(4))


def test_sflv2_server_trajectory_equals_seq_sl_for_one_client():
    batches0, batches1 = make_batches([0], seed=1), make_batches([0], seed=2)
    v2 = make_state(n_clients=1)
    seq = make_state(n_clients=1)
    for i, batches in enumerate((batches0, batches1)):
        run_round(SFLV2, v2, (0,), batches, i)
        run_round(SEQ_SL, seq, (0,), batches, i)
    assert v2.server.params.param_bytes() == seq.server.params.param_bytes()


# -- SGLR ---------------------------------------------------------------------

def test_sglr_single_participant_equals_psl_with_split_learning_rates():
    batches = make_batches([0])
    sglr = make_state(n_clients=1)
    psl = make_state(n_clients=1)
    for state in (sglr, psl):
        state.lr_client, state.lr_server = 0.03, 0.2
    run_round(SGLR, sglr, (0,), batches, 0)
    run_round(PSL, psl, (0,), batches, 0)
    assert client_bytes(sglr, 0) == client_bytes(psl, 0)
    assert sglr.server.params.param_bytes() == psl.server.params.param_bytes()


def opposite_gradient_state():
    """Identity client halves, shared input, mirrored MSE targets: the two
    cut gradients are exactly opposite."""
    layers = (nn.dense(2, 2), nn.dense(2, 2))
    spec = SplitSpec(layers, 1)
    eye = nn.ParamBlock(spec.client_layers, [nn.DenseParams(np.eye(2), np.zeros(2))])
    server = nn.ParamBlock(spec.server_layers, [nn.DenseParams(np.eye(2), np.zeros(2))])
    state = TrainState(
        spec=spec,
        clients={0: ClientModel(0, eye.copy()), 1: ClientModel(1, eye.copy())},
        server=ServerModel(server),
        loss_kind=nn.MSE,
        optimizer=nn.SGD,
        lr_client=0.1,
        lr_server=0.1,
        cycle=CycleConfig(server_epochs=1, server_batch_size=4),
        server_shuffle_rng=substream(0, SHUFFLE_SERVER),
    )
    x = np.array([[1.0, 2.0], [3.0, 4.0]])
    delta = np.array([[0.5, -0.25], [1.0, 0.75]])
    batches = {0: (x.copy(), x + delta), 1: (x.copy(), x - delta)}
    return state, batches


def test_sglr_opposite_gradients_cancel():
    state, batches = opposite_gradient_state()
    before = [client_bytes(state, 0), client_bytes(state, 1)]
    report = run_round(SGLR, state, (0, 1), batches, 0)
    assert client_bytes(state, 0) == before[0]
    assert client_bytes(state, 1) == before[1]
    assert report.grad_norms[0] == 0.0 and report.grad_norms[1] == 0.0


def test_sglr_average_matches_manual_mean_of_per_client_gradients():
    state, batches = opposite_gradient_state()
    # recompute each pair's cut gradient under the round-start server
    manual = []
    for cid in (0, 1):
        x, target = batches[cid]
        smashed = SmashedBatch(cid, x.copy(), target, 1)
        _, _, cut = server_forward_backward(ServerModel(state.server.params.copy()),
                                            smashed, nn.MSE)
        manual.append(cut.d_features)
    mean_grad = np.mean(np.stack(manual), axis=0)
    # apply through an identity client half: SGD weight delta = -lr * x^T g
    expected_delta = -0.1 * batches[0][0].T @ mean_grad
    before = state.clients[0].params.layers[0].weight.copy()
    run_round(SGLR, state, (0, 1), batches, 0)
    after = state.clients[0].params.layers[0].weight
    assert np.array_equal(after - before, expected_delta)


def test_sglr_requires_equal_batch_sizes():
    state = make_state(n_clients=2)
    batches = make_batches([0, 1])
    x, y = batches[1]
    batches[1] = (x[:4], y[:4])
    with pytest.raises(StrategyConfigError, match="shared batch size"):
        run_round(SGLR, state, (0, 1), batches, 0)


def test_sglr_honors_split_learning_rates():
    batches = make_batches([0])
    a = make_state(n_clients=1)
    a.lr_client, a.lr_server = 0.05, 0.2
    b = make_state(n_clients=1)
    b.lr_client, b.lr_server = 0.2, 0.05
    run_round(SGLR, a, (0,), batches, 0)
    run_round(SGLR, b, (0,), batches, 0)
    assert client_bytes(a, 0) != client_bytes(b, 0)
    assert a.server.params.param_bytes() != b.server.params.param_bytes()


# -- cycle rounds ----------------------------------------------------------------

def test_cycle_server_step_matches_sflv2_but_client_differs():
    batches = make_batches([0])
    cfg = CycleConfig(server_epochs=1, server_batch_size=8, pass_mode=SAMPLED_STEPS)
    cyc = make_state(n_clients=1, cycle=cfg, audit=True)
    v2 = make_state(n_clients=1)
    pre_server = cyc.server.params.param_bytes()
    run_round(CYCLE_PSL, cyc, (0,), batches, 0)
    run_round(SFLV2, v2, (0,), batches, 0)
    assert cyc.server.params.param_bytes() == v2.server.params.param_bytes()
    assert cyc.server.params.param_bytes() != pre_server  # the step was nonzero
    assert client_bytes(cyc, 0) != client_bytes(v2, 0)


def test_cycle_store_is_multiset_union_and_epoch_pass_covers_once():
    cfg = CycleConfig(server_epochs=3, server_batch_size=5, pass_mode=EPOCH_PASSES)
    state = make_state(n_clients=3, cycle=cfg, audit=True)
    report = run_round(CYCLE_SFL, state, (0, 1, 2), make_batches([0, 1, 2]), 0)
    audit = report.audit
    assert audit["received_row_digests"] == audit["store_row_digests"]
    store_n = len(audit["store_row_digests"])
    assert store_n == 3 * 8
    passes = audit["epoch_pass_indices"]
    # 3 epochs x ceil(24/5) = 5 chunks
    assert len(passes) == 15
    for e in range(3):
        seen = np.concatenate(passes[e * 5:(e + 1) * 5])
        assert np.array_equal(np.sort(seen), np.arange(store_n))


def test_cycle_gradients_use_post_update_server():
    cfg = CycleConfig(server_epochs=2, server_batch_size=8)
    state = make_state(n_clients=2, cycle=cfg, audit=True)
    report = run_round(CYCLE_PSL, state, (0, 1), make_batches([0, 1]), 0)
    audit = report.audit
    assert audit["server_digest_at_service"] == audit["server_digest_post_train"]
    pre, post = audit["server_params_pre_train"], audit["server_params_post_train"]
    assert pre.param_bytes() != post.param_bytes()
    snap = audit["service_snapshots"][0]
    smashed = SmashedBatch(snap["client_id"], snap["features"], snap["labels"], 1)
    _, _, grad_post = server_forward_backward(ServerModel(post.copy()), smashed,
                                              state.loss_kind)
    _, _, grad_pre = server_forward_backward(ServerModel(pre.copy()), smashed,
                                             state.loss_kind)
    assert np.array_equal(grad_post.d_features, snap["cut_grad"])
    assert not np.array_equal(grad_pre.d_features, snap["cut_grad"])


def test_baseline_gradients_use_round_start_server():
    state = make_state(n_clients=2, audit=True)
    report = run_round(PSL, state, (0, 1), make_batches([0, 1]), 0)
    snap = report.audit["service_snapshots"][0]
    smashed = SmashedBatch(snap["client_id"], snap["features"], snap["labels"], 1)
    _, _, grad = server_forward_backward(ServerModel(snap["server_params"].copy()),
                                         smashed, state.loss_kind)
    assert np.array_equal(grad.d_features, snap["cut_grad"])


def test_cycle_never_aggregates_server():
    state = make_state(n_clients=3, cycle=CycleConfig(1, 8))
    for t in range(3):
        run_round(CYCLE_SGLR, state, (0, 1, 2), make_batches([0, 1, 2], seed=t), t)
    assert state.counters.server_aggregations == 0
    assert state.counters.peak_server_replicas == 1

    psl_state = make_state(n_clients=3)
    run_round(PSL, psl_state, (0, 1, 2), make_batches([0, 1, 2]), 0)
    assert psl_state.counters.server_aggregations == 1


def test_cycle_sfl_broadcasts_clients_cycle_psl_does_not():
    batches = make_batches([0, 1])
    sfl = make_state(n_clients=3, cycle=CycleConfig(1, 8))
    run_round(CYCLE_SFL, sfl, (0, 1), batches, 0)
    assert client_bytes(sfl, 0) == client_bytes(sfl, 1) == client_bytes(sfl, 2)

    psl = make_state(n_clients=3, cycle=CycleConfig(1, 8))
    run_round(CYCLE_PSL, psl, (0, 1), batches, 0)
    assert client_bytes(psl, 0) != client_bytes(psl, 1)


def test_cycle_sglr_applies_shared_averaged_gradient():
    state, batches = opposite_gradient_state()
    before = [client_bytes(state, 0), client_bytes(state, 1)]
    report = run_round(CYCLE_SGLR, state, (0, 1), batches, 0)
    # identical inputs and identity halves: smashed batches are identical, the
    # store is their duplication, and the served gradients mirror: average 0
    assert client_bytes(state, 0) == before[0]
    assert client_bytes(state, 1) == before[1]
    assert report.grad_norms[0] == 0.0


def test_cycle_phase_order():
    state = make_state(n_clients=2, cycle=CycleConfig(1, 8))
    report = run_round(CYCLE_SFL, state, (0, 1), make_batches([0, 1]), 0)
    phases = [name for name, _, _ in report.phase_spans]
    assert phases == ["collect", "server-train", "freeze", "gradient-service",
                      "client-update"]
    starts = [start for _, start, _ in report.phase_spans]
    assert starts == sorted(starts)
    for name, start, end in report.phase_spans:
        assert end >= start


def test_server_batch_clipped_to_store_size():
    state = make_state(n_clients=1, cycle=CycleConfig(1, 4096))
    report = run_round(CYCLE_PSL, state, (0,), make_batches([0]), 0)
    assert len(report.server_losses) == 1  # one clipped full-store batch
    assert state.counters.server_forward_rows == 2 * 8  # train + service


def test_empty_participant_set_rejected():
    state = make_state()
    with pytest.raises(StrategyConfigError):
        run_round(PSL, state, (), {}, 0)


# -- cost counters ----------------------------------------------------------------

def test_psl_replica_count_equals_participants():
    state = make_state(n_clients=5)
    run_round(PSL, state, (0, 1, 2, 3), make_batches([0, 1, 2, 3]), 0)
    assert cost_counters(state).peak_server_replicas == 4


def test_sflv2_costs_one_forward_one_backward_per_batch():
    state = make_state(n_clients=3)
    run_round(SFLV2, state, (0, 1, 2), make_batches([0, 1, 2]), 0)
    report = cost_counters(state)
    assert report.peak_server_replicas == 1
    assert report.server_forward_batches == 3
    assert report.server_backward_batches == 3
    assert report.smashed_batches_received == 3


def test_cycle_costs_two_forwards_per_smashed_batch():
    state = make_state(n_clients=3, cycle=CycleConfig(1, 8))
    for t in range(4):
        run_round(CYCLE_SFL, state, (0, 1, 2), make_batches([0, 1, 2], seed=t), t)
    report = cost_counters(state)
    assert report.peak_server_replicas == 1
    assert report.server_forward_batches == 2 * report.smashed_batches_received
    assert report.server_forward_rows == 2 * 8 * report.smashed_batches_received
    assert report.cut_bytes_down > 0 and report.cut_bytes_up > 0


def test_client_aggregation_taxonomy():
    for strategy in STRATEGIES:
        state = make_state(n_clients=2)
        run_round(strategy, state, (0, 1), make_batches([0, 1]), 0)
        aggregated = state.counters.client_aggregations > 0
        assert aggregated == (strategy in CLIENT_AGGREGATING), strategy


def test_feature_store_build_concatenates_in_client_order():
    a = SmashedBatch(1, np.ones((2, 3)), np.array([0, 1]), 1)
    b = SmashedBatch(4, np.full((3, 3), 2.0), np.array([1, 2, 0]), 1)
    store = ServerFeatureStore.build([a, b])
    assert store.size == 5
    assert np.array_equal(store.client_ids, [1, 1, 4, 4, 4])
    assert np.array_equal(store.features[:2], np.ones((2, 3)))
