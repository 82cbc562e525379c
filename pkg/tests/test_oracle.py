"""Oracle tests: the finite-difference machinery itself, the independent
centralized trainer, and the closed-form one-neuron analysis."""

import math

import numpy as np
import pytest

from splitsim import nn, oracle
from splitsim.config import DataConfig
from splitsim.data import partition
from splitsim.orchestrator import RunConfig, run
from splitsim.split import merge_params


def test_finite_diff_on_square():
    grad = oracle.finite_diff_grad(lambda t: float(t[0] ** 2), np.array([3.0]), h=1e-6)
    assert abs(grad[0] - 6.0) < 1e-9


def test_finite_diff_on_constant():
    grad = oracle.finite_diff_grad(lambda t: 1.25, np.arange(4, dtype=float), h=1e-6)
    assert np.array_equal(grad, np.zeros(4))


def test_finite_diff_rejects_nonfinite_function():
    with pytest.raises(oracle.OracleError):
        oracle.finite_diff_grad(lambda t: float("nan"), np.array([1.0]), h=1e-6)
    with pytest.raises(ValueError):
        oracle.finite_diff_grad(lambda t: 0.0, np.array([1.0]), h=0.0)


def test_centralized_train_zero_steps_returns_init():
    specs = nn.mlp_specs(4, [5], 3)
    trained = oracle.centralized_train(specs, np.zeros((10, 4)),
                                       np.zeros(10, dtype=np.int64), steps=0,
                                       optimizer=nn.ADAM, lr=1e-3,
                                       loss_kind=nn.CROSS_ENTROPY, batch_size=5,
                                       init_seed=3, shuffle_seed=3)
    from splitsim.seeding import STREAM_INIT, substream
    init = nn.init_params(specs, substream(3, STREAM_INIT))
    assert trained.param_bytes() == init.param_bytes()


def test_centralized_train_deterministic():
    specs = nn.mlp_specs(4, [5], 3)
    rng = np.random.default_rng(0)
    x = rng.normal(size=(40, 4))
    y = rng.integers(0, 3, size=40)
    kwargs = dict(steps=25, optimizer=nn.ADAM, lr=1e-3, loss_kind=nn.CROSS_ENTROPY,
                  batch_size=8, init_seed=1, shuffle_seed=1)
    a = oracle.centralized_train(specs, x, y, **kwargs)
    b = oracle.centralized_train(specs, x, y, **kwargs)
    assert a.param_bytes() == b.param_bytes()


def test_seq_sl_single_client_equals_centralized_trainer():
    layers = nn.mlp_specs(6, [8, 8], 4)
    cfg = RunConfig(n_clients=1, rounds=40, strategy="seq-sl", layers=layers,
                    cut_index=2, batch_size=16, eval_every=40, lr_client=1e-3,
                    lr_server=1e-3, seed=0)
    data_cfg = DataConfig(n=400, classes=4, dim=6, partition="iid")
    dataset = data_cfg.build_dataset(cfg.seeds.data)
    clients = partition(dataset, data_cfg.partition_spec(1, cfg.seeds.data), 16)
    state, _ = run(cfg, clients)
    reference = oracle.centralized_train(
        layers, clients[0].train_x, clients[0].train_y, steps=40,
        optimizer=nn.ADAM, lr=1e-3, loss_kind=nn.CROSS_ENTROPY, batch_size=16,
        init_seed=cfg.seeds.init, shuffle_seed=cfg.seeds.shuffle,
        client_id=clients[0].client_id)
    merged = merge_params(state.train.clients[clients[0].client_id].params,
                          state.train.server.params, state.spec)
    assert np.max(np.abs(oracle.flatten_params(merged)
                         - oracle.flatten_params(reference))) == 0.0


# -- toy analysis -------------------------------------------------------------

def brute_force_toy(inst):
    """Re-derivation used to freeze expected values: the client-side loss as a
    1D function, differentiated by central differences."""
    def loss_wrt_wc(w_c, w_s):
        return (inst.y - w_s * w_c * inst.x) ** 2

    def loss_wrt_ws(w_s):
        return (inst.y - w_s * inst.w_c * inst.x) ** 2

    h = 1e-7
    d_ws = (loss_wrt_ws(inst.w_s + h) - loss_wrt_ws(inst.w_s - h)) / (2 * h)
    w_s_after = inst.w_s - inst.eta * d_ws
    d_wc_old = (loss_wrt_wc(inst.w_c + h, inst.w_s)
                - loss_wrt_wc(inst.w_c - h, inst.w_s)) / (2 * h)
    d_wc_new = (loss_wrt_wc(inst.w_c + h, w_s_after)
                - loss_wrt_wc(inst.w_c - h, w_s_after)) / (2 * h)
    return inst.eta * d_wc_old, inst.eta * d_wc_new, w_s_after


def test_toy_seed_instance_frozen_values():
    inst = oracle.ToyInstance(w_c=1.0, w_s=2.0, x=1.0, y=1.0, eta=0.1)
    step_e2e, step_cycle, w_s_after = oracle.toy_steps(inst)
    # frozen from the brute-force evaluator; the closed form lands one ulp
    # above the decimal literal 0.288
    assert step_e2e == 0.4
    assert w_s_after == 1.8
    assert step_cycle == 0.28800000000000003
    assert math.isclose(step_cycle, 0.288, rel_tol=1e-15)
    bf_e2e, bf_cycle, bf_ws = brute_force_toy(inst)
    assert math.isclose(bf_e2e, step_e2e, rel_tol=1e-8)
    assert math.isclose(bf_cycle, step_cycle, rel_tol=1e-8)
    assert math.isclose(bf_ws, w_s_after, rel_tol=1e-8)


def test_toy_steps_vanish_at_optimum_and_at_zero_lr():
    at_opt = oracle.ToyInstance(w_c=1.0, w_s=1.0, x=1.0, y=1.0, eta=0.1)
    step_e2e, step_cycle, w_s_after = oracle.toy_steps(at_opt)
    assert step_e2e == 0.0 and step_cycle == 0.0 and w_s_after == 1.0

    frozen_lr = oracle.ToyInstance(w_c=1.0, w_s=2.0, x=1.0, y=1.0, eta=0.0)
    step_e2e, step_cycle, w_s_after = oracle.toy_steps(frozen_lr)
    assert w_s_after == 2.0 and step_e2e == 0.0 and step_cycle == 0.0


def test_toy_instance_regime_validation():
    with pytest.raises(ValueError):
        oracle.ToyInstance(w_c=-1.0, w_s=2.0, x=1.0, y=1.0, eta=0.1)
    with pytest.raises(ValueError):
        oracle.ToyInstance(w_c=1.0, w_s=0.5, x=1.0, y=1.0, eta=0.1)  # pred < y


def test_toy_grid_excludes_overshooting_points():
    grid = oracle.toy_grid(50)
    for inst in grid:
        _, _, w_s_after = oracle.toy_steps(inst)
        assert inst.y / (inst.w_c * inst.x) < w_s_after < inst.w_s
    # the largest-step corner (w_c = x = 2, eta = 0.1) overshoots and is excluded
    assert not any(inst.w_c == 2.0 and inst.x == 2.0 and inst.eta == 0.1
                   for inst in grid)


def test_toy_sweep_holds_on_valid_grid():
    report = oracle.toy_sweep(oracle.toy_grid(50))
    assert report.n_violations == 0
    assert report.n_valid > 2000
    assert all(r.holds for r in report.rows)


def test_scalar_adam_first_step_closed_form():
    theta, m, v = oracle.scalar_adam_step(1.0, 1.0, 0.0, 0.0, t=1, lr=0.1)
    assert math.isclose(theta, 1.0 - 0.1 / (1.0 + 1e-8), rel_tol=1e-15)
