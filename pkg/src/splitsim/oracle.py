"""Independent reference implementations the acceptance tests compare
against: central-difference gradients, a straight-line centralized trainer,
and the closed-form one-neuron toy analysis of the two client-update rules.

Nothing here reuses the engine's backward or optimizer code; the formulas
are re-derived and written out inline so a bug in the engine cannot hide in
its own oracle. (Forward evaluation and batch drawing may be shared.)
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import nn
from .data import BatchStream
from .seeding import SHUFFLE_CLIENT, STREAM_INIT, substream


class OracleError(RuntimeError):
    """The oracle itself hit a non-finite value."""


# ---------------------------------------------------------------------------
# Finite differences
# ---------------------------------------------------------------------------

def finite_diff_grad(f: Callable[[np.ndarray], float], theta: np.ndarray,
                     h: float = 1e-6) -> np.ndarray:
    """Central differences per coordinate of a flat parameter vector."""
    if h <= 0:
        raise ValueError("h must be positive")
    theta = np.asarray(theta, dtype=np.float64)
    grad = np.zeros_like(theta)
    for i in range(theta.size):
        bump = np.zeros_like(theta)
        bump[i] = h
        hi = f(theta + bump)
        lo = f(theta - bump)
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise OracleError(f"f is non-finite near coordinate {i}")
        grad[i] = (hi - lo) / (2.0 * h)
    return grad


def flatten_params(params: nn.ParamBlock) -> np.ndarray:
    parts = []
    for p in params.layers:
        if p is not None:
            parts.append(p.weight.ravel())
            parts.append(p.bias.ravel())
    return np.concatenate(parts) if parts else np.zeros(0)


def unflatten_params(theta: np.ndarray, template: nn.ParamBlock) -> nn.ParamBlock:
    out = template.copy()
    cursor = 0
    for p in out.layers:
        if p is None:
            continue
        for arr in (p.weight, p.bias):
            n = arr.size
            arr[...] = theta[cursor:cursor + n].reshape(arr.shape)
            cursor += n
    return out


# ---------------------------------------------------------------------------
# Straight-line reference network (no shared gradient code with the engine)
# ---------------------------------------------------------------------------

def reference_forward(weights: Sequence[Optional[tuple[np.ndarray, np.ndarray]]],
                      specs: Sequence[nn.LayerSpec], x: np.ndarray) -> np.ndarray:
    """Plain re-evaluation of the layer stack from (W, b) pairs."""
    h = x
    for spec, wb in zip(specs, weights):
        if spec.kind == nn.DENSE:
            h = h @ wb[0] + wb[1]
        elif spec.kind == nn.RELU:
            h = np.maximum(h, 0.0)
        elif spec.kind == nn.TANH:
            h = np.tanh(h)
        elif spec.kind == nn.SOFTMAX:
            e = np.exp(h - h.max(axis=1, keepdims=True))
            h = e / e.sum(axis=1, keepdims=True)
    return h


def reference_loss(kind: str, output: np.ndarray, labels) -> float:
    if kind == nn.CROSS_ENTROPY:
        rows = np.arange(output.shape[0])
        return float(-np.mean(np.log(output[rows, np.asarray(labels)])))
    diff = output - np.asarray(labels, dtype=np.float64)
    return float(np.mean(diff * diff))


def reference_loss_and_grads(weights, specs: Sequence[nn.LayerSpec], x: np.ndarray,
                             labels, loss_kind: str):
    """Hand-written forward + chain rule; returns (loss, per-layer grads)."""
    acts = []  # what each layer's backward rule needs
    h = x
    for spec, wb in zip(specs, weights):
        if spec.kind == nn.DENSE:
            acts.append(h)
            h = h @ wb[0] + wb[1]
        elif spec.kind == nn.RELU:
            acts.append(h)
            h = np.maximum(h, 0.0)
        elif spec.kind == nn.TANH:
            h = np.tanh(h)
            acts.append(h)
        elif spec.kind == nn.SOFTMAX:
            e = np.exp(h - h.max(axis=1, keepdims=True))
            h = e / e.sum(axis=1, keepdims=True)
            acts.append(h)
    b = x.shape[0]
    if loss_kind == nn.CROSS_ENTROPY:
        y = np.asarray(labels)
        rows = np.arange(b)
        loss = float(-np.mean(np.log(h[rows, y])))
        d = np.zeros_like(h)
        d[rows, y] = -1.0 / (b * h[rows, y])
    else:
        target = np.asarray(labels, dtype=np.float64)
        diff = h - target
        loss = float(np.mean(diff * diff))
        d = 2.0 * diff / h.size
    grads: list = [None] * len(specs)
    for i in range(len(specs) - 1, -1, -1):
        kind = specs[i].kind
        saved = acts[i]
        if kind == nn.DENSE:
            grads[i] = (saved.T @ d, d.sum(axis=0))
            d = d @ weights[i][0].T
        elif kind == nn.RELU:
            d = d * (saved > 0.0)
        elif kind == nn.TANH:
            d = d * (1.0 - saved * saved)
        elif kind == nn.SOFTMAX:
            p = saved
            d = p * (d - (d * p).sum(axis=1, keepdims=True))
    return loss, grads


def scalar_adam_step(theta: float, grad: float, m: float, v: float, t: int,
                     lr: float) -> tuple[float, float, float]:
    """One textbook Adam step on a scalar; t is the 1-based step index."""
    m = nn.ADAM_BETA1 * m + (1.0 - nn.ADAM_BETA1) * grad
    v = nn.ADAM_BETA2 * v + (1.0 - nn.ADAM_BETA2) * grad * grad
    m_hat = m / (1.0 - nn.ADAM_BETA1 ** t)
    v_hat = v / (1.0 - nn.ADAM_BETA2 ** t)
    return theta - lr * m_hat / (np.sqrt(v_hat) + nn.ADAM_EPS), m, v


def centralized_train(specs: Sequence[nn.LayerSpec], x: np.ndarray, y,
                      steps: int, optimizer: str, lr: float, loss_kind: str,
                      batch_size: int, init_seed: int, shuffle_seed: int,
                      client_id: int = 0) -> nn.ParamBlock:
    """Plain mini-batch training of the unsplit model, written independently.

    Uses the same init substream and per-client batch stream construction as
    the orchestrator, so a sequential-SL run with one client must reproduce
    it bit for bit.
    """
    specs = tuple(specs)
    init = nn.init_params(specs, substream(init_seed, STREAM_INIT))
    weights = [(p.weight.copy(), p.bias.copy()) if p is not None else None
               for p in init.layers]
    moments = [
        {"m_w": np.zeros_like(p.weight), "v_w": np.zeros_like(p.weight),
         "m_b": np.zeros_like(p.bias), "v_b": np.zeros_like(p.bias)}
        if p is not None else None
        for p in init.layers]
    stream = BatchStream(x, y, batch_size,
                         substream(shuffle_seed, SHUFFLE_CLIENT, client_id))
    t = 0
    for _ in range(steps):
        bx, by = stream.next_batch()
        loss, grads = reference_loss_and_grads(weights, specs, bx, by, loss_kind)
        if not np.isfinite(loss):
            raise OracleError(f"centralized training diverged at step {t + 1}")
        t += 1
        for i, g in enumerate(grads):
            if g is None:
                continue
            w, bias = weights[i]
            d_w, d_b = g
            if optimizer == nn.SGD:
                weights[i] = (w - lr * d_w, bias - lr * d_b)
            else:
                mo = moments[i]
                mo["m_w"] = nn.ADAM_BETA1 * mo["m_w"] + (1.0 - nn.ADAM_BETA1) * d_w
                mo["v_w"] = nn.ADAM_BETA2 * mo["v_w"] + (1.0 - nn.ADAM_BETA2) * d_w * d_w
                mo["m_b"] = nn.ADAM_BETA1 * mo["m_b"] + (1.0 - nn.ADAM_BETA1) * d_b
                mo["v_b"] = nn.ADAM_BETA2 * mo["v_b"] + (1.0 - nn.ADAM_BETA2) * d_b * d_b
                m_hat_w = mo["m_w"] / (1.0 - nn.ADAM_BETA1 ** t)
                v_hat_w = mo["v_w"] / (1.0 - nn.ADAM_BETA2 ** t)
                m_hat_b = mo["m_b"] / (1.0 - nn.ADAM_BETA1 ** t)
                v_hat_b = mo["v_b"] / (1.0 - nn.ADAM_BETA2 ** t)
                weights[i] = (w - lr * m_hat_w / (np.sqrt(v_hat_w) + nn.ADAM_EPS),
                              bias - lr * m_hat_b / (np.sqrt(v_hat_b) + nn.ADAM_EPS))
    out = init.copy()
    for i, wb in enumerate(weights):
        if wb is None:
            continue
        out.layers[i].weight[...] = wb[0]
        out.layers[i].bias[...] = wb[1]
    out.step = t
    return out


# ---------------------------------------------------------------------------
# One-neuron toy analysis: end-to-end vs cyclical client step
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ToyInstance:
    """Scalar split model y_hat = w_s * w_c * x with squared-error loss.

    The analyzed regime has all quantities positive and the prediction above
    the target (w_s * w_c * x > y).
    """

    w_c: float
    w_s: float
    x: float
    y: float
    eta: float

    def __post_init__(self):
        if min(self.w_c, self.w_s, self.x, self.y) <= 0 or self.eta < 0:
            raise ValueError("toy instance requires w_c, w_s, x, y > 0 and eta >= 0")
        if self.w_s * self.w_c * self.x < self.y:
            raise ValueError("toy instance requires w_s * w_c * x >= y")


def toy_steps(inst: ToyInstance) -> tuple[float, float, float]:
    """(end-to-end client step, cycle client step, server weight after update).

    End-to-end takes the client gradient at the old server weight; the cycle
    rule first moves the server, then takes the client gradient there.
    """
    residual = inst.w_s * inst.w_c * inst.x - inst.y
    w_s_after = inst.w_s - 2.0 * inst.eta * inst.w_c * inst.x * residual
    step_e2e = 2.0 * inst.eta * inst.w_s * inst.x * residual
    residual_after = w_s_after * inst.w_c * inst.x - inst.y
    step_cycle = 2.0 * inst.eta * w_s_after * inst.x * residual_after
    return step_e2e, step_cycle, w_s_after


@dataclass
class ToyRow:
    w_c: float
    w_s: float
    x: float
    y: float
    eta: float
    step_e2e: float
    step_cycle: float
    holds: bool


@dataclass
class ToyReport:
    rows: list
    n_valid: int
    n_violations: int

    @property
    def violations(self) -> list:
        return [r for r in self.rows if not r.holds]


def toy_grid(n_residuals: int = 200) -> list[ToyInstance]:
    """Grid over the near-convergence regime, filtered by the condition
    y / (w_c x) < w_s' < w_s (points outside it are excluded, not failures)."""
    instances = []
    residuals = np.logspace(-3, -1, n_residuals)
    for w_c in (0.5, 1.0, 2.0):
        for x in (0.5, 1.0, 2.0):
            for y in (0.5, 1.0):
                for r in residuals:
                    for eta in (1e-3, 1e-2, 1e-1):
                        w_s = (y + r) / (w_c * x)
                        inst = ToyInstance(w_c, w_s, x, y, eta)
                        _, _, w_s_after = toy_steps(inst)
                        if y / (w_c * x) < w_s_after < w_s:
                            instances.append(inst)
    return instances


def toy_sweep(instances: Sequence[ToyInstance]) -> ToyReport:
    """Check step_cycle < step_e2e on every instance of the valid regime."""
    rows = []
    violations = 0
    for inst in instances:
        step_e2e, step_cycle, _ = toy_steps(inst)
        holds = step_cycle < step_e2e
        violations += 0 if holds else 1
        rows.append(ToyRow(inst.w_c, inst.w_s, inst.x, inst.y, inst.eta,
                           step_e2e, step_cycle, holds))
    return ToyReport(rows, len(rows), violations)
