"""Minimal dense-network engine on float64 numpy arrays.

Layers (dense, relu, tanh, softmax-output) with hand-derived backward rules,
cross-entropy / mean-squared-error losses, SGD and Adam updates, and a small
versioned binary checkpoint format. No autodiff graph: every gradient is the
written-out chain rule for that layer kind, which keeps the arithmetic
bit-reproducible and easy to check against central differences.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

DENSE = "dense"
RELU = "relu"
TANH = "tanh"
SOFTMAX = "softmax-output"

ACTIVATIONS = (RELU, TANH, SOFTMAX)

CROSS_ENTROPY = "cross-entropy"
MSE = "mean-squared-error"

ADAM = "adam"
SGD = "sgd"

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class ShapeError(ValueError):
    """Tensor/layer dimension mismatch."""


class LabelError(ValueError):
    """Class label outside [0, C)."""


class NumericError(FloatingPointError):
    """Non-finite value where a finite one is required."""


class TapeError(RuntimeError):
    """Activation tape used with the wrong parameters, or reused."""


def as_tensor(data, shape: Optional[Sequence[int]] = None, checked: bool = True) -> np.ndarray:
    """Build a row-major float64 array; checked mode rejects NaN/Inf."""
    arr = np.ascontiguousarray(data, dtype=np.float64)
    if shape is not None:
        arr = arr.reshape(tuple(shape))
    if checked and not np.all(np.isfinite(arr)):
        raise NumericError("tensor contains non-finite values")
    return arr


# ---------------------------------------------------------------------------
# Layer specs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_dim: int = 0
    out_dim: int = 0


def dense(in_dim: int, out_dim: int) -> LayerSpec:
    if in_dim < 1 or out_dim < 1:
        raise ShapeError(f"dense dims must be positive, got {in_dim}x{out_dim}")
    return LayerSpec(DENSE, in_dim, out_dim)


def relu() -> LayerSpec:
    return LayerSpec(RELU)


def tanh() -> LayerSpec:
    return LayerSpec(TANH)


def softmax_output() -> LayerSpec:
    return LayerSpec(SOFTMAX)


def validate_specs(specs: Sequence[LayerSpec]) -> tuple[int, int]:
    """Check that consecutive dense dims compose; return (in_dim, out_dim)."""
    if not specs:
        raise ShapeError("empty layer list")
    in_dim = None
    cur = None
    for i, spec in enumerate(specs):
        if spec.kind == DENSE:
            if cur is not None and spec.in_dim != cur:
                raise ShapeError(
                    f"layer {i}: dense expects in_dim {cur}, spec says {spec.in_dim}"
                )
            if in_dim is None:
                in_dim = spec.in_dim
            cur = spec.out_dim
        elif spec.kind in ACTIVATIONS:
            if spec.kind == SOFTMAX and i != len(specs) - 1:
                raise ShapeError(f"layer {i}: {SOFTMAX} must be the last layer")
        else:
            raise ShapeError(f"layer {i}: unknown kind {spec.kind!r}")
    if in_dim is None:
        # Activation-only stacks are legal halves of a split model.
        in_dim = 0
    return in_dim, cur if cur is not None else 0


def mlp_specs(in_dim: int, hidden: Sequence[int], out_dim: int,
              activation: str = RELU, classifier: bool = True) -> tuple[LayerSpec, ...]:
    """Dense blocks (dense + activation) ending in a head layer.

    Block b spans spec indices [2b, 2b+2); cutting between blocks means a cut
    index that is a multiple of 2.
    """
    if activation not in (RELU, TANH):
        raise ShapeError(f"hidden activation must be relu/tanh, got {activation!r}")
    specs: list[LayerSpec] = []
    prev = in_dim
    for width in hidden:
        specs.append(dense(prev, width))
        specs.append(LayerSpec(activation))
        prev = width
    specs.append(dense(prev, out_dim))
    if classifier:
        specs.append(softmax_output())
    validate_specs(specs)
    return tuple(specs)


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

@dataclass
class DenseParams:
    weight: np.ndarray  # [in_dim, out_dim]
    bias: np.ndarray    # [out_dim]
    m_w: np.ndarray = field(repr=False, default=None)
    v_w: np.ndarray = field(repr=False, default=None)
    m_b: np.ndarray = field(repr=False, default=None)
    v_b: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        if self.m_w is None:
            self.m_w = np.zeros_like(self.weight)
            self.v_w = np.zeros_like(self.weight)
            self.m_b = np.zeros_like(self.bias)
            self.v_b = np.zeros_like(self.bias)

    def copy(self) -> "DenseParams":
        return DenseParams(self.weight.copy(), self.bias.copy(),
                           self.m_w.copy(), self.v_w.copy(),
                           self.m_b.copy(), self.v_b.copy())


@dataclass
class ParamBlock:
    """Per-layer parameters plus Adam state; entries are None for activations."""

    specs: tuple[LayerSpec, ...]
    layers: list[Optional[DenseParams]]
    step: int = 0

    def copy(self) -> "ParamBlock":
        return ParamBlock(self.specs,
                          [p.copy() if p is not None else None for p in self.layers],
                          self.step)

    def param_bytes(self) -> bytes:
        """Parameter values only (no optimizer state); used for byte-equality checks."""
        chunks = []
        for p in self.layers:
            if p is not None:
                chunks.append(p.weight.tobytes())
                chunks.append(p.bias.tobytes())
        return b"".join(chunks)

    def n_params(self) -> int:
        return sum(p.weight.size + p.bias.size for p in self.layers if p is not None)


@dataclass
class Gradients:
    """Gradient arrays shaped like a ParamBlock's parameters."""

    layers: list[Optional[tuple[np.ndarray, np.ndarray]]]  # (d_weight, d_bias)


def init_params(specs: Sequence[LayerSpec], rng: np.random.Generator) -> ParamBlock:
    """Kaiming-uniform before relu, Xavier-uniform otherwise, zero biases.

    Draw order is fixed (ascending layer index) so the same substream always
    yields the same parameters.
    """
    specs = tuple(specs)
    validate_specs(specs)
    layers: list[Optional[DenseParams]] = []
    for i, spec in enumerate(specs):
        if spec.kind != DENSE:
            layers.append(None)
            continue
        feeds_relu = i + 1 < len(specs) and specs[i + 1].kind == RELU
        if feeds_relu:
            bound = np.sqrt(6.0 / spec.in_dim)  # kaiming-uniform, relu gain
        else:
            bound = np.sqrt(6.0 / (spec.in_dim + spec.out_dim))  # xavier-uniform
        weight = rng.uniform(-bound, bound, size=(spec.in_dim, spec.out_dim))
        layers.append(DenseParams(weight, np.zeros(spec.out_dim)))
    return ParamBlock(specs, layers)


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------

@dataclass
class Tape:
    """Activation cache from one forward pass, consumed by backward."""

    params: ParamBlock
    saved: list[np.ndarray]  # per layer: dense/relu keep input, tanh/softmax keep output
    output: np.ndarray
    batch: int


def _stable_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def forward(params: ParamBlock, specs: Sequence[LayerSpec], x: np.ndarray) -> tuple[np.ndarray, Tape]:
    """Run the layer stack; the tape holds what backward needs per layer."""
    if tuple(specs) != params.specs:
        raise TapeError("specs do not match the ParamBlock they were built with")
    if x.ndim != 2 or x.shape[0] < 1:
        raise ShapeError(f"input must be [B, d] with B >= 1, got {x.shape}")
    h = x
    saved: list[np.ndarray] = []
    for i, spec in enumerate(specs):
        if spec.kind == DENSE:
            if h.shape[1] != spec.in_dim:
                raise ShapeError(
                    f"layer {i}: dense expects input dim {spec.in_dim}, got {h.shape[1]}"
                )
            saved.append(h)
            h = h @ params.layers[i].weight + params.layers[i].bias
        elif spec.kind == RELU:
            saved.append(h)
            h = np.maximum(h, 0.0)
        elif spec.kind == TANH:
            h = np.tanh(h)
            saved.append(h)
        elif spec.kind == SOFTMAX:
            h = _stable_softmax(h)
            saved.append(h)
        else:
            raise ShapeError(f"layer {i}: unknown kind {spec.kind!r}")
    return h, Tape(params, saved, h, x.shape[0])


def backward(tape: Tape, d_output: np.ndarray) -> tuple[Gradients, np.ndarray]:
    """Chain rule back through the tape.

    Returns parameter gradients and the input-space gradient; the caller may
    discard either (a frozen server only needs the latter). Never mutates the
    ParamBlock.
    """
    params = tape.params
    if d_output.shape != tape.output.shape:
        raise ShapeError(
            f"d_output shape {d_output.shape} != forward output {tape.output.shape}"
        )
    grads: list[Optional[tuple[np.ndarray, np.ndarray]]] = [None] * len(params.specs)
    d = d_output
    for i in range(len(params.specs) - 1, -1, -1):
        kind = params.specs[i].kind
        saved = tape.saved[i]
        if kind == DENSE:
            d_w = saved.T @ d
            d_b = d.sum(axis=0)
            grads[i] = (d_w, d_b)
            d = d @ params.layers[i].weight.T
        elif kind == RELU:
            d = d * (saved > 0.0)
        elif kind == TANH:
            d = d * (1.0 - saved * saved)
        elif kind == SOFTMAX:
            p = saved
            d = p * (d - (d * p).sum(axis=1, keepdims=True))
    return Gradients(grads), d


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def loss_and_grad(kind: str, output: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean-over-batch loss and its gradient w.r.t. the network output.

    Cross-entropy takes the probabilities produced by a softmax-output layer
    (the softmax itself is computed with max subtraction, so large logits
    cannot overflow) and integer labels in [0, C).
    """
    b = output.shape[0]
    if kind == CROSS_ENTROPY:
        y = np.asarray(labels)
        if y.shape != (b,):
            raise LabelError(f"labels must be [B]={b}, got shape {y.shape}")
        if y.dtype.kind not in "iu":
            raise LabelError(f"cross-entropy needs integer labels, got dtype {y.dtype}")
        c = output.shape[1]
        if y.min() < 0 or y.max() >= c:
            raise LabelError(f"label out of range [0, {c})")
        rows = np.arange(b)
        p_true = output[rows, y]
        loss = float(-np.mean(np.log(p_true)))
        d_out = np.zeros_like(output)
        d_out[rows, y] = -1.0 / (b * p_true)
        return loss, d_out
    if kind == MSE:
        target = np.asarray(labels, dtype=np.float64)
        if target.shape != output.shape:
            raise ShapeError(
                f"MSE target shape {target.shape} != output shape {output.shape}"
            )
        diff = output - target
        loss = float(np.mean(diff * diff))
        return loss, 2.0 * diff / output.size
    raise ValueError(f"unknown loss kind {kind!r}")


# ---------------------------------------------------------------------------
# Updates
# ---------------------------------------------------------------------------

def apply_update(params: ParamBlock, grads: Gradients, optimizer: str, lr: float) -> ParamBlock:
    """One optimizer step, in place. Adam uses beta1=0.9, beta2=0.999, eps=1e-8."""
    if lr <= 0.0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    if optimizer not in (SGD, ADAM):
        raise ValueError(f"unknown optimizer {optimizer!r}")
    for i, g in enumerate(grads.layers):
        if g is None:
            continue
        d_w, d_b = g
        if not (np.all(np.isfinite(d_w)) and np.all(np.isfinite(d_b))):
            raise NumericError(f"non-finite gradient at layer {i}")
    params.step += 1
    for i, g in enumerate(grads.layers):
        if g is None:
            continue
        p = params.layers[i]
        d_w, d_b = g
        if optimizer == SGD:
            p.weight -= lr * d_w
            p.bias -= lr * d_b
        else:
            t = params.step
            for value, grad, m, v in ((p.weight, d_w, p.m_w, p.v_w),
                                      (p.bias, d_b, p.m_b, p.v_b)):
                m *= ADAM_BETA1
                m += (1.0 - ADAM_BETA1) * grad
                v *= ADAM_BETA2
                v += (1.0 - ADAM_BETA2) * grad * grad
                m_hat = m / (1.0 - ADAM_BETA1 ** t)
                v_hat = v / (1.0 - ADAM_BETA2 ** t)
                value -= lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
    return params


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------
#
# Byte layout (version 1), also documented in the README:
#   ASCII header line: "SPLITSIM-CKPT 1 step=<n>[ <key>=<value> ...]\n"
#   then, per dense layer in ascending order, weight then bias:
#     u32 LE  ndim
#     ndim x u32 LE  dims
#     raw little-endian float64 data, C order
# Optimizer moments are not checkpointed; a loaded block starts with fresh
# Adam state and the saved step counter.

CKPT_MAGIC = "SPLITSIM-CKPT"
CKPT_VERSION = 1


def save_params(params: ParamBlock, path, meta: Optional[dict] = None) -> None:
    fields = [CKPT_MAGIC, str(CKPT_VERSION), f"step={params.step}"]
    for key, value in (meta or {}).items():
        fields.append(f"{key}={value}")
    with open(path, "wb") as f:
        f.write((" ".join(fields) + "\n").encode("ascii"))
        for p in params.layers:
            if p is None:
                continue
            for arr in (p.weight, p.bias):
                f.write(struct.pack("<I", arr.ndim))
                f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
                f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_params(path, specs: Sequence[LayerSpec]) -> tuple[ParamBlock, dict]:
    """Read a checkpoint back into a ParamBlock over the given specs."""
    specs = tuple(specs)
    with open(path, "rb") as f:
        header = f.readline().decode("ascii").split()
        if len(header) < 2 or header[0] != CKPT_MAGIC:
            raise ValueError(f"{path}: not a {CKPT_MAGIC} file")
        if header[1] != str(CKPT_VERSION):
            raise ValueError(f"{path}: unsupported checkpoint version {header[1]}")
        meta = dict(item.split("=", 1) for item in header[2:])
        layers: list[Optional[DenseParams]] = []
        for spec in specs:
            if spec.kind != DENSE:
                layers.append(None)
                continue
            tensors = []
            for expect in ((spec.in_dim, spec.out_dim), (spec.out_dim,)):
                (ndim,) = struct.unpack("<I", f.read(4))
                shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
                if shape != expect:
                    raise ValueError(f"{path}: tensor shape {shape} != spec {expect}")
                n = int(np.prod(shape))
                data = np.frombuffer(f.read(8 * n), dtype="<f8").reshape(shape)
                tensors.append(data.astype(np.float64))
            layers.append(DenseParams(tensors[0], tensors[1]))
    block = ParamBlock(specs, layers, step=int(meta.pop("step", 0)))
    return block, meta
