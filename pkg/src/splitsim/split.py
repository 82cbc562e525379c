"""Client/server model halves around a cut index, and the two exchange
objects that cross it: smashed data going up, cut gradients coming back.

Labels travel with the smashed batch (single-cut, label-sharing setup). The
client keeps its own activation tape between the forward that produced a
smashed batch and the backward that consumes the returned gradient; each tape
is good for exactly one backward.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import nn

BROADCAST_CLIENT_ID = -1  # marks an averaged cut-gradient template (SGLR)


class CutDimensionError(nn.ShapeError):
    """Feature width does not match the cut dimension."""


class FrozenModelError(RuntimeError):
    """Operation requires the opposite freeze state."""


class StaleTapeError(RuntimeError):
    """Client tape already consumed (or never produced) for this backward."""


@dataclass(frozen=True)
class SplitSpec:
    """A full layer list plus the index it is cut at.

    The cut sits after layer ``cut_index - 1``; both halves must be
    non-empty. Cuts are legal at any layer boundary; the stock MLPs cut at
    block boundaries (even indices of :func:`splitsim.nn.mlp_specs`).
    """

    layers: tuple[nn.LayerSpec, ...]
    cut_index: int

    def __post_init__(self):
        nn.validate_specs(self.layers)
        if not 1 <= self.cut_index <= len(self.layers) - 1:
            raise nn.ShapeError(
                f"cut_index must be in [1, {len(self.layers) - 1}], "
                f"got {self.cut_index}")

    @property
    def client_layers(self) -> tuple[nn.LayerSpec, ...]:
        return self.layers[: self.cut_index]

    @property
    def server_layers(self) -> tuple[nn.LayerSpec, ...]:
        return self.layers[self.cut_index:]

    @property
    def cut_dim(self) -> int:
        for spec in reversed(self.client_layers):
            if spec.kind == nn.DENSE:
                return spec.out_dim
        for spec in self.server_layers:
            if spec.kind == nn.DENSE:
                return spec.in_dim
        raise nn.ShapeError("cannot infer cut dimension (no dense layer)")


def split_params(full: nn.ParamBlock, spec: SplitSpec) -> tuple[nn.ParamBlock, nn.ParamBlock]:
    """Copy a full net's parameters into independent client/server halves."""
    if full.specs != spec.layers:
        raise nn.TapeError("ParamBlock was built over different layer specs")
    k = spec.cut_index
    client = nn.ParamBlock(spec.client_layers,
                           [p.copy() if p is not None else None for p in full.layers[:k]],
                           full.step)
    server = nn.ParamBlock(spec.server_layers,
                           [p.copy() if p is not None else None for p in full.layers[k:]],
                           full.step)
    return client, server


def merge_params(client: nn.ParamBlock, server: nn.ParamBlock, spec: SplitSpec) -> nn.ParamBlock:
    """Stitch both halves back into a full-net ParamBlock (copies)."""
    if client.specs != spec.client_layers or server.specs != spec.server_layers:
        raise nn.TapeError("halves do not match the SplitSpec")
    layers = [p.copy() if p is not None else None
              for p in list(client.layers) + list(server.layers)]
    return nn.ParamBlock(spec.layers, layers, max(client.step, server.step))


# ---------------------------------------------------------------------------
# Models and exchange objects
# ---------------------------------------------------------------------------

@dataclass
class ClientModel:
    client_id: int
    params: nn.ParamBlock
    _pending_tape: Optional[nn.Tape] = field(default=None, repr=False)
    _tape_serial: int = field(default=0, repr=False)


@dataclass
class ServerModel:
    params: nn.ParamBlock
    frozen: bool = False


@dataclass
class SmashedBatch:
    client_id: int
    features: np.ndarray   # [B, cut_dim]
    labels: np.ndarray
    tape_handle: int       # serial of the client-side tape this batch came from

    @property
    def batch_size(self) -> int:
        return self.features.shape[0]


@dataclass
class CutGradientBatch:
    client_id: int
    d_features: np.ndarray  # [B, cut_dim], same shape as the originating batch


# ---------------------------------------------------------------------------
# Protocol operations
# ---------------------------------------------------------------------------

def client_forward(model: ClientModel, x: np.ndarray, y: np.ndarray) -> SmashedBatch:
    """Extract features for one mini-batch; labels ride along."""
    if x.shape[0] < 1:
        raise nn.ShapeError("empty batch: client cannot fill a mini-batch")
    features, tape = nn.forward(model.params, model.params.specs, x)
    if not np.all(np.isfinite(features)):
        raise nn.NumericError(f"client {model.client_id}: non-finite smashed data")
    model._tape_serial += 1
    model._pending_tape = tape
    return SmashedBatch(model.client_id, features, y, model._tape_serial)


def server_forward_loss(server: ServerModel, smashed: SmashedBatch,
                        loss_kind: str) -> tuple[float, nn.Tape]:
    specs = server.params.specs
    expected = next((s.in_dim for s in specs if s.kind == nn.DENSE), None)
    if expected is not None and smashed.features.shape[1] != expected:
        raise CutDimensionError(
            f"smashed features have width {smashed.features.shape[1]}, "
            f"server cut dim is {expected}")
    output, tape = nn.forward(server.params, specs, smashed.features)
    loss, _ = nn.loss_and_grad(loss_kind, output, smashed.labels)
    return loss, tape


def server_forward_backward(server: ServerModel, smashed: SmashedBatch,
                            loss_kind: str) -> tuple[float, nn.Gradients, CutGradientBatch]:
    """One end-to-end server pass: loss, server parameter gradients, and the
    cut gradient for the client, all from the same backward flow."""
    loss, tape = server_forward_loss(server, smashed, loss_kind)
    _, d_output = nn.loss_and_grad(loss_kind, tape.output, smashed.labels)
    grads, d_features = nn.backward(tape, d_output)
    return loss, grads, CutGradientBatch(smashed.client_id, d_features)


def frozen_service(server: ServerModel, smashed: SmashedBatch,
                   loss_kind: str) -> tuple[float, CutGradientBatch]:
    """One gradient-service pass on a frozen server: loss plus cut gradient.

    Parameter gradients are computed and discarded; the server block is
    byte-identical before and after.
    """
    if not server.frozen:
        raise FrozenModelError(
            "gradient service requires a frozen server model")
    loss, _, cut_grad = server_forward_backward(server, smashed, loss_kind)
    return loss, cut_grad


def server_grad_for_client(server: ServerModel, smashed: SmashedBatch,
                           loss_kind: str) -> CutGradientBatch:
    """Cut gradient under the server's current (frozen) parameters."""
    return frozen_service(server, smashed, loss_kind)[1]


def server_apply_update(server: ServerModel, grads: nn.Gradients,
                        optimizer: str, lr: float) -> None:
    if server.frozen:
        raise FrozenModelError("cannot update a frozen server model")
    nn.apply_update(server.params, grads, optimizer, lr)


def client_backward_update(model: ClientModel, cut_grad: CutGradientBatch,
                           optimizer: str, lr: float) -> ClientModel:
    """Chain the cut gradient through the client's retained tape and step.

    Each smashed batch may be backwarded exactly once; a second attempt hits
    a stale tape.
    """
    tape = model._pending_tape
    if tape is None:
        raise StaleTapeError(
            f"client {model.client_id}: no pending tape (already consumed?)")
    if cut_grad.d_features.shape != tape.output.shape:
        raise nn.ShapeError(
            f"cut gradient shape {cut_grad.d_features.shape} != smashed "
            f"features shape {tape.output.shape}")
    model._pending_tape = None
    grads, _ = nn.backward(tape, cut_grad.d_features)
    nn.apply_update(model.params, grads, optimizer, lr)
    return model


def discard_pending_tape(model: ClientModel) -> None:
    """Round boundary: tapes never survive into the next round."""
    model._pending_tape = None


def composed_forward(client_params: nn.ParamBlock, server_params: nn.ParamBlock,
                     x: np.ndarray) -> np.ndarray:
    """Full-model output via the two halves (evaluation path)."""
    h, _ = nn.forward(client_params, client_params.specs, x)
    out, _ = nn.forward(server_params, server_params.specs, h)
    return out
