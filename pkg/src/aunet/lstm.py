"""Gated recurrent cell for temporal fusion of per-frame features.

One step computes, in order, with [h, x] the concatenation of the previous
output and the new input:

    f = sigmoid(W_f [h, x] + b_f)          forget gate
    i = sigmoid(W_i [h, x] + b_i)          input gate
    c_hat = tanh(W_c [h, x] + b_c)         candidate cell state
    C = f * C_prev + i * c_hat             cell state update
    h = sigmoid(W_o [h, x] + b_o) * tanh(C)

Cells stack 1-3 layers deep; every layer consumes the full output sequence
of the layer below, and all timestep outputs of the top layer are kept so
each frame of a sequence can be scored.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from .tensor import Tensor, concat

GATE_NAMES = ("Wf", "bf", "Wi", "bi", "Wc", "bc", "Wo", "bo")


@dataclass
class LstmLayerParams:
    """The eight gate parameter blocks of one layer.

    Each weight has shape (hidden_len, hidden_len + input_len) and acts on
    the concatenated [previous output, current input] vector; each bias has
    length hidden_len.
    """

    w_f: Tensor
    b_f: Tensor
    w_i: Tensor
    b_i: Tensor
    w_c: Tensor
    b_c: Tensor
    w_o: Tensor
    b_o: Tensor
    input_len: int
    hidden_len: int

    def __post_init__(self):
        expect = (self.hidden_len, self.hidden_len + self.input_len)
        for w in (self.w_f, self.w_i, self.w_c, self.w_o):
            if w.data.shape != expect:
                raise ValueError(f"gate weight shape {w.data.shape} != {expect}")
        for b in (self.b_f, self.b_i, self.b_c, self.b_o):
            if b.data.shape != (self.hidden_len,):
                raise ValueError(f"gate bias shape {b.data.shape} != ({self.hidden_len},)")

    def tensors(self) -> tuple:
        return (self.w_f, self.b_f, self.w_i, self.b_i, self.w_c, self.b_c, self.w_o, self.b_o)


@dataclass
class LstmState:
    """Recurrent (output, cell) pair; zeros at the start of every sequence."""

    h: Tensor
    c: Tensor


@dataclass
class LstmStackConfig:
    depth: int = 1
    hidden_len: int = 32
    sequence_len: int = 24

    def __post_init__(self):
        if self.depth not in (1, 2, 3):
            raise ValueError(f"stack depth must be 1, 2 or 3, got {self.depth}")


def init_layer(input_len: int, hidden_len: int, rng: np.random.Generator,
               std: float = 0.01, forget_bias: float = 1.0) -> LstmLayerParams:
    """Gaussian weights; the forget-gate bias starts positive to keep early memory open."""
    def w():
        return Tensor(rng.normal(0.0, std, size=(hidden_len, hidden_len + input_len)), requires_grad=True)

    def b(fill=0.0):
        return Tensor(np.full(hidden_len, fill), requires_grad=True)

    return LstmLayerParams(w(), b(forget_bias), w(), b(), w(), b(), w(), b(),
                           input_len=input_len, hidden_len=hidden_len)


def zero_state(batch: int, hidden_len: int) -> LstmState:
    return LstmState(Tensor(np.zeros((batch, hidden_len))), Tensor(np.zeros((batch, hidden_len))))


def cell_step(x_t: Tensor, state: LstmState, params: LstmLayerParams) -> LstmState:
    """One gated update; returns the new (h, C) state."""
    if x_t.data.ndim != 2 or x_t.data.shape[1] != params.input_len:
        raise ValueError(f"input shape {x_t.data.shape} incompatible with input_len {params.input_len}")
    if state.h.data.shape != (x_t.data.shape[0], params.hidden_len):
        raise ValueError(f"state shape {state.h.data.shape} incompatible with batch "
                         f"{x_t.data.shape[0]} and hidden_len {params.hidden_len}")
    hx = concat([state.h, x_t], axis=1)
    f = (hx @ params.w_f.T + params.b_f).sigmoid()
    i = (hx @ params.w_i.T + params.b_i).sigmoid()
    c_hat = (hx @ params.w_c.T + params.b_c).tanh()
    c = f * state.c + i * c_hat
    o = (hx @ params.w_o.T + params.b_o).sigmoid()
    h = o * c.tanh()
    return LstmState(h, c)


def run_stack(features: Sequence[Tensor], layers: Sequence[LstmLayerParams]) -> List[Tensor]:
    """Run a feature sequence through stacked layers; returns every top-layer output.

    ``features`` is one (batch, feat) tensor per timestep. Layer l consumes
    the complete output sequence of layer l-1, starting from zero states.
    """
    if len(features) == 0:
        raise ValueError("empty feature sequence")
    if not layers:
        raise ValueError("at least one layer of parameters is required")
    batch = features[0].data.shape[0]
    sequence = list(features)
    for params in layers:
        state = zero_state(batch, params.hidden_len)
        outputs = []
        for x_t in sequence:
            state = cell_step(x_t, state, params)
            outputs.append(state.h)
        sequence = outputs
    return sequence
