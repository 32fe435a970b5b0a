"""Affine projections and a plain (non-peephole) LSTM cell."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ShapeError, Tensor, add, matvec, mul, sigmoid, slice_, tanh

DTYPE = np.float32


@dataclass
class LinearParams:
    weight: Tensor  # [out, in]
    bias: Tensor  # [out]

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    def tensors(self) -> dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias}


@dataclass
class LstmParams:
    """Gate blocks are stacked as (input, forget, candidate, output)."""

    w_ih: Tensor  # [4H, in]
    w_hh: Tensor  # [4H, H]
    bias: Tensor  # [4H]

    @property
    def hidden(self) -> int:
        return self.w_hh.shape[1]

    @property
    def in_dim(self) -> int:
        return self.w_ih.shape[1]

    def tensors(self) -> dict[str, Tensor]:
        return {"w_ih": self.w_ih, "w_hh": self.w_hh, "bias": self.bias}


@dataclass(frozen=True)
class LstmState:
    h: Tensor
    c: Tensor

    @classmethod
    def zeros(cls, hidden: int, batch: int | None = None, dtype=DTYPE) -> "LstmState":
        shape = (hidden,) if batch is None else (batch, hidden)
        return cls(Tensor(np.zeros(shape, dtype=dtype)), Tensor(np.zeros(shape, dtype=dtype)))


def linear_forward(params: LinearParams, x: Tensor) -> Tensor:
    if x.shape[-1] != params.in_dim:
        raise ShapeError(f"linear: expected input of length {params.in_dim}, got shape {x.shape}")
    return add(matvec(params.weight, x), params.bias)


def lstm_step(params: LstmParams, x: Tensor, state: LstmState) -> LstmState:
    H = params.hidden
    if x.shape[-1] != params.in_dim:
        raise ShapeError(f"lstm: expected input of length {params.in_dim}, got shape {x.shape}")
    if state.h.shape[-1] != H or state.c.shape != state.h.shape:
        raise ShapeError(f"lstm: state shapes {state.h.shape}/{state.c.shape} do not match hidden {H}")
    z = add(add(matvec(params.w_ih, x), matvec(params.w_hh, state.h)), params.bias)
    i = sigmoid(slice_(z, 0, H))
    f = sigmoid(slice_(z, H, 2 * H))
    g = tanh(slice_(z, 2 * H, 3 * H))
    o = sigmoid(slice_(z, 3 * H, 4 * H))
    c = add(mul(f, state.c), mul(i, g))
    h = mul(o, tanh(c))
    return LstmState(h, c)


def _rng(seed) -> np.random.Generator:
    return np.random.default_rng(seed)


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    s = np.sqrt(1.0 / fan_in)
    return rng.uniform(-s, s, size=shape).astype(DTYPE)


def init_linear(in_dim: int, out_dim: int, seed=None) -> LinearParams:
    if in_dim <= 0 or out_dim <= 0:
        raise ValueError(f"linear dims must be positive, got {in_dim}x{out_dim}")
    rng = _rng(seed)
    return LinearParams(
        Tensor(_uniform(rng, (out_dim, in_dim), in_dim), requires_grad=True),
        Tensor(_uniform(rng, (out_dim,), in_dim), requires_grad=True),
    )


def init_lstm(in_dim: int, hidden: int, seed=None) -> LstmParams:
    if in_dim <= 0 or hidden <= 0:
        raise ValueError(f"lstm dims must be positive, got in={in_dim} hidden={hidden}")
    rng = _rng(seed)
    w_ih = _uniform(rng, (4 * hidden, in_dim), in_dim)
    w_hh = _uniform(rng, (4 * hidden, hidden), hidden)
    bias = np.zeros(4 * hidden, dtype=DTYPE)
    bias[hidden : 2 * hidden] = 1.0
    return LstmParams(
        Tensor(w_ih, requires_grad=True),
        Tensor(w_hh, requires_grad=True),
        Tensor(bias, requires_grad=True),
    )

