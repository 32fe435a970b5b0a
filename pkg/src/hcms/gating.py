"""Binary use/skip gates trained through a Gumbel-Softmax relaxation.

Index 1 of a gate's two-way output means "compute the modality", index 0
means "skip it".
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ShapeError, Tensor, add, log, matvec, pick, scale, softmax, straight_through
from .layers import DTYPE

MODES = ("train", "soft", "eval", "sample")

# softmax([0, 2])[1] ~= 0.88: new gates start out mostly open
OPEN_BIAS = 2.0


@dataclass
class GateParams:
    weight: Tensor  # [2, context]
    bias: Tensor  # [2]

    @property
    def context_dim(self) -> int:
        return self.weight.shape[1]

    def tensors(self) -> dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias}


@dataclass
class GateDecision:
    raw: Tensor
    probs: Tensor
    relaxed: Tensor | None
    hard: np.ndarray  # int, one per row
    temperature: float
    noise: np.ndarray | None
    value: Tensor  # differentiable "use" indicator fed to the state update and usage loss


def init_gate(context_dim: int, seed=None) -> GateParams:
    rng = np.random.default_rng(seed)
    s = np.sqrt(1.0 / context_dim)
    w = rng.uniform(-s, s, size=(2, context_dim)).astype(DTYPE)
    b = np.array([0.0, OPEN_BIAS], dtype=DTYPE)
    return GateParams(Tensor(w, requires_grad=True), Tensor(b, requires_grad=True))


def gate_scores(params: GateParams, context: Tensor) -> tuple[Tensor, Tensor]:
    if context.shape[-1] != params.context_dim:
        raise ShapeError(f"gate: expected context of length {params.context_dim}, got shape {context.shape}")
    raw = add(matvec(params.weight, context), params.bias)
    return raw, softmax(raw)


def sample_gumbel(rng: np.random.Generator, shape, dtype=DTYPE) -> np.ndarray:
    u = rng.random(shape)
    # rng.random is [0, 1); keep U strictly inside (0, 1)
    u = np.clip(u, np.finfo(np.float64).tiny, 1.0 - 1e-16)
    return (-np.log(-np.log(u))).astype(dtype)


def gumbel_softmax(probs: Tensor, temperature: float, noise: np.ndarray) -> Tensor:
    """softmax((log probs + noise) / temperature) over the last axis."""
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    if np.any(probs.data <= 0):
        raise ValueError("gumbel_softmax: probabilities must be strictly positive (pass softmax output, not raw scores)")
    noise = np.asarray(noise, dtype=probs.dtype)
    if noise.shape != probs.shape:
        raise ShapeError(f"gumbel_softmax: noise shape {noise.shape} != probs shape {probs.shape}")
    logits = add(log(probs), Tensor(noise))
    return softmax(scale(logits, 1.0 / temperature))


def harden(relaxed: Tensor, mode: str = "train") -> tuple[np.ndarray, Tensor]:
    """Discrete decision plus the one-hot tensor carried forward.

    In ``train`` mode the one-hot keeps a straight-through gradient to
    ``relaxed``; otherwise it is a constant.
    """
    if mode == "train":
        onehot = straight_through(relaxed)
    else:
        idx = np.argmax(relaxed.data, axis=-1)
        hard = np.zeros_like(relaxed.data)
        np.put_along_axis(hard, idx[..., None], 1.0, axis=-1)
        onehot = Tensor(hard)
    return np.argmax(onehot.data, axis=-1), onehot


def decide(
    params: GateParams,
    context: Tensor,
    mode: str,
    temperature: float = 1.0,
    noise: np.ndarray | None = None,
) -> GateDecision:
    """Evaluate one gate.

    ``train``: Gumbel noise, hard forward value, straight-through gradient.
    ``soft``: Gumbel noise, relaxed value used as-is (for gradient checks).
    ``eval``: noise-free argmax of the gate probabilities.
    ``sample``: hard Gumbel sample without gradient.
    """
    if mode not in MODES:
        raise ValueError(f"unknown gate mode {mode!r}")
    raw, probs = gate_scores(params, context)
    if mode == "eval":
        hard, onehot = harden(probs, "eval")
        return GateDecision(raw, probs, None, hard, temperature, None, pick(onehot, 1))
    if noise is None:
        raise ValueError(f"gate mode {mode!r} needs Gumbel noise")
    relaxed = gumbel_softmax(probs, temperature, noise)
    if mode == "soft":
        hard = np.argmax(relaxed.data, axis=-1)
        return GateDecision(raw, probs, relaxed, hard, temperature, noise, pick(relaxed, 1))
    hard, onehot = harden(relaxed, "train" if mode == "train" else "eval")
    return GateDecision(raw, probs, relaxed, hard, temperature, noise, pick(onehot, 1))


def temperature_at(epoch: int, schedule: str = "fixed", base: float = 1.0) -> float:
    """Fixed temperature, or the ``max(0.5, 5 * 0.96**epoch)`` anneal."""
    if schedule == "fixed":
        return base
    if schedule == "anneal":
        return max(0.5, 5.0 * 0.96**epoch)
    raise ValueError(f"unknown temperature schedule {schedule!r}")
