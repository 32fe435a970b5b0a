"""Declared GFLOPs accounting for decision traces.

Costs are what the feature backbones would have spent, not a measurement.
Recurrent-head costs (projections, LSTMs, gates) can be added on top; they
are derived from layer sizes with 2*in*out for an affine map and
8*hidden*(hidden + in) for an LSTM step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataio import DEFAULT_BACKBONE_GFLOPS, MODALITIES

GIGA = 1e9

# (modalities, views) -> GFLOPs reported for the early-fusion LSTM baselines
REPORTED_GFLOPS = {
    ("audio",): {10: 0.8, 128: 10.3},
    ("appearance",): {10: 10.1, 128: 129.7},
    ("motion",): {10: 657.5, 128: 8416.4},
    ("audio", "appearance"): {10: 10.8, 128: 138.6},
    ("audio", "motion"): {10: 658.0, 128: 8421.9},
    ("appearance", "motion"): {10: 667.2, 128: 8539.9},
    ("audio", "appearance", "motion"): {10: 667.9, 128: 8549.4},
}

# feature and projection sizes of the full-scale model; the early-fusion
# baselines are modelled with one LSTM of BASELINE_HIDDEN units over the
# concatenated projections
FULL_RAW = {"audio": 1024, "appearance": 1536, "motion": 2304}
FULL_PROJ = {"audio": 512, "appearance": 1024, "motion": 2048}
BASELINE_HIDDEN = 512


def affine_flops(n_in: int, n_out: int) -> float:
    return 2.0 * n_in * n_out


def lstm_flops(n_in: int, hidden: int) -> float:
    return 8.0 * hidden * (hidden + n_in)


@dataclass(frozen=True)
class CostModel:
    backbone: dict = field(default_factory=lambda: dict(DEFAULT_BACKBONE_GFLOPS))
    include_heads: bool = False
    # per tier: GFLOPs of projection + LSTM when the tier is updated
    head_update: tuple[float, float, float] = (0.0, 0.0, 0.0)
    # per gated tier (mid, top): GFLOPs of evaluating the gate
    head_gate: tuple[float, float] = (0.0, 0.0)
    order: tuple[str, str, str] = MODALITIES

    def __post_init__(self):
        if any(v < 0 for v in self.backbone.values()):
            raise ValueError("backbone costs must be non-negative")
        if sorted(self.backbone) != sorted(MODALITIES):
            raise ValueError(f"backbone costs must name {MODALITIES}")

    @classmethod
    def from_config(cls, config, include_heads: bool = False, backbone: dict | None = None) -> "CostModel":
        """Cost model for a :class:`~hcms.model.ModelConfig`, heads sized from its dims."""
        order = config.order.tiers
        d = config.dims
        update = tuple(
            (affine_flops(d.raw_of(order[k]), config.tier_proj(k)) + lstm_flops(config.lstm_in(k), d.hidden[k])) / GIGA
            for k in range(3)
        )
        gate = tuple(affine_flops(config.gate_context(k), 2) / GIGA for k in (1, 2))
        return cls(
            backbone=dict(backbone or DEFAULT_BACKBONE_GFLOPS),
            include_heads=include_heads,
            head_update=update,
            head_gate=gate,
            order=tuple(order),
        )

    def tier_cost(self, tier: int) -> float:
        """Cost of running tier ``tier`` (backbone plus its head if enabled)."""
        c = self.backbone[self.order[tier]]
        if self.include_heads:
            c += self.head_update[tier]
        return c

    def gate_cost(self, tier: int) -> float:
        return self.head_gate[tier - 1] if self.include_heads else 0.0


def step_cost(model: CostModel, decisions: tuple[int, int]) -> float:
    g_mid, g_top = int(decisions[0]), int(decisions[1])
    if g_top and not g_mid:
        raise ValueError("top tier active while middle tier skipped")
    cost = model.tier_cost(0) + model.gate_cost(1)
    if g_mid:
        cost += model.tier_cost(1) + model.gate_cost(2)
    if g_top:
        cost += model.tier_cost(2)
    return cost


def trace_cost(model: CostModel, trace) -> float:
    """Total GFLOPs of a trace (anything with ``bits_mid``/``bits_top``, or a list of bit pairs)."""
    if hasattr(trace, "bits_mid"):
        mid, top = np.asarray(trace.bits_mid, dtype=int), np.asarray(trace.bits_top, dtype=int)
    else:
        pairs = np.asarray(trace, dtype=int).reshape(-1, 2)
        mid, top = pairs[:, 0], pairs[:, 1]
    if np.any(top > mid):
        raise ValueError("top tier active while middle tier skipped")
    return counts_cost(model, len(mid), int(mid.sum()), int(top.sum()))


def counts_cost(model: CostModel, steps: int, n_mid: int, n_top: int) -> float:
    """Cost of ``steps`` base-tier steps of which ``n_mid``/``n_top`` ran the gated tiers."""
    return (
        steps * (model.tier_cost(0) + model.gate_cost(1))
        + n_mid * (model.tier_cost(1) + model.gate_cost(2))
        + n_top * model.tier_cost(2)
    )


def cumulative_costs(model: CostModel, trace) -> list[float]:
    out, acc = [], 0.0
    for m, t in zip(np.asarray(trace.bits_mid), np.asarray(trace.bits_top)):
        acc += step_cost(model, (m, t))
        out.append(acc)
    return out


def baseline_head_gflops(combo) -> float:
    """Per-step head cost of an early-fusion LSTM baseline at full scale."""
    proj = sum(affine_flops(FULL_RAW[m], FULL_PROJ[m]) for m in combo)
    lstm = lstm_flops(sum(FULL_PROJ[m] for m in combo), BASELINE_HIDDEN)
    return (proj + lstm) / GIGA


@dataclass(frozen=True)
class TableEntry:
    combo: tuple[str, ...]
    views: int
    computed: float
    reported: float

    @property
    def abs_error(self) -> float:
        return abs(self.computed - self.reported)

    @property
    def rel_error(self) -> float:
        return self.abs_error / self.reported

    @property
    def label(self) -> str:
        return " + ".join({"audio": "A", "appearance": "I", "motion": "M"}[m] for m in self.combo)


def reference_table(model: CostModel | None = None, heads: bool | None = None) -> list[TableEntry]:
    """Recompute the 14 single/multi-modality baseline costs at 10 and 128 views.

    ``heads`` defaults to the model's ``include_heads`` setting; when on, the
    baseline head cost from :func:`baseline_head_gflops` is added per view.
    """
    model = model or CostModel()
    heads = model.include_heads if heads is None else heads
    rows = []
    for combo, reported in REPORTED_GFLOPS.items():
        per_view = sum(model.backbone[m] for m in combo)
        if heads:
            per_view += baseline_head_gflops(combo)
        for views in (10, 128):
            rows.append(TableEntry(combo, views, per_view * views, reported[views]))
    return rows
