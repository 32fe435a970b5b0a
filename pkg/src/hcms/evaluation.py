"""Evaluation metrics, budget-limited (anytime) prediction and budget sweeps."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dataio import Dataset, FeatureSequence
from .ledger import CostModel, counts_cost, trace_cost
from .metrics import mean_average_precision
from .model import DecisionTrace, Guard, HcmsParams, forward_video


@dataclass
class VideoResult:
    video_id: str
    label: int
    probs: np.ndarray
    trace: DecisionTrace
    gflops: float
    exhausted: bool = False

    @property
    def predicted(self) -> int:
        return int(np.argmax(self.probs))


@dataclass
class Metrics:
    map: float
    accuracy: float
    usage_mid: float
    usage_top: float
    skip_mid: float
    skip_top: float
    gflops: float
    n_videos: int
    records: list[VideoResult] = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {
            "map": self.map,
            "accuracy": self.accuracy,
            "usage_mid": self.usage_mid,
            "usage_top": self.usage_top,
            "skip_ratio_1": self.skip_mid,
            "skip_ratio_2": self.skip_top,
            "gflops": self.gflops,
            "n_videos": self.n_videos,
        }

    def per_class_usage(self, num_classes: int) -> np.ndarray:
        """Mean (mid, top) usage per class, ``[C, 2]``; NaN for absent classes."""
        out = np.full((num_classes, 2), np.nan)
        labels = np.array([r.label for r in self.records])
        u = np.array([[r.trace.usage_mid, r.trace.usage_top] for r in self.records], dtype=float)
        for c in range(num_classes):
            sel = labels == c
            if sel.any():
                out[c] = u[sel].mean(axis=0)
        return out


def summarize(records: list[VideoResult], num_classes: int) -> Metrics:
    if not records:
        raise ValueError("cannot evaluate an empty dataset")
    S = np.stack([r.probs for r in records])
    y = np.array([r.label for r in records])
    acc = float(np.mean(S.argmax(axis=1) == y))
    u_mid = float(np.mean([r.trace.usage_mid for r in records]))
    u_top = float(np.mean([r.trace.usage_top for r in records]))
    return Metrics(
        map=mean_average_precision(S, y, num_classes),
        accuracy=acc,
        usage_mid=u_mid,
        usage_top=u_top,
        skip_mid=1.0 - u_mid,
        skip_top=1.0 - u_top,
        gflops=float(np.mean([r.gflops for r in records])),
        n_videos=len(records),
        records=records,
    )


def evaluate(
    params: HcmsParams,
    dataset: Dataset,
    mode: str = "eval",
    cost_model: CostModel | None = None,
    clamp=(None, None),
    rng: np.random.Generator | None = None,
    workers: int = 1,
) -> Metrics:
    """Noise-free (``eval``) or sampled (``sample``) pass over every video."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    if mode not in ("eval", "sample"):
        raise ValueError(f"evaluation mode must be 'eval' or 'sample', got {mode!r}")
    cm = cost_model or CostModel.from_config(params.config)
    if mode == "sample" and rng is None:
        rng = np.random.default_rng(0)

    def one(v: FeatureSequence) -> VideoResult:
        probs, trace = forward_video(params, v, mode, rng, clamp=clamp)
        return VideoResult(v.video_id, v.label, probs.data.astype(np.float64), trace, trace_cost(cm, trace))

    if workers > 1 and mode == "eval":
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(workers) as pool:
            records = list(pool.map(one, dataset.videos))
    else:
        records = [one(v) for v in dataset.videos]
    return summarize(records, dataset.header.num_classes)


# ---------------------------------------------------------------------------
# budgets


class BudgetGuard(Guard):
    """Tracks spending with the ledger's own counting formula.

    A tier is allowed only if the total after adding it stays within budget.
    With ``reserve_audio`` the gated tiers must also leave enough for base-tier
    steps until the end of the video, so the base tier never stops early.
    """

    def __init__(self, cost_model: CostModel, budget: float, T: int, reserve_audio: bool = False):
        self.cm = cost_model
        self.budget = budget
        self.T = T
        self.reserve_audio = reserve_audio
        self.n = [0, 0, 0]
        self.t = 0
        self.stopped_early = False

    def _cost(self, n) -> float:
        return counts_cost(self.cm, *n)

    def _reserve(self) -> float:
        if not self.reserve_audio:
            return 0.0
        per = self.cm.tier_cost(0) + self.cm.gate_cost(1)
        return per * (self.T - self.t - 1)

    def begin_step(self, t: int) -> bool:
        self.t = t
        trial = [self.n[0] + 1, self.n[1], self.n[2]]
        if self._cost(trial) > self.budget:
            self.stopped_early = True
            return False
        self.n = trial
        return True

    def allow(self, tier: int) -> bool:
        trial = list(self.n)
        trial[tier] += 1
        if self._cost(trial) + self._reserve() > self.budget:
            return False
        self.n = trial
        return True

    @property
    def spent(self) -> float:
        return self._cost(self.n)


@dataclass
class BudgetedPrediction:
    probs: np.ndarray
    steps: int
    gflops: float
    budget: float
    exhausted: bool
    trace: DecisionTrace

    @property
    def predicted(self) -> int:
        return int(np.argmax(self.probs))


def budgeted_predict(
    params: HcmsParams,
    seq: FeatureSequence,
    budget: float,
    cost_model: CostModel | None = None,
    reserve_audio: bool = False,
) -> BudgetedPrediction:
    """Anytime prediction under a per-video GFLOPs budget.

    Gated tiers are vetoed when unaffordable. When even the next base-tier step
    does not fit, the video stops and is classified from the current top-tier
    hidden state. A budget below one base step yields the uniform prior.
    """
    cm = cost_model or CostModel.from_config(params.config)
    guard = BudgetGuard(cm, budget, seq.T, reserve_audio)
    probs, trace = forward_video(params, seq, "eval", guard=guard)
    C = params.config.dims.num_classes
    if trace.steps == 0:
        p = np.full(C, 1.0 / C)
    else:
        p = probs.data.astype(np.float64)
    spent = trace_cost(cm, trace)
    return BudgetedPrediction(p, trace.steps, spent, budget, guard.stopped_early, trace)


@dataclass
class SweepRow:
    budget: float
    metrics: Metrics
    max_spent: float

    def to_dict(self) -> dict:
        b = self.budget
        return {"budget": "inf" if math.isinf(b) else b, **self.metrics.to_dict(), "max_gflops": self.max_spent}


def budget_sweep(
    params: HcmsParams,
    dataset: Dataset,
    budgets,
    cost_model: CostModel | None = None,
    reserve_audio: bool = False,
) -> list[SweepRow]:
    budgets = [float(b) for b in budgets]
    if any(b2 < b1 for b1, b2 in zip(budgets, budgets[1:])):
        raise ValueError("budgets must be sorted ascending")
    if len(dataset) == 0:
        raise ValueError("cannot sweep an empty dataset")
    cm = cost_model or CostModel.from_config(params.config)
    rows = []
    for b in budgets:
        records = []
        for v in dataset.videos:
            bp = budgeted_predict(params, v, b, cm, reserve_audio)
            records.append(VideoResult(v.video_id, v.label, bp.probs, bp.trace, bp.gflops, bp.exhausted))
        m = summarize(records, dataset.header.num_classes)
        rows.append(SweepRow(b, m, max(r.gflops for r in records)))
    return rows


SWEEP_COLUMNS = ("budget", "map", "accuracy", "gflops", "max_gflops", "skip_ratio_1", "skip_ratio_2")


def sweep_table(rows: list[SweepRow]) -> str:
    """Tab-separated table for cost-vs-accuracy plotting."""
    lines = ["\t".join(SWEEP_COLUMNS)]
    for r in rows:
        d = r.to_dict()
        lines.append("\t".join(str(d[c]) if isinstance(d[c], str) else f"{d[c]:.6g}" for c in SWEEP_COLUMNS))
    return "\n".join(lines) + "\n"
