"""Hierarchical conditional modality selection over three stacked LSTMs.

Tier 1 (audio by default) runs every step. Tier 2 and tier 3 each own a gate
that decides whether to extract and consume their modality. A skipped tier
carries its state and has the leading units of its hidden vector overwritten
by the tier below, so the top tier always summarizes everything seen.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import Tensor, add, concat, log, mix, mul, pick, scale, slice_, softmax, sqdiff, sum_
from .dataio import MODALITIES, FeatureSequence
from .gating import GateDecision, GateParams, decide, init_gate, sample_gumbel
from .layers import DTYPE, LinearParams, LstmParams, LstmState, init_linear, init_lstm, linear_forward, lstm_step

TIER_NAMES = ("base", "mid", "top")


class FeatureError(ValueError):
    pass


@dataclass(frozen=True)
class ModelDims:
    """Raw and projected feature sizes per modality, hidden size per tier."""

    raw: tuple[int, int, int]
    proj: tuple[int, int, int]
    hidden: tuple[int, int, int]
    num_classes: int

    def raw_of(self, modality: str) -> int:
        return self.raw[MODALITIES.index(modality)]

    def proj_of(self, modality: str) -> int:
        return self.proj[MODALITIES.index(modality)]


PRESETS = {
    "full": dict(raw=(1024, 1536, 2304), proj=(512, 1024, 2048), hidden=(128, 512, 2048)),
    "desk": dict(raw=(16, 24, 32), proj=(16, 32, 64), hidden=(16, 32, 64)),
}


def preset_dims(name: str, num_classes: int, raw: tuple[int, int, int] | None = None) -> ModelDims:
    p = dict(PRESETS[name])
    if raw is not None:
        p["raw"] = tuple(raw)
    return ModelDims(num_classes=num_classes, **p)


@dataclass(frozen=True)
class ModalityOrder:
    tiers: tuple[str, str, str] = MODALITIES

    def __post_init__(self):
        if sorted(self.tiers) != sorted(MODALITIES):
            raise ValueError(f"modality order must permute {MODALITIES}, got {self.tiers}")
        object.__setattr__(self, "tiers", tuple(self.tiers))

    @classmethod
    def parse(cls, spec) -> "ModalityOrder":
        if isinstance(spec, ModalityOrder):
            return spec
        if isinstance(spec, str):
            short = {"A": "audio", "I": "appearance", "M": "motion"}
            spec = [short.get(s.strip(), s.strip()) for s in spec.replace("->", ",").split(",")]
        return cls(tuple(spec))

    def short(self) -> str:
        return "".join({"audio": "A", "appearance": "I", "motion": "M"}[m] for m in self.tiers)


@dataclass(frozen=True)
class ModelConfig:
    dims: ModelDims
    order: ModalityOrder = ModalityOrder()
    override_cell: bool = False

    def tier_proj(self, tier: int) -> int:
        return self.dims.proj_of(self.order.tiers[tier])

    def lstm_in(self, tier: int) -> int:
        return sum(self.tier_proj(k) for k in range(tier + 1))

    def gate_context(self, tier: int) -> int:
        # mid gate sees [x1; h2; c2], top gate sees [x1; x2; h3; c3]
        return sum(self.tier_proj(k) for k in range(tier)) + 2 * self.dims.hidden[tier]


def set_modality_order(config: ModelConfig, order) -> ModelConfig:
    """Same mechanics, different modality-to-tier assignment.

    The usage targets keep their tier meaning: gamma_1 constrains the middle
    tier, gamma_2 the top tier.
    """
    return replace(config, order=ModalityOrder.parse(order))


@dataclass
class HcmsParams:
    config: ModelConfig
    proj: dict[str, LinearParams]  # keyed by modality
    lstm: list[LstmParams]  # per tier
    gates: list[GateParams]  # mid, top
    classifier: LinearParams

    def named(self) -> dict[str, Tensor]:
        out = {}
        for m in MODALITIES:
            for k, t in self.proj[m].tensors().items():
                out[f"proj.{m}.{k}"] = t
        for i, p in enumerate(self.lstm):
            for k, t in p.tensors().items():
                out[f"lstm.{TIER_NAMES[i]}.{k}"] = t
        for i, g in enumerate(self.gates):
            for k, t in g.tensors().items():
                out[f"gate.{TIER_NAMES[i + 1]}.{k}"] = t
        for k, t in self.classifier.tensors().items():
            out[f"classifier.{k}"] = t
        return out

    def tensors(self) -> list[Tensor]:
        return list(self.named().values())

    def astype(self, dtype) -> "HcmsParams":
        """Copy with every tensor cast, e.g. to float64 for gradient checks."""
        return params_from_arrays(self.config, {k: t.data.astype(dtype) for k, t in self.named().items()})

    def copy(self) -> "HcmsParams":
        return params_from_arrays(self.config, {k: t.data.copy() for k, t in self.named().items()})


def init_params(config: ModelConfig, seed=0) -> HcmsParams:
    rng = np.random.default_rng(seed)
    d = config.dims
    proj = {m: init_linear(d.raw_of(m), d.proj_of(m), rng) for m in MODALITIES}
    lstm = [init_lstm(config.lstm_in(k), d.hidden[k], rng) for k in range(3)]
    gates = [init_gate(config.gate_context(k), rng) for k in (1, 2)]
    classifier = init_linear(d.hidden[2], d.num_classes, rng)
    return HcmsParams(config, proj, lstm, gates, classifier)


def params_from_arrays(config: ModelConfig, arrays: dict[str, np.ndarray]) -> HcmsParams:
    template = init_params(config, seed=0)
    named = template.named()
    missing = set(named) - set(arrays)
    if missing:
        raise KeyError(f"missing parameters: {sorted(missing)}")
    for k, t in named.items():
        a = np.asarray(arrays[k])
        if a.shape != t.shape:
            raise ValueError(f"parameter {k}: shape {a.shape} does not match {t.shape}")
        t.data = a.copy()
    return template


# ---------------------------------------------------------------------------
# feature access


class FeatureAccess:
    """Per-step feature reads with a counter per modality.

    Wraps one video (arrays ``[T, d]``) or a batch (``[B, T, d]``).
    """

    def __init__(self, streams: dict[str, np.ndarray], video_ids: list[str], dtype=DTYPE):
        self.streams = streams
        self.video_ids = video_ids
        self.dtype = dtype
        self.reads = {m: 0 for m in MODALITIES}
        self.batched = streams[MODALITIES[0]].ndim == 3

    @classmethod
    def single(cls, seq: FeatureSequence, dtype=DTYPE) -> "FeatureAccess":
        return cls({m: seq.stream(m) for m in MODALITIES}, [seq.video_id], dtype)

    @classmethod
    def batch(cls, seqs: list[FeatureSequence], dtype=DTYPE) -> "FeatureAccess":
        if len({s.T for s in seqs}) != 1:
            raise ValueError("batched videos must share the same length")
        return cls({m: np.stack([s.stream(m) for s in seqs]) for m in MODALITIES}, [s.video_id for s in seqs], dtype)

    @property
    def T(self) -> int:
        return self.streams[MODALITIES[0]].shape[-2]

    @property
    def batch_size(self) -> int | None:
        return self.streams[MODALITIES[0]].shape[0] if self.batched else None

    def read(self, modality: str, t: int) -> Tensor:
        x = self.streams[modality][..., t, :]
        if not np.all(np.isfinite(x)):
            rows = np.where(~np.isfinite(x).all(axis=-1))[0] if self.batched else [0]
            vid = self.video_ids[int(rows[0])]
            raise FeatureError(f"non-finite {modality} feature in video {vid!r} at step {t}")
        self.reads[modality] += 1
        return Tensor(np.asarray(x, dtype=self.dtype))


# ---------------------------------------------------------------------------
# per-step update


@dataclass(frozen=True)
class StepState:
    tiers: tuple[LstmState, LstmState, LstmState]
    t: int = 0

    @classmethod
    def zeros(cls, config: ModelConfig, batch: int | None = None, dtype=DTYPE) -> "StepState":
        return cls(tuple(LstmState.zeros(h, batch, dtype) for h in config.dims.hidden), 0)


@dataclass
class StepDecisions:
    mid: GateDecision | None
    top: GateDecision | None
    g_mid: Tensor  # effective use indicator (differentiable in train/soft modes)
    g_top: Tensor
    bits: tuple[np.ndarray, np.ndarray]


def _const(value: float, like_shape, dtype) -> Tensor:
    return Tensor(np.full(like_shape, value, dtype=dtype))


def _carry(prev: LstmState, lower: LstmState, override_cell: bool) -> LstmState:
    """Keep ``prev``; overwrite the leading hidden units with the lower tier's."""
    d_up = prev.h.shape[-1]
    k = min(lower.h.shape[-1], d_up)

    def splice(upper: Tensor, src: Tensor) -> Tensor:
        head = src if src.shape[-1] == k else slice_(src, 0, k)
        return head if k == d_up else concat(head, slice_(upper, k, d_up))

    h = splice(prev.h, lower.h)
    c = splice(prev.c, lower.c) if override_cell else prev.c
    return LstmState(h, c)


class Guard:
    """Budget hook: ``begin_step`` may stop the video, ``allow`` may veto a tier."""

    def begin_step(self, t: int) -> bool:  # pragma: no cover - interface
        return True

    def allow(self, tier: int) -> bool:  # pragma: no cover - interface
        return True


def hcms_step(
    params: HcmsParams,
    state: StepState,
    feats: FeatureAccess,
    mode: str = "eval",
    noise: np.ndarray | None = None,
    temperature: float = 1.0,
    clamp: tuple[int | None, int | None] = (None, None),
    guard: Guard | None = None,
) -> tuple[StepState, StepDecisions]:
    cfg = params.config
    tiers = cfg.order.tiers
    t = state.t
    dtype = feats.dtype
    prev1, prev2, prev3 = state.tiers
    lead = prev1.h.shape[:-1]
    soft = mode in ("train", "soft")
    if soft and guard is not None:
        raise ValueError("budget guards only apply to evaluation modes")

    x1 = linear_forward(params.proj[tiers[0]], feats.read(tiers[0], t))
    s1 = lstm_step(params.lstm[0], x1, prev1)
    carry2 = _carry(prev2, s1, cfg.override_cell)

    # middle tier
    dec2 = None
    if clamp[0] is None:
        ctx = concat(x1, prev2.h, prev2.c)
        dec2 = decide(params.gates[0], ctx, mode, temperature, None if noise is None else noise[0])
        g2, bit2 = dec2.value, np.asarray(dec2.hard)
    else:
        g2, bit2 = _const(clamp[0], lead, dtype), np.full(lead, int(clamp[0]))

    x2 = None
    if not soft:
        use2 = bool(bit2)
        if use2 and guard is not None and not guard.allow(1):
            use2 = False
            g2, bit2 = _const(0.0, lead, dtype), np.asarray(0)
        if use2:
            x2 = linear_forward(params.proj[tiers[1]], feats.read(tiers[1], t))
            s2 = lstm_step(params.lstm[1], concat(x1, x2), prev2)
        else:
            s2 = carry2
    elif clamp[0] == 0:
        s2 = carry2
    else:
        x2 = linear_forward(params.proj[tiers[1]], feats.read(tiers[1], t))
        new2 = lstm_step(params.lstm[1], concat(x1, x2), prev2)
        if clamp[0] == 1:
            s2 = new2
        else:
            s2 = LstmState(mix(g2, new2.h, carry2.h), mix(g2, new2.c, carry2.c))

    # top tier; never evaluated when the middle tier was skipped
    carry3 = _carry(prev3, s2, cfg.override_cell)
    dec3 = None
    if x2 is None:
        g3, bit3 = _const(0.0, lead, dtype), np.zeros(lead, dtype=int)
        s3 = carry3
    else:
        if clamp[1] is None:
            ctx = concat(x1, x2, prev3.h, prev3.c)
            dec3 = decide(params.gates[1], ctx, mode, temperature, None if noise is None else noise[1])
            g3_own, bit3 = dec3.value, np.asarray(dec3.hard)
        else:
            g3_own, bit3 = _const(clamp[1], lead, dtype), np.full(lead, int(clamp[1]))
        if not soft:
            use3 = bool(bit3)
            if use3 and guard is not None and not guard.allow(2):
                use3 = False
                g3_own, bit3 = _const(0.0, lead, dtype), np.asarray(0)
            g3 = g3_own
            if use3:
                x3 = linear_forward(params.proj[tiers[2]], feats.read(tiers[2], t))
                s3 = lstm_step(params.lstm[2], concat(x1, x2, x3), prev3)
            else:
                s3 = carry3
        else:
            g3 = g3_own if clamp[0] == 1 else mul(g2, g3_own)
            bit3 = bit3 * bit2
            if clamp[1] == 0:
                s3 = carry3
            else:
                x3 = linear_forward(params.proj[tiers[2]], feats.read(tiers[2], t))
                new3 = lstm_step(params.lstm[2], concat(x1, x2, x3), prev3)
                if clamp[1] == 1 and clamp[0] == 1:
                    s3 = new3
                else:
                    s3 = LstmState(mix(g3, new3.h, carry3.h), mix(g3, new3.c, carry3.c))

    new_state = StepState((s1, s2, s3), t + 1)
    bits = (np.asarray(bit2).astype(int), np.asarray(bit3).astype(int))
    return new_state, StepDecisions(dec2, dec3, g2, g3, bits)


# ---------------------------------------------------------------------------
# whole video


@dataclass
class DecisionTrace:
    """Per-step gate outcomes. Arrays are ``[steps]`` or ``[steps, B]``."""

    bits_mid: np.ndarray
    bits_top: np.ndarray
    probs_mid: np.ndarray  # P(use); NaN where the gate was not evaluated
    probs_top: np.ndarray
    relaxed_mid: np.ndarray  # relaxed P(use); NaN in eval mode or when not evaluated
    relaxed_top: np.ndarray
    T: int
    g_mid: list[Tensor] = field(default_factory=list, repr=False)
    g_top: list[Tensor] = field(default_factory=list, repr=False)
    order: ModalityOrder = ModalityOrder()
    reads: dict = field(default_factory=dict)

    @property
    def steps(self) -> int:
        return len(self.bits_mid)

    @property
    def usage_mid(self):
        return self.bits_mid.sum(axis=0) / self.T

    @property
    def usage_top(self):
        return self.bits_top.sum(axis=0) / self.T

    def usage_tensors(self) -> tuple[Tensor, Tensor]:
        """Differentiable usage fractions (1/T) * sum_t G_t for both gated tiers."""
        return scale(_total(self.g_mid), 1.0 / self.T), scale(_total(self.g_top), 1.0 / self.T)

    def row(self, b: int) -> "DecisionTrace":
        """The trace of one video from a batched trace."""
        return DecisionTrace(
            self.bits_mid[:, b],
            self.bits_top[:, b],
            self.probs_mid[:, b],
            self.probs_top[:, b],
            self.relaxed_mid[:, b],
            self.relaxed_top[:, b],
            self.T,
            order=self.order,
        )


def _total(ts: list[Tensor]) -> Tensor:
    acc = ts[0]
    for t in ts[1:]:
        acc = add(acc, t)
    return acc


def _use_prob(dec: GateDecision | None, lead, attr: str) -> np.ndarray:
    if dec is None:
        return np.full(lead, np.nan)
    v = getattr(dec, attr)
    if v is None:
        return np.full(lead, np.nan)
    return np.asarray(v.data[..., 1], dtype=np.float64)


def draw_noise(rng: np.random.Generator, T: int, batch: int | None = None, dtype=DTYPE) -> np.ndarray:
    """Gumbel noise for every gate of a video: shape ``[T, 2, (B,) 2]``."""
    shape = (T, 2, 2) if batch is None else (T, 2, batch, 2)
    return sample_gumbel(rng, shape, dtype)


def forward_video(
    params: HcmsParams,
    video,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
    temperature: float = 1.0,
    clamp: tuple[int | None, int | None] = (None, None),
    noise: np.ndarray | None = None,
    guard: Guard | None = None,
) -> tuple[Tensor, DecisionTrace]:
    """Run every step from zero states and classify from the top-tier hidden state.

    ``video`` is a :class:`FeatureSequence`, a list of them (batched), or a
    ready :class:`FeatureAccess`. With a guard, the loop can stop early; the
    returned trace then has fewer than ``T`` steps.
    """
    if isinstance(video, FeatureAccess):
        feats = video
    elif isinstance(video, FeatureSequence):
        feats = FeatureAccess.single(video, _dtype_of(params))
    else:
        feats = FeatureAccess.batch(list(video), _dtype_of(params))
    T = feats.T
    if T < 1:
        raise ValueError("cannot run an empty sequence")
    B = feats.batch_size
    needs_noise = mode in ("train", "soft", "sample")
    if needs_noise and noise is None:
        if rng is None:
            raise ValueError(f"mode {mode!r} needs an rng or explicit noise")
        noise = draw_noise(rng, T, B, feats.dtype)

    state = StepState.zeros(params.config, B, feats.dtype)
    lead = () if B is None else (B,)
    rec = {k: [] for k in ("bm", "bt", "pm", "pt", "rm", "rt")}
    g_mid, g_top = [], []
    for t in range(T):
        if guard is not None and not guard.begin_step(t):
            break
        state, d = hcms_step(
            params, state, feats, mode, None if noise is None else noise[t], temperature, clamp, guard
        )
        rec["bm"].append(d.bits[0])
        rec["bt"].append(d.bits[1])
        rec["pm"].append(_use_prob(d.mid, lead, "probs"))
        rec["pt"].append(_use_prob(d.top, lead, "probs"))
        rec["rm"].append(_use_prob(d.mid, lead, "relaxed"))
        rec["rt"].append(_use_prob(d.top, lead, "relaxed"))
        g_mid.append(d.g_mid)
        g_top.append(d.g_top)

    def arr(k, dt):
        if not rec[k]:
            return np.zeros((0,) + lead, dtype=dt)
        return np.stack([np.broadcast_to(v, lead) for v in rec[k]]).astype(dt)

    trace = DecisionTrace(
        arr("bm", int),
        arr("bt", int),
        arr("pm", float),
        arr("pt", float),
        arr("rm", float),
        arr("rt", float),
        T,
        g_mid,
        g_top,
        params.config.order,
        dict(feats.reads),
    )
    probs = softmax(linear_forward(params.classifier, state.tiers[2].h))
    return probs, trace


def _dtype_of(params: HcmsParams):
    return params.classifier.weight.dtype


# ---------------------------------------------------------------------------
# objective


@dataclass
class LossBreakdown:
    ce: float
    usage: float
    total: float
    lam: float
    gamma1: float
    gamma2: float
    tensor: Tensor = field(repr=False)  # the differentiable total, averaged over the batch


def compute_loss(
    probs: Tensor, label, trace: DecisionTrace, gamma1: float, gamma2: float, lam: float
) -> LossBreakdown:
    """Cross-entropy on the final prediction plus lambda times the usage penalty.

    For a batch, every term is averaged over videos.
    """
    C = probs.shape[-1]
    labels = np.asarray(label, dtype=np.int64)
    if np.any(labels < 0) or np.any(labels >= C):
        raise ValueError(f"label {label} outside [0, {C})")
    ce = scale(log(pick(probs, labels)), -1.0)
    u_mid, u_top = trace.usage_tensors()
    dtype = probs.dtype
    usage = add(
        sqdiff(u_mid, Tensor(np.full(u_mid.shape, gamma1, dtype=dtype))),
        sqdiff(u_top, Tensor(np.full(u_top.shape, gamma2, dtype=dtype))),
    )
    total = add(ce, scale(usage, lam))
    n = 1 if total.data.ndim == 0 else total.shape[0]
    mean_total = scale(sum_(total), 1.0 / n)
    ce_v = float(np.mean(ce.data, dtype=np.float64))
    usage_v = float(np.mean(usage.data, dtype=np.float64))
    return LossBreakdown(ce_v, usage_v, ce_v + lam * usage_v, lam, gamma1, gamma2, mean_total)


def predict(params: HcmsParams, seq: FeatureSequence) -> tuple[np.ndarray, DecisionTrace]:
    probs, trace = forward_video(params, seq, "eval")
    return probs.data.astype(np.float64), trace
