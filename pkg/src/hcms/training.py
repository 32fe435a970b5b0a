"""Mini-batch training of the gated model with Adam."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import Tape
from .dataio import Dataset
from .gating import temperature_at
from .model import HcmsParams, ModelConfig, compute_loss, forward_video, init_params

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    lr: float = 1e-4
    lr_decay: float = 0.92
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    gamma1: float = 0.75
    gamma2: float = 0.96
    lam: float = 2.0
    tau_schedule: str = "fixed"
    tau: float = 1.0
    seed: int = 0
    clamp: tuple = (None, None)
    eval_every: int = 1

    def __post_init__(self):
        if not (0 <= self.gamma1 <= 1 and 0 <= self.gamma2 <= 1):
            raise ValueError("gamma1 and gamma2 must lie in [0, 1]")
        if self.lam < 0:
            raise ValueError("lam must be non-negative")
        self.clamp = tuple(self.clamp)

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.lr_decay**epoch

    def to_dict(self) -> dict:
        d = asdict(self)
        d["clamp"] = list(self.clamp)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


class Adam:
    def __init__(self, params: list, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self, grads: list[np.ndarray], lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - update).astype(p.data.dtype)

    def state(self) -> dict[str, np.ndarray]:
        out = {"t": np.asarray([self.t], dtype=np.float32)}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"m.{i}"] = m
            out[f"v.{i}"] = v
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        self.t = int(state["t"][0])
        for i in range(len(self.params)):
            self.m[i] = np.array(state[f"m.{i}"], dtype=self.params[i].data.dtype)
            self.v[i] = np.array(state[f"v.{i}"], dtype=self.params[i].data.dtype)


@dataclass
class TrainResult:
    params: HcmsParams
    curve: list[dict]
    best_epoch: int
    last_params: HcmsParams
    optimizer: Adam = field(repr=False)


def _batches(order: np.ndarray, dataset: Dataset, size: int):
    for i in range(0, len(order), size):
        idx = order[i : i + size]
        by_T: dict[int, list] = {}
        for j in idx:
            by_T.setdefault(dataset.videos[j].T, []).append(dataset.videos[j])
        yield list(by_T.values())


def train(
    config: TrainConfig,
    model_config: ModelConfig,
    train_set: Dataset,
    val_set: Dataset | None = None,
    init: HcmsParams | None = None,
    start_epoch: int = 0,
    optimizer_state: dict | None = None,
    on_epoch=None,
) -> TrainResult:
    """Minimize cross-entropy + lam * usage loss; keep the best-validation-mAP weights."""
    from .evaluation import evaluate

    if len(train_set) == 0:
        raise ValueError("empty training set")
    if train_set.header.dims != model_config.dims.raw:
        raise ValueError(f"dataset dims {train_set.header.dims} do not match model dims {model_config.dims.raw}")
    params = init.copy() if init is not None else init_params(model_config, config.seed)
    tensors = params.tensors()
    opt = Adam(tensors, config.beta1, config.beta2, config.eps)
    if optimizer_state is not None:
        opt.load_state(optimizer_state)
    curve: list[dict] = []
    best, best_score, best_epoch = params.copy(), -np.inf, start_epoch - 1
    n = len(train_set)

    for epoch in range(start_epoch, config.epochs):
        # one stream per epoch, so a resumed run replays the uninterrupted one
        rng = np.random.Generator(np.random.PCG64([config.seed, epoch]))
        lr = config.lr_at(epoch)
        tau = temperature_at(epoch, config.tau_schedule, config.tau)
        sums = dict(ce=0.0, usage=0.0, total=0.0, use_mid=0.0, use_top=0.0)
        order = rng.permutation(n)
        for b, groups in enumerate(_batches(order, train_set, config.batch_size)):
            total = sum(len(g) for g in groups)
            acc = [np.zeros_like(t.data) for t in tensors]
            for group in groups:
                with Tape() as tape:
                    probs, trace = forward_video(params, group, "train", rng, tau, config.clamp)
                    lb = compute_loss(probs, [v.label for v in group], trace, config.gamma1, config.gamma2, config.lam)
                if not np.isfinite(lb.total):
                    raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {b}")
                grads = tape.backward(lb.tensor, tensors)
                w = len(group) / total
                for a, g in zip(acc, grads):
                    a += w * g
                k = len(group)
                sums["ce"] += lb.ce * k
                sums["usage"] += lb.usage * k
                sums["total"] += lb.total * k
                sums["use_mid"] += float(trace.usage_mid.sum())
                sums["use_top"] += float(trace.usage_top.sum())
            if not all(np.all(np.isfinite(a)) for a in acc):
                raise TrainingDiverged(f"non-finite gradient at epoch {epoch}, batch {b}")
            opt.step(acc, lr)

        row = {"epoch": epoch, "lr": lr, "tau": tau}
        row.update({f"train_{k}": v / n for k, v in sums.items()})
        if val_set is not None and len(val_set) and ((epoch + 1) % config.eval_every == 0 or epoch + 1 == config.epochs):
            m = evaluate(params, val_set, clamp=config.clamp)
            row.update(
                val_map=m.map,
                val_accuracy=m.accuracy,
                val_usage_mid=m.usage_mid,
                val_usage_top=m.usage_top,
                val_gflops=m.gflops,
            )
            if m.map >= best_score:
                best, best_score, best_epoch = params.copy(), m.map, epoch
        curve.append(row)
        log.info("epoch %d %s", epoch, {k: round(v, 4) for k, v in row.items() if isinstance(v, float)})
        if on_epoch is not None:
            on_epoch(row, params, opt)

    last = params
    if val_set is None or not len(val_set) or best_epoch < start_epoch:
        best, best_epoch = params.copy(), config.epochs - 1
    return TrainResult(best, curve, best_epoch, last, opt)
