"""Built-in verification suite run by ``hcms verify``."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, grad_check
from .dataio import FeatureSequence
from .gating import gumbel_softmax, harden, sample_gumbel
from .ledger import CostModel, reference_table
from .model import ModelConfig, ModelDims, compute_loss, draw_noise, forward_video, init_params, params_from_arrays
from .reference import stacked_forward


@dataclass
class Check:
    name: str
    passed: bool
    detail: str
    lines: tuple = ()


def _reduced(f, seed: int):
    """``f`` followed by a fixed random weighting and a sum, so the result is scalar."""
    weights = {}

    def fn(*xs):
        out = f(*xs)
        if out.data.ndim == 0:
            return out
        if out.shape not in weights:
            weights[out.shape] = np.random.default_rng(seed).standard_normal(out.shape)
        return ad.sum_(ad.mul(out, Tensor(weights[out.shape])))

    return fn


def op_cases(rng: np.random.Generator) -> dict[str, tuple]:
    """One ``(fn, point)`` per catalogued op and shape variant; ``fn`` returns a scalar."""
    n = rng.standard_normal
    pos = lambda *s: rng.uniform(0.5, 2.0, s)  # noqa: E731
    cases = {
        "matvec": (lambda W, x: ad.matvec(W, x), [n((3, 4)), n(4)]),
        "matvec[batch]": (lambda W, x: ad.matvec(W, x), [n((3, 4)), n((2, 4))]),
        "add": (ad.add, [n(3), n(3)]),
        "add[bias]": (ad.add, [n((2, 3)), n(3)]),
        "sub": (ad.sub, [n(3), n(3)]),
        "mul": (ad.mul, [n(3), n(3)]),
        "scale": (lambda a: ad.scale(a, 1.7), [n(3)]),
        "concat": (lambda a, b: ad.concat(a, b), [n(2), n(3)]),
        "slice": (lambda a: ad.slice_(a, 1, 4), [n(5)]),
        "sigmoid": (ad.sigmoid, [n(4)]),
        "tanh": (ad.tanh, [n(4)]),
        "exp": (ad.exp, [n(4)]),
        "log": (ad.log, [pos(4)]),
        "softmax": (ad.softmax, [n(4)]),
        "softmax[batch]": (ad.softmax, [n((2, 3))]),
        "sum": (ad.sum_, [n((2, 3))]),
        "sqdiff": (ad.sqdiff, [n(3), n(3)]),
        "pick": (lambda a: ad.pick(a, 2), [n(4)]),
        "pick[batch]": (lambda a: ad.pick(a, [0, 2]), [n((2, 3))]),
        "mix": (ad.mix, [np.asarray(rng.uniform(0, 1)), n(3), n(3)]),
        "mix[batch]": (ad.mix, [rng.uniform(0, 1, 2), n((2, 3)), n((2, 3))]),
    }
    seed = int(rng.integers(2**31))
    return {k: (_reduced(f, seed), p) for k, (f, p) in cases.items()}


def check_op_gradients(points: int = 5, seed: int = 0, tol: float = 1e-4) -> Check:
    rng = np.random.default_rng(seed)
    worst = {}
    for _ in range(points):
        for name, (fn, point) in op_cases(rng).items():
            worst[name] = max(worst.get(name, 0.0), grad_check(fn, point, 1e-5))
    bad = {k: v for k, v in worst.items() if not v < tol}
    top = max(worst.values())
    return Check("op gradients", not bad, f"max rel err {top:.2e} over {len(worst)} ops x {points} points", tuple(
        f"{k:18s} {v:.2e}" for k, v in worst.items()
    ))


TOY_DIMS = ModelDims(raw=(3, 4, 5), proj=(2, 3, 4), hidden=(2, 3, 4), num_classes=3)


def toy_video(rng: np.random.Generator, T: int = 2, dims=TOY_DIMS, label: int = 1) -> FeatureSequence:
    a, i, m = (rng.standard_normal((T, d)) for d in dims.raw)
    return FeatureSequence("toy", label, a, i, m)


def hcms_loss_fn(config: ModelConfig, video: FeatureSequence, noise: np.ndarray, gammas=(0.5, 0.3), lam=2.0):
    """Scalar soft-relaxed loss as a function of every parameter tensor (in ``named()`` order)."""
    names = list(init_params(config, 0).named())

    def fn(*tensors):
        params = params_from_arrays(config, {k: t.data for k, t in zip(names, tensors)})
        # rebind to the caller's tensors so gradients reach them
        _rebind(params, dict(zip(names, tensors)))
        probs, trace = forward_video(params, video, "soft", noise=noise)
        return compute_loss(probs, video.label, trace, gammas[0], gammas[1], lam).tensor

    return names, fn


def _rebind(params, tensors: dict[str, Tensor]) -> None:
    for m, lp in params.proj.items():
        lp.weight, lp.bias = tensors[f"proj.{m}.weight"], tensors[f"proj.{m}.bias"]
    for k, name in enumerate(("base", "mid", "top")):
        p = params.lstm[k]
        p.w_ih, p.w_hh, p.bias = (tensors[f"lstm.{name}.{s}"] for s in ("w_ih", "w_hh", "bias"))
    for k, name in enumerate(("mid", "top")):
        g = params.gates[k]
        g.weight, g.bias = tensors[f"gate.{name}.weight"], tensors[f"gate.{name}.bias"]
    params.classifier.weight, params.classifier.bias = tensors["classifier.weight"], tensors["classifier.bias"]


def check_end_to_end_gradient(seed: int = 0, tol: float = 1e-3) -> Check:
    rng = np.random.default_rng(seed)
    config = ModelConfig(TOY_DIMS)
    params = init_params(config, seed).astype(np.float64)
    video = toy_video(rng)
    noise = draw_noise(rng, video.T, dtype=np.float64)
    names, fn = hcms_loss_fn(config, video, noise)
    point = [t.data for t in params.named().values()]
    err = grad_check(fn, point, 1e-5)
    n = sum(p.size for p in point)
    return Check("end-to-end gradient", err < tol, f"2-step toy, {n} parameters, max rel err {err:.2e}")


def check_gumbel_frequency(n: int = 100_000, seed: int = 0, p0: float = 0.7, tau: float = 0.5) -> Check:
    rng = np.random.default_rng(seed)
    probs = Tensor(np.tile(np.array([p0, 1.0 - p0]), (n, 1)))
    relaxed = gumbel_softmax(probs, tau, sample_gumbel(rng, (n, 2), np.float64))
    hard, _ = harden(relaxed, "eval")
    freq = float(np.mean(hard == 0))
    return Check("gumbel-max frequency", abs(freq - p0) <= 0.01, f"P(index 0) = {freq:.4f} (target {p0} +- 0.01, n={n})")


def check_ledger(cost_model: CostModel | None = None) -> Check:
    """Baseline cost table with dims-derived head costs against the reported values."""
    cm = cost_model or CostModel()
    with_heads = reference_table(cm, heads=True)
    backbone_only = reference_table(cm, heads=False)
    ok = True
    lines = [f"{'modality':10s} {'views':>5s} {'backbone':>10s} {'+heads':>10s} {'reported':>10s} {'rel err':>8s}"]
    for b, h in zip(backbone_only, with_heads):
        row_ok = h.abs_error <= 5.0 and ("motion" not in h.combo or h.rel_error < 1e-3)
        ok &= row_ok
        lines.append(
            f"{h.label:10s} {h.views:5d} {b.computed:10.2f} {h.computed:10.2f} {h.reported:10.1f} "
            f"{100 * h.rel_error:7.3f}%{'' if row_ok else '  FAIL'}"
        )
    return Check("reported cost ledger", ok, "14 entries: motion rows < 0.1% rel, all rows <= 5 GFLOPs abs", tuple(lines))


def check_all_on_equivalence(n_videos: int = 100, seed: int = 0, tol: float = 1e-6) -> Check:
    rng = np.random.default_rng(seed)
    dims = ModelDims(raw=(16, 24, 32), proj=(16, 32, 64), hidden=(16, 32, 64), num_classes=12)
    config = ModelConfig(dims)
    params = init_params(config, seed)
    arrays = {k: t.data for k, t in params.named().items()}
    worst = 0.0
    for j in range(n_videos):
        T = int(rng.integers(1, 17))
        v = FeatureSequence(f"v{j}", 0, *(rng.standard_normal((T, d)).astype(np.float32) for d in dims.raw))
        probs, _ = forward_video(params, v, "eval", clamp=(1, 1))
        ref = stacked_forward(arrays, config.order.tiers, v)
        worst = max(worst, float(np.max(np.abs(probs.data - ref))))
    return Check("all-on equivalence", worst <= tol, f"{n_videos} random videos, max |p - p_ref| = {worst:.2e}")


def run_all(cost_model: CostModel | None = None, quick: bool = False) -> list[Check]:
    checks = []
    for fn in (
        lambda: check_op_gradients(points=3 if quick else 10),
        check_end_to_end_gradient,
        check_gumbel_frequency,
        lambda: check_ledger(cost_model),
        lambda: check_all_on_equivalence(20 if quick else 100),
    ):
        t0 = time.perf_counter()
        c = fn()
        c.detail += f" [{time.perf_counter() - t0:.1f}s]"
        checks.append(c)
    return checks
