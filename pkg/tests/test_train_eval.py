import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hcms.autodiff import Tensor
from hcms.checkpoint import DigestMismatch, load_checkpoint, save_checkpoint
from hcms.config import ConfigError, RunConfig, model_digest
from hcms.dataio import SyntheticSpec, generate_synthetic
from hcms.evaluation import budget_sweep, budgeted_predict, evaluate, sweep_table
from hcms.ledger import CostModel, counts_cost, trace_cost
from hcms.model import ModelConfig, init_params, preset_dims
from hcms.training import Adam, TrainConfig, TrainingDiverged, train

A, I, M = 0.07, 0.99, 65.7


@pytest.fixture(scope="module")
def small():
    return generate_synthetic(SyntheticSpec(train_per_class=4, val_per_class=2, test_per_class=2, seed=3))


@pytest.fixture(scope="module")
def mc():
    return ModelConfig(preset_dims("desk", 12))


@pytest.fixture(scope="module")
def short_run(small, mc):
    tc = TrainConfig(epochs=2, batch_size=8, lr=3e-3, gamma1=0.5, gamma2=0.3)
    return train(tc, mc, small["train"], small["val"])


def arrays(params):
    return {k: t.data.copy() for k, t in params.named().items()}


def assert_params_equal(a, b):
    xa, xb = arrays(a), arrays(b)
    assert xa.keys() == xb.keys()
    for k in xa:
        np.testing.assert_array_equal(xa[k], xb[k], err_msg=k)


# -- schedule and optimizer ---------------------------------------------------


def test_lr_schedule_exact():
    tc = TrainConfig()
    for e in range(40):
        assert tc.lr_at(e) == 1e-4 * 0.92**e


def test_adam_first_step_is_sign_step():
    p = Tensor(np.array([1.0, -2.0, 3.0]))
    opt = Adam([p])
    opt.step([np.array([0.5, -4.0, 0.0])], lr=0.1)
    # bias-corrected first step moves by lr * g / (|g| + eps)
    np.testing.assert_allclose(p.data, [0.9, -1.9, 3.0], rtol=0, atol=1e-7)


def test_adam_matches_hand_recurrence():
    rng = np.random.default_rng(0)
    p = Tensor(rng.standard_normal(4))
    x = p.data.copy()
    m = np.zeros(4)
    v = np.zeros(4)
    opt = Adam([p], 0.9, 0.999, 1e-8)
    for t in range(1, 6):
        g = rng.standard_normal(4)
        opt.step([g], 0.01)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        x = x - 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    np.testing.assert_allclose(p.data, x, rtol=1e-12)


def test_adam_state_round_trip():
    rng = np.random.default_rng(1)
    p = [Tensor(rng.standard_normal((2, 3)).astype(np.float32)), Tensor(rng.standard_normal(3).astype(np.float32))]
    opt = Adam(p)
    for _ in range(3):
        opt.step([rng.standard_normal(t.shape).astype(np.float32) for t in p], 1e-3)
    q = [Tensor(t.data.copy()) for t in p]
    opt2 = Adam(q)
    opt2.load_state(opt.state())
    g = [rng.standard_normal(t.shape).astype(np.float32) for t in p]
    opt.step(g, 1e-3)
    opt2.step(g, 1e-3)
    for a, b in zip(p, q):
        np.testing.assert_array_equal(a.data, b.data)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(gamma1=1.5)
    with pytest.raises(ValueError):
        TrainConfig(lam=-1)


# -- training -----------------------------------------------------------------


def test_training_is_deterministic(small, mc, short_run):
    tc = TrainConfig(epochs=2, batch_size=8, lr=3e-3, gamma1=0.5, gamma2=0.3)
    again = train(tc, mc, small["train"], small["val"])
    assert_params_equal(short_run.last_params, again.last_params)
    assert short_run.curve == again.curve


def test_resume_matches_uninterrupted(small, mc):
    tc = TrainConfig(epochs=3, batch_size=8, lr=3e-3, gamma1=0.5, gamma2=0.3)
    full = train(tc, mc, small["train"], small["val"])
    first = train(TrainConfig(**{**tc.to_dict(), "epochs": 2}), mc, small["train"], small["val"])
    rest = train(
        tc, mc, small["train"], small["val"], init=first.last_params, start_epoch=2, optimizer_state=first.optimizer.state()
    )
    assert_params_equal(full.last_params, rest.last_params)
    assert full.curve[2] == rest.curve[0]


def test_curve_rows(short_run):
    assert [r["epoch"] for r in short_run.curve] == [0, 1]
    for r in short_run.curve:
        assert r["lr"] == 3e-3 * 0.92 ** r["epoch"]
        assert r["train_total"] == pytest.approx(r["train_ce"] + 2.0 * r["train_usage"])
        assert 0 <= r["val_usage_top"] <= r["val_usage_mid"] <= 1


def test_divergence_is_reported(small, mc, monkeypatch):
    import hcms.training as tr

    real = tr.compute_loss

    def poisoned(*a, **k):
        lb = real(*a, **k)
        lb.total = float("nan")
        return lb

    monkeypatch.setattr(tr, "compute_loss", poisoned)
    with pytest.raises(TrainingDiverged):
        train(TrainConfig(epochs=1), mc, small["train"])


def test_training_rejects_bad_data(small, mc):
    other = ModelConfig(preset_dims("desk", 12, (8, 8, 8)))
    with pytest.raises(ValueError):
        train(TrainConfig(epochs=1), other, small["train"])


def test_overfits_small_set():
    data = generate_synthetic(SyntheticSpec(train_per_class=5, val_per_class=1, test_per_class=1, seed=11))
    subset = data["train"].subset(range(50))
    mc = ModelConfig(preset_dims("desk", 12))
    tc = TrainConfig(epochs=60, batch_size=10, lr=3e-3, gamma1=1.0, gamma2=1.0)
    res = train(tc, mc, subset)
    assert evaluate(res.last_params, subset).accuracy == 1.0


# -- evaluation ---------------------------------------------------------------


def test_skip_ratios_complement_usage(short_run, small):
    m = evaluate(short_run.params, small["test"])
    assert m.skip_mid + m.usage_mid == 1.0
    assert m.skip_top + m.usage_top == 1.0
    assert m.usage_top <= m.usage_mid


def test_reported_cost_matches_ledger(short_run, small):
    cm = CostModel.from_config(short_run.params.config)
    m = evaluate(short_run.params, small["test"], cost_model=cm)
    assert m.gflops == pytest.approx(np.mean([trace_cost(cm, r.trace) for r in m.records]), rel=1e-12)


def test_clamped_on_costs_every_tier(short_run, small):
    m = evaluate(short_run.params, small["test"], clamp=(1, 1))
    assert m.skip_mid == 0.0 and m.skip_top == 0.0
    assert m.gflops == pytest.approx(16 * (A + I + M), rel=1e-12)


def test_clamped_off_costs_base_only(short_run, small):
    m = evaluate(short_run.params, small["test"], clamp=(0, 0))
    assert m.usage_mid == 0.0
    assert m.gflops == pytest.approx(16 * A, rel=1e-12)


def test_uniform_classifier_scores_chance(mc, small):
    params = init_params(mc, 0)
    params.classifier.weight.data[:] = 0
    params.classifier.bias.data[:] = 0
    m = evaluate(params, small["test"])
    for r in m.records:
        np.testing.assert_allclose(r.probs, 1 / 12, rtol=1e-6)
    # every argmax lands on class 0 of a balanced set
    assert m.accuracy == pytest.approx(1 / 12)


def test_evaluate_rejects_training_mode(short_run, small):
    with pytest.raises(ValueError):
        evaluate(short_run.params, small["test"], mode="train")


def test_sampled_evaluation_is_seeded(short_run, small):
    a = evaluate(short_run.params, small["test"], mode="sample", rng=np.random.default_rng(5))
    b = evaluate(short_run.params, small["test"], mode="sample", rng=np.random.default_rng(5))
    assert a.to_dict() == b.to_dict()


# -- budgets ------------------------------------------------------------------


def test_infinite_budget_equals_plain_evaluation(short_run, small):
    m = evaluate(short_run.params, small["test"])
    (row,) = budget_sweep(short_run.params, small["test"], [math.inf])
    assert row.metrics.to_dict() == m.to_dict()


def test_base_only_budget_turns_gates_off(short_run, small):
    cm = CostModel.from_config(short_run.params.config)
    for v in small["test"].videos:
        bp = budgeted_predict(short_run.params, v, v.T * A, cm, reserve_audio=True)
        assert bp.steps == v.T and not bp.exhausted
        assert bp.trace.bits_mid.sum() == 0
        assert bp.gflops == counts_cost(cm, v.T, 0, 0) == v.T * A


def test_tiny_budget_gives_uniform_prior(short_run, small):
    v = small["test"].videos[0]
    bp = budgeted_predict(short_run.params, v, 0.05)
    assert bp.steps == 0 and bp.exhausted and bp.gflops == 0.0
    np.testing.assert_allclose(bp.probs, 1 / 12)


def test_short_budget_stops_early(short_run, small):
    v = small["test"].videos[0]
    bp = budgeted_predict(short_run.params, v, 5 * A, reserve_audio=True)
    assert bp.steps == 5 and bp.exhausted
    assert bp.gflops == pytest.approx(5 * A)


@settings(max_examples=40, deadline=None)
@given(st.floats(0.0, 1.2 * 16 * (A + I + M)), st.booleans(), st.integers(0, 23))
def test_budget_is_never_exceeded(short_run, small, budget, reserve, i):
    v = small["test"].videos[i]
    bp = budgeted_predict(short_run.params, v, budget, reserve_audio=reserve)
    assert bp.gflops <= budget
    assert bp.steps == len(bp.trace.bits_mid)
    assert np.all(bp.trace.bits_top <= bp.trace.bits_mid)


def test_duplicate_budgets_give_identical_rows(short_run, small):
    rows = budget_sweep(short_run.params, small["test"], [300.0, 300.0])
    assert rows[0].to_dict() == rows[1].to_dict()


def test_sweep_rejects_unsorted_budgets(short_run, small):
    with pytest.raises(ValueError):
        budget_sweep(short_run.params, small["test"], [10.0, 5.0])


def test_sweep_table_layout(short_run, small):
    rows = budget_sweep(short_run.params, small["test"], [1.0, math.inf])
    lines = sweep_table(rows).splitlines()
    assert lines[0].split("\t") == ["budget", "map", "accuracy", "gflops", "max_gflops", "skip_ratio_1", "skip_ratio_2"]
    assert lines[2].startswith("inf\t")
    assert len(lines) == 3


# -- configs and checkpoints --------------------------------------------------


def test_run_config_round_trip(tmp_path):
    cfg = RunConfig(sweep_budgets=[1.0, math.inf])
    cfg.save(tmp_path / "c.json")
    back = RunConfig.load(tmp_path / "c.json")
    assert back.to_dict() == cfg.to_dict()
    assert back.digest() == cfg.digest()


def test_config_digest_tracks_every_field():
    base = RunConfig()
    assert RunConfig().digest() == base.digest()
    changed = RunConfig.from_dict({**base.to_dict(), "train": {"lr": 1e-3}})
    assert changed.digest() != base.digest()


def test_config_rejects_unknown_and_malformed(tmp_path):
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"nonsense": 1})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"train": {"gamma1": 7}})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"cost": {"audio": -1.0}})
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(ConfigError):
        RunConfig.load(tmp_path / "bad.json")


def test_checkpoint_round_trip_and_digest(tmp_path, short_run):
    d = model_digest(short_run.params.config)
    save_checkpoint(tmp_path / "m.ckpt", arrays(short_run.params), d, {"epoch": 1})
    loaded, doc = load_checkpoint(tmp_path / "m.ckpt", d)
    assert doc["meta"] == {"epoch": 1}
    for k, a in arrays(short_run.params).items():
        np.testing.assert_array_equal(loaded[k], a)
    other = model_digest(ModelConfig(preset_dims("desk", 12), short_run.params.config.order, True))
    with pytest.raises(DigestMismatch):
        load_checkpoint(tmp_path / "m.ckpt", other)
