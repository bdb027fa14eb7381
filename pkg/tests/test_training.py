from dataclasses import replace

import numpy as np
import pytest
from scipy import stats

from spqi.embeddings import FEATURE_TYPES
from spqi.gat import ModelConfig, ModelParams
from spqi.synth import SynthConfig, generate_dataset
from spqi.training import (
    Adam,
    EarlyStopping,
    TrainConfig,
    TrainingError,
    evaluate,
    grid_cells,
    metrics_from_predictions,
    paired_significance,
    parse_features,
    prf,
    pretrain_behavior,
    run_ablation_grid,
    run_stages,
    train_multistage,
)

TINY_MODEL = ModelConfig(node_dim=8, text_dim=8, cat_dim=4, gat_layers=2, mlp_layers=2)
TINY = TrainConfig(model=TINY_MODEL, batch_size=16, max_stage2_epochs=2, skipgram_dim=8, skipgram_epochs=1)


@pytest.fixture(scope="module")
def tiny_ds():
    return generate_dataset(SynthConfig(n_users=300, n_products=60, n_categories=12, n_questions=400, seed=1))


@pytest.fixture(scope="module")
def tiny_emb(tiny_ds):
    return pretrain_behavior(tiny_ds, TINY)


# metrics


def test_prf_example():
    p, r, f = prf(903, 97, 83)
    assert p == pytest.approx(0.903, abs=1e-12)
    assert r == pytest.approx(903 / 986, abs=1e-12)
    assert round(r, 3) == 0.916
    assert f == pytest.approx(2 * p * r / (p + r), abs=1e-12)
    assert round(f, 3) == 0.909


def test_perfect_and_always_positive_predictors():
    y = np.array([1, 0, 1, 1, 0, 0, 1, 0])
    m = metrics_from_predictions(y, y.astype(bool))
    assert (m.precision, m.recall, m.f1) == (1.0, 1.0, 1.0)
    assert m.tp + m.fp + m.fn + m.tn == m.n == 8
    y = np.array([1, 0] * 50)
    m = metrics_from_predictions(y, np.ones(100, bool))
    assert m.recall == 1.0 and m.precision == 0.5
    assert m.f1 == pytest.approx(2 / 3, abs=1e-15)


def test_empty_denominators_are_zero():
    assert prf(0, 0, 0) == (0.0, 0.0, 0.0)
    m = metrics_from_predictions(np.zeros(4), np.zeros(4, bool))
    assert m.f1 == 0.0 and m.tn == 4
    with pytest.raises(ValueError):
        metrics_from_predictions(np.zeros(0), np.zeros(0, bool))


def test_per_category_f1_respects_minimum_size():
    y = np.array([1] * 60 + [1] * 10)
    pred = np.array([True] * 30 + [False] * 30 + [True] * 10)
    cats = np.array([7] * 60 + [8] * 10)
    m = metrics_from_predictions(y, pred, cats, min_category_size=50)
    assert set(m.per_category_f1) == {7}
    assert m.per_category_f1[7] == pytest.approx(prf(30, 0, 30)[2])
    assert m.to_dict()["per_category_f1"] == {"7": m.per_category_f1[7]}


# stopping rule and stages


def test_early_stopping_rule():
    s = EarlyStopping(3)
    stops = [s.update(v, e) for e, v in enumerate([1.0, 0.9, 0.91, 0.92, 0.93], start=1)]
    assert stops == [False, False, False, False, True]
    assert s.best_epoch == 2
    s = EarlyStopping(2)
    assert [s.update(v, e) for e, v in enumerate([1.0, 1.0, 1.0], start=1)] == [False, False, True]
    with pytest.raises(ValueError):
        EarlyStopping(0)


def scripted(losses, record=None):
    def train_epoch(p, names, opt, epoch):
        if record is not None:
            record.append((epoch, tuple(names), opt.lr))
        p.arrays["w"] = np.full(2, float(epoch))
        return 0.5

    def validate(p):
        return losses[int(p.arrays["w"][0]) - 1], {}

    return train_epoch, validate


def test_scripted_early_stop_returns_best_epoch_params():
    params = ModelParams({"w": np.zeros(2), "skipgram.product": np.ones(2)})
    record = []
    cfg = TrainConfig(max_stage2_epochs=30)
    best, hist = run_stages(params, *scripted([1.0, 0.9, 0.91, 0.92, 0.93, 0.5, 0.4], record), cfg)
    assert [r.epoch for r in hist.epochs] == [1, 2, 3, 4, 5]
    assert [r.stage for r in hist.epochs] == [1, 2, 2, 2, 2]
    assert hist.best_epoch == 2 and hist.stopped_early
    assert np.array_equal(best.arrays["w"], np.full(2, 2.0))
    assert record[0] == (1, ("w",), 1e-3)
    assert record[1] == (2, ("skipgram.product", "w"), 3e-5)


def test_stage_budget_without_early_stop():
    params = ModelParams({"w": np.zeros(2)})
    cfg = TrainConfig(max_stage2_epochs=3)
    best, hist = run_stages(params, *scripted([1.0, 0.9, 0.8, 0.7]), cfg)
    assert len(hist.epochs) == 4 and not hist.stopped_early
    assert hist.best_epoch == 4


def test_non_finite_loss_raises():
    params = ModelParams({"w": np.zeros(2)})

    def bad_epoch(p, names, opt, epoch):
        return float("nan") if epoch == 2 else 1.0

    with pytest.raises(TrainingError) as err:
        run_stages(params, bad_epoch, lambda p: (1.0, {}), TrainConfig())
    assert err.value.epoch == 2


def test_adam_first_step_moves_by_lr():
    arrays = {"a": np.array([1.0, -2.0, 3.0])}
    Adam(0.1).step(arrays, {"a": np.array([0.5, -4.0, 0.0])})
    assert np.allclose(arrays["a"], [0.9, -1.9, 3.0], atol=1e-6)


def test_stage_one_keeps_skipgram_frozen(tiny_ds, tiny_emb):
    cfg = replace(TINY, max_stage2_epochs=0)
    model = train_multistage(tiny_ds, cfg, tiny_emb)
    assert np.array_equal(model.params.arrays["skipgram.product"], tiny_emb.product_vectors)
    assert len(model.history.epochs) == 1
    cfg = replace(TINY, max_stage2_epochs=1, early_stop_patience=5)
    model = train_multistage(tiny_ds, cfg, tiny_emb)
    if model.history.best_epoch == 2:
        assert not np.array_equal(model.params.arrays["skipgram.product"], tiny_emb.product_vectors)


def test_training_is_deterministic(tiny_ds, tiny_emb):
    a = train_multistage(tiny_ds, TINY, tiny_emb)
    b = train_multistage(tiny_ds, TINY, tiny_emb)
    for k in a.params.names():
        assert np.array_equal(a.params.arrays[k], b.params.arrays[k])
    assert a.history.to_dict() == b.history.to_dict()
    m = evaluate(a.params, TINY, tiny_ds, "test", a.vocab)
    assert 0.0 <= m.f1 <= 1.0 and m.n == len(tiny_ds.split("test"))


def test_every_variant_trains(tiny_ds, tiny_emb):
    for variant in ("spqi-concat", "mlp-moe", "mlp-concat", "text-only"):
        feats = ("text_q", "text_a") if variant == "text-only" else FEATURE_TYPES
        cfg = replace(TINY, variant=variant, features=feats, max_stage2_epochs=1)
        model = train_multistage(tiny_ds, cfg, tiny_emb)
        assert np.isfinite(model.history.epochs[-1].val_loss)


# features and grid


def test_parse_features():
    assert parse_features("full") == FEATURE_TYPES
    assert parse_features("text,behavior") == ("text_q", "text_a", "behavior")
    assert parse_features("behavior,text_q") == ("text_q", "behavior")
    assert parse_features("product") == ("product", "category", "parent_category")
    with pytest.raises(ValueError):
        parse_features("colour")
    with pytest.raises(ValueError):
        parse_features("")


def test_grid_has_26_cells():
    cells = grid_cells()
    assert len(cells) == 26
    assert len(set(cells)) == 26
    assert sum(c.variant == "text-only" for c in cells) == 2


def test_grid_records(tmp_path, tiny_ds):
    cells = [c for c in grid_cells() if c.subset in ("behavior", "question")][:2]
    out = tmp_path / "grid.jsonl"
    cfg = replace(TINY, max_stage2_epochs=1)
    recs = run_ablation_grid(tiny_ds, cfg, seeds=(0, 1), out_path=out, cells=cells)
    assert len(recs) == 4
    assert len(out.read_text().splitlines()) == 4
    assert {"variant", "subset", "seed", "f1", "confusion", "best_epoch", "config"} <= set(recs[0])


def test_config_validation_and_round_trip():
    cfg = replace(TINY, features=("behavior", "text_q"))
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        TrainConfig(sampling="stratified")
    with pytest.raises(ValueError):
        TrainConfig(stage2_lr=0)
    assert TrainConfig(batch_size=8).eval_batch == 8


# significance


def test_significance_degenerate():
    s = paired_significance([0.9, 0.8, 0.7], [0.9, 0.8, 0.7])
    assert s.degenerate and s.p_value == 1.0
    s = paired_significance([0.9, 0.8, 0.7], [0.8, 0.7, 0.6])
    assert s.degenerate


def test_significance_shift_and_scipy(rng):
    b = rng.uniform(0.6, 0.8, size=10)
    a = b + 0.1 + rng.normal(0, 0.01, size=10)
    s = paired_significance(a, b)
    assert s.p_value < 0.05 and s.t_statistic > 0
    ref = stats.ttest_rel(a, b)
    assert s.p_value == pytest.approx(ref.pvalue, rel=1e-10)
    assert s.t_statistic == pytest.approx(ref.statistic, rel=1e-10)


def test_significance_errors():
    with pytest.raises(ValueError):
        paired_significance([0.5], [0.4])
    with pytest.raises(ValueError):
        paired_significance([0.5, 0.6], [0.4])
