import csv

import numpy as np
import pytest

from conceptope.core import Batch, Trajectory
from conceptope.errors import ConfigError, DataError, DivergenceError
from conceptope.estimators import RatioTables, estimate
from conceptope.learner import (
    HEADS,
    PREDICTOR,
    ConceptModel,
    LossWeights,
    TrainConfig,
    TrainingData,
    finite_difference_check,
    learned_concept_map,
    load_checkpoint,
    loss_components,
    save_checkpoint,
    train,
    write_coefficients,
)

SMALL = dict(hidden=8, head_hidden=8)


def small_model(seed=0, n_concepts=4):
    return ConceptModel.init(n_concepts=n_concepts, seed=seed, n_outputs=19, **SMALL)


def small_cfg(**kw):
    return TrainConfig(**{**SMALL, **kw})


@pytest.fixture(scope="module")
def minibatch(splits, features, policies):
    pb, pe = policies
    return TrainingData(splits[0], features, pb, pe).minibatch(np.arange(4))


def test_zero_concept_layer_gives_zero_concepts(features):
    m = small_model()
    m.params["W"][:] = 0
    assert (m.forward(features).c == 0).all()


def test_zero_head_weights_give_uniform_actions(features):
    m = small_model()
    for k in HEADS:
        m.params[k][:] = 0
    fw = m.forward(features[:5])
    assert np.allclose(fw.probs_b, 0.25) and np.allclose(fw.probs_e, 0.25)


def test_concept_is_linear_in_features():
    m = ConceptModel.init(n_features=2, n_concepts=1, hidden=3, head_hidden=3, n_actions=2, n_outputs=1)
    m.params["W"][:] = [[2.0, -1.0]]
    assert m.forward(np.array([[3.0, 4.0]])).c.tolist() == [[2.0]]


def test_output_loss_zero_for_exact_prediction(splits, features, policies):
    t = splits[0].trajectories[0]
    one = Batch([Trajectory(t.transitions[:1])])
    mb = TrainingData(one, features, *policies).minibatch()
    m = small_model()
    m.params["P3"][:] = 0
    m.params["p3"][:] = mb.target[0]
    assert loss_components(m, mb, small_cfg()).output == 0.0


def test_interpretability_and_diversity_losses(minibatch):
    m = small_model()
    m.params["W"][:] = 0.5
    br = loss_components(m, minibatch, small_cfg())
    assert br.interpretability == pytest.approx(0.5)
    m.params["W"][:] = np.eye(4, 20)
    assert loss_components(m, minibatch, small_cfg()).diversity == 0.0


def test_zero_loss_weights_zero_gradients(minibatch):
    cfg = small_cfg(weights=LossWeights(0, 0, 0, 0, 0))
    _, g = loss_components(small_model(), minibatch, cfg, grad=True)
    assert all((v == 0).all() for v in g.values())


def test_output_gradient_of_last_layer_closed_form(minibatch):
    cfg = small_cfg(weights=LossWeights(1, 0, 0, 0, 0))
    m = small_model()
    _, g = loss_components(m, minibatch, cfg, grad=True)
    fw = m.forward(minibatch.X)
    resid = 2 * (fw.y - minibatch.target) / fw.y.size
    assert np.allclose(g["P3"], fw.h2.T @ resid, rtol=0, atol=1e-14)
    assert np.allclose(g["p3"], resid.sum(axis=0), rtol=0, atol=1e-14)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_gradients_match_finite_differences(seed, splits, features, policies):
    # short episodes keep the loss O(1), so central differences are not swamped by cancellation
    short = Batch([Trajectory(t.transitions[:8]) for t in splits[0].trajectories[seed * 3:seed * 3 + 3]])
    mb = TrainingData(short, features, *policies).minibatch()
    cfg = small_cfg(weights=LossWeights(1.0, 1e-3, 1e-2, 1.0, 1e-2), beta=0.01)
    m = ConceptModel.init(n_outputs=19, seed=seed, scale=0.3, **SMALL)
    assert finite_difference_check(m, mb, cfg, max_coords=6, seed=seed) < 1e-4


def test_non_finite_parameters_fail_fast(minibatch):
    m = small_model()
    m.params["E2"][0, 0] = np.nan
    with pytest.raises(DivergenceError, match="E2"):
        loss_components(m, minibatch, small_cfg())


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(estimator="WIS")
    with pytest.raises(ConfigError):
        TrainConfig(stages=(1, 2))
    with pytest.raises(ConfigError):
        LossWeights(ope=-1)


def test_zero_budget_returns_initial_model(splits, features, policies):
    res = train(splits[0], *policies, features, small_cfg(stages=(0, 0, 0)), val_batch=splits[1])
    init = small_cfg().seed
    ref = ConceptModel.init(n_outputs=19, seed=init, **SMALL)
    assert all(np.array_equal(res.model.params[k], ref.params[k]) for k in ref.params)
    assert len(res.curve) == 1


def test_stage_three_freezes_concepts_and_predictor(splits, features, policies):
    sub = splits[0].subset(np.arange(32))
    res = train(sub, *policies, features, small_cfg(stages=(0, 0, 2)), val_batch=splits[1])
    for k in ("W",) + PREDICTOR:
        assert np.array_equal(res.final.params[k], res.initial.params[k])
    assert any(not np.array_equal(res.final.params[k], res.initial.params[k]) for k in HEADS)
    moved = train(sub, *policies, features, small_cfg(stages=(1, 0, 0)), val_batch=splits[1])
    assert not np.array_equal(moved.final.params["W"], moved.initial.params["W"])


def test_stage_one_lowers_validation_output_loss(splits, features, policies, tmp_path):
    res = train(splits[0].subset(np.arange(64)), *policies, features, small_cfg(stages=(4, 0, 0)),
                val_batch=splits[1])
    assert res.best_epoch > 0
    assert res.curve[res.best_epoch]["val_output"] < res.curve[0]["val_output"]
    res.write_curve(tmp_path / "curve.csv")
    assert len((tmp_path / "curve.csv").read_text().splitlines()) == 1 + 1 + 4


def test_stage_two_ramps_ope_weight(splits, features, policies):
    cfg = small_cfg(stages=(0, 4, 0), weights=LossWeights(ope=0.02))
    res = train(splits[0].subset(np.arange(16)), *policies, features, cfg, val_batch=splits[1])
    assert [r["lambda_ope"] for r in res.curve[1:]] == pytest.approx([0.005, 0.01, 0.015, 0.02])


def test_large_policy_weight_shrinks_proximity_gap(splits, features, policies):
    pb, pe = policies
    sub = splits[0].subset(np.arange(100))
    cfg = TrainConfig(weights=LossWeights(policy=1e4, ope=0.0), stages=(200, 0, 0), hidden=16, seed=0)
    lc = learned_concept_map(train(sub, pb, pe, features, cfg).model, features, n_clusters=None)
    visited = np.unique(sub.states[sub.mask])
    gap = max(np.abs(lc.pi_b - pb.probs)[visited].max(), np.abs(lc.pi_e - pe.probs)[visited].max())
    assert gap < 0.05


def test_learned_map_wraps_forward(splits, features, policies):
    m = small_model(seed=3)
    lc = learned_concept_map(m, features, n_clusters=4)
    assert np.allclose(lc.pi_b.sum(axis=1), 1) and np.allclose(lc.pi_e.sum(axis=1), 1)
    assert lc.cluster_map.n_concepts == 4 and lc.cluster_map.n_states == 400
    b = splits[2]
    via_wrapper = estimate("PDIS", b, 0.99, lc.ratio_tables()).point_estimate
    pb, pe = m.head_probs(m.concepts(features))
    manual = estimate("PDIS", b, 0.99, RatioTables(pe, pb)).point_estimate
    assert via_wrapper == manual


def test_checkpoint_round_trip(tmp_path):
    m = small_model(seed=5)
    m.stage = 2
    save_checkpoint(m, tmp_path / "m.txt")
    back = load_checkpoint(tmp_path / "m.txt")
    assert back.seed == 5 and back.stage == 2
    assert all(np.array_equal(back.params[k], m.params[k]) for k in m.params)
    (tmp_path / "bad.txt").write_text("nope\n")
    with pytest.raises(DataError):
        load_checkpoint(tmp_path / "bad.txt")


def test_coefficient_table_layout(tmp_path):
    m = small_model()
    write_coefficients(m, tmp_path / "w.csv")
    with open(tmp_path / "w.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["feature", "c1", "c2", "c3", "c4"] and len(rows) == 21
    assert float(rows[1][1]) == m.params["W"][0, 0]


def test_empty_training_data_rejected(features, policies):
    b = Batch([Trajectory(())])
    with pytest.raises(DataError):
        TrainingData(b, features, *policies).minibatch()
