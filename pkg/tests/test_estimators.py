import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conceptope.concepts import ConceptMap, VisitationTable
from conceptope.core import (
    Batch,
    TabularPolicy,
    Trajectory,
    Transition,
    enumerate_trajectory_dist,
    enumerate_value,
    q_tables,
    rollout_batch,
)
from conceptope.envs import ChainConfig, chain_mdp
from conceptope.errors import CoverageError, DegenerateBatchError
from conceptope.estimators import (
    QModel,
    RatioTables,
    cumulative_weights,
    dr_estimate,
    estimate,
    exact_q_model,
    fit_q_model,
    mis_estimate,
    point_estimate,
    step_ratios,
    weight_stream,
)


def one_step(s, a, r, s2=0):
    return Trajectory((Transition(s, a, r, s2),))


def random_pair(S, A, seed):
    rng = np.random.default_rng(seed)
    return TabularPolicy(rng.dirichlet(np.ones(A), S)), TabularPolicy(rng.dirichlet(np.ones(A), S))


def test_weight_stream_identity_ratios():
    t = Trajectory((Transition(0, 1, 1.0, 1), Transition(1, 0, 0.0, 2)))
    ws = weight_stream(t, lambda x, a: 0.4, lambda x, a: 0.4)
    assert ws.cumulative.tolist() == [1.0, 1.0]


def test_weight_stream_one_step_and_product():
    ws = weight_stream(one_step(0, 0, 1.0), lambda x, a: 0.6, lambda x, a: 0.3)
    assert ws.full == pytest.approx(2.0)
    num = {0: 0.6, 1: 0.2}
    den = {0: 0.3, 1: 0.4}
    t = Trajectory((Transition(0, 0, 0.0, 1), Transition(1, 0, 0.0, 0)))
    ws = weight_stream(t, lambda x, a: num[x], lambda x, a: den[x])
    assert ws.cumulative.tolist() == pytest.approx([2.0, 1.0])


def test_weight_stream_routes_concepts():
    cmap = ConceptMap("c", ids=np.array([1, 1]))
    seen = []
    weight_stream(one_step(0, 0, 0.0), lambda x, a: seen.append(x) or 0.5, lambda x, a: 0.5, "concept", cmap)
    assert seen == [1]


def test_weight_stream_zero_denominator_named():
    with pytest.raises(CoverageError, match="x=0, a=1"):
        weight_stream(one_step(0, 1, 0.0), lambda x, a: 0.5, lambda x, a: 0.0)


def test_step_ratios_pad_with_one():
    b = Batch([Trajectory((Transition(0, 0, 1.0, 1), Transition(1, 1, 1.0, 1))), one_step(1, 1, 2.0)])
    num = np.array([[0.5, 0.5], [0.1, 0.9]])
    den = np.array([[0.25, 0.75], [0.3, 0.3]])
    r = step_ratios(b, num, den)
    assert np.allclose(r, [[2.0, 3.0], [3.0, 1.0]])
    assert cumulative_weights(r)[1].tolist() == pytest.approx([3.0, 3.0])


def test_is_and_wis_one_step():
    b = Batch([one_step(0, 0, 3.0)])
    W = np.array([[2.0]])
    assert point_estimate(b, W, 1.0, "IS").point_estimate == pytest.approx(6.0)
    assert point_estimate(b, W, 1.0, "IS", normalized=True).point_estimate == pytest.approx(3.0)


def test_identical_policies_give_mean_return():
    mdp = chain_mdp()
    pi = TabularPolicy(np.tile([0.3, 0.7], (5, 1)))
    b = Batch(rollout_batch(mdp, pi, 200, seed=1), horizon=mdp.horizon)
    mean = b.discounted_returns(mdp.gamma).mean()
    t = RatioTables(pi.probs, pi.probs)
    for name in ("IS", "PDIS", "WIS", "PDWIS"):
        assert estimate(name, b, mdp.gamma, t).point_estimate == pytest.approx(mean, abs=1e-12)


def test_empty_and_zero_weight_batches():
    b = Batch([one_step(0, 0, 1.0)])
    with pytest.raises(DegenerateBatchError):
        point_estimate(b, np.zeros((1, 1)), 1.0, "IS", normalized=True)
    with pytest.raises(DegenerateBatchError):
        point_estimate(b, np.zeros((1, 1)), 1.0, "PDIS", normalized=True)


def test_underflowing_weights_flag_degenerate():
    b = Batch([one_step(0, 0, 1.0), one_step(0, 0, 3.0)])
    rep = point_estimate(b, np.array([[1e-310], [1e-311]]), 1.0, "IS", normalized=True)
    assert rep.degenerate and rep.point_estimate == pytest.approx(rep.per_trajectory_values.mean())


def test_pdis_equals_is_with_terminal_reward_only():
    mdp = chain_mdp()
    pb, pe = random_pair(5, 2, 3)
    trajs = rollout_batch(mdp, pb, 100, seed=2)
    zeroed = [Trajectory(tuple(Transition(tr.state, tr.action, tr.reward if i == len(t) - 1 else 0.0,
                                          tr.next_state, tr.done) for i, tr in enumerate(t.transitions)))
              for t in trajs]
    b = Batch(zeroed)
    t = RatioTables(pe.probs, pb.probs)
    assert estimate("PDIS", b, 0.9, t).point_estimate == pytest.approx(estimate("IS", b, 0.9, t).point_estimate)


def test_pooled_normalisation_divides_by_all_step_weights():
    b = Batch([Trajectory((Transition(0, 0, 1.0, 0), Transition(0, 0, 1.0, 0)))])
    W = np.array([[2.0, 4.0]])
    rep = point_estimate(b, W, 1.0, "PDIS", normalized=True, pd_normalization="pooled")
    assert rep.point_estimate == pytest.approx(6.0 / 6.0)
    per_step = point_estimate(b, W, 1.0, "PDIS", normalized=True)
    assert per_step.point_estimate == pytest.approx(2.0)


def test_is_unbiased_over_enumeration():
    mdp = chain_mdp(ChainConfig(horizon=3))
    pb, pe = random_pair(5, 2, 4)
    t = RatioTables(pe.probs, pb.probs)
    dist = enumerate_trajectory_dist(mdp, pb)
    b = Batch([tr for tr, _ in dist], horizon=3)
    p = np.array([q for _, q in dist])
    truth = enumerate_value(mdp, pe)
    for name in ("IS", "PDIS"):
        vals = estimate(name, b, mdp.gamma, t).per_trajectory_values
        assert p @ vals == pytest.approx(truth, abs=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from(["WIS", "PDWIS"]))
def test_self_normalised_within_return_range(seed, name):
    """Per-step normalisation bounds each step's term, so the check is on rewards for PDWIS."""
    mdp = chain_mdp(ChainConfig(horizon=3))
    pb, pe = random_pair(5, 2, seed)
    b = Batch(rollout_batch(mdp, pb, 20, seed=seed), horizon=3)
    est = estimate(name, b, mdp.gamma, RatioTables(pe.probs, pb.probs)).point_estimate
    if name == "WIS":
        g = b.discounted_returns(mdp.gamma)
        assert g.min() - 1e-12 <= est <= g.max() + 1e-12
    else:
        disc = mdp.gamma ** np.arange(3)
        assert disc @ b.rewards.min(axis=0) - 1e-12 <= est <= disc @ b.rewards.max(axis=0) + 1e-12


def test_dr_with_zero_model_is_pdis():
    mdp = chain_mdp()
    pb, pe = random_pair(5, 2, 5)
    b = Batch(rollout_batch(mdp, pb, 50, seed=3))
    t = RatioTables(pe.probs, pb.probs)
    zero = QModel(np.zeros((5, 2)), np.zeros(5))
    dr = estimate("DR", b, mdp.gamma, t, qmodel=zero)
    assert dr.per_trajectory_values == pytest.approx(estimate("PDIS", b, mdp.gamma, t).per_trajectory_values)


def test_dr_with_exact_model_on_deterministic_chain():
    mdp = chain_mdp(ChainConfig(slip=0.0, horizon=5, gamma=0.9, start=2))
    pb, pe = random_pair(5, 2, 6)
    b = Batch(rollout_batch(mdp, pb, 30, seed=4))
    q = exact_q_model(mdp, pe)
    for W in (RatioTables(pe.probs, pb.probs).weights(b), np.random.default_rng(0).random(b.states.shape)):
        rep = dr_estimate(b, W, q, mdp.gamma)
        assert np.allclose(rep.per_trajectory_values, enumerate_value(mdp, pe), atol=1e-12)


def test_dr_rejects_non_finite_model():
    b = Batch([one_step(0, 0, 1.0)])
    with pytest.raises(CoverageError):
        dr_estimate(b, np.ones((1, 1)), QModel(np.full((1, 1), np.nan), np.zeros(1)), 1.0)


def test_fit_q_myopic_and_zero_sweeps():
    b = Batch([one_step(0, 0, 1.0), one_step(0, 0, 3.0), one_step(1, 1, -2.0)])
    pi = TabularPolicy.uniform(2, 2)
    q = fit_q_model(b, pi, gamma=0.0, sweeps=5).q
    assert q[0, 0] == pytest.approx(2.0) and q[1, 1] == pytest.approx(-2.0)
    assert (fit_q_model(b, pi, gamma=0.9, sweeps=0).q == 0).all()


def test_fit_q_fills_unseen_actions_with_state_mean():
    b = Batch([one_step(0, 0, 1.0), one_step(0, 1, 3.0), one_step(1, 0, 4.0)])
    q = fit_q_model(b, TabularPolicy.uniform(3, 3), gamma=0.0, sweeps=1).q
    assert q[0].tolist() == pytest.approx([1.0, 3.0, 2.0])
    assert q[1].tolist() == pytest.approx([4.0, 4.0, 4.0])
    assert q[2].tolist() == [0.0, 0.0, 0.0]


def test_fit_q_converges_on_deterministic_chain():
    """Discounted infinite-horizon fixed point on a chain where every episode lasts one step."""
    mdp = chain_mdp(ChainConfig(slip=0.0, horizon=1, gamma=0.8))
    pe = TabularPolicy(np.tile([0.4, 0.6], (5, 1)))
    trajs = [one_step(s, a, s / 4, max(s - 1, 0) if a == 0 else min(s + 1, 4)) for s in range(5) for a in range(2)]
    q = fit_q_model(Batch(trajs), pe, gamma=0.8, sweeps=100).q
    P = mdp.transition_probs
    R = mdp.rewards
    Q = np.zeros((5, 2))
    for _ in range(2000):
        Q = R + 0.8 * P @ (Q * pe.probs).sum(axis=1)
    assert np.abs(q - Q).max() < 1e-6


def test_fit_q_time_indexed_matches_dp_with_full_coverage():
    mdp = chain_mdp(ChainConfig(slip=0.0, horizon=3, gamma=0.9))
    pb, pe = random_pair(5, 2, 8)
    dist = enumerate_trajectory_dist(mdp, pb)
    b = Batch([t for t, _ in dist], horizon=3)
    Q, _ = q_tables(mdp, pe)
    fitted = fit_q_model(b, pe, 0.9, horizon=3).q
    assert fitted.shape == (3, 5, 2)
    assert np.allclose(fitted, Q, atol=1e-12)


def test_mis_hand_ratio():
    b = Batch([one_step(0, 0, 1.0)])
    d_e = VisitationTable(np.array([[2.0, 0.0], [0.0, 2.0]]), 1)
    d_b = VisitationTable(np.array([[1.0, 1.0], [1.0, 1.0]]), 1)
    assert mis_estimate(b, d_e, d_b, 1.0).point_estimate == pytest.approx(2.0)


def test_mis_zero_behaviour_density():
    b = Batch([one_step(0, 0, 1.0)])
    d_e = VisitationTable(np.array([[1.0, 0.0]]), 1)
    d_b = VisitationTable(np.array([[0.0, 1.0]]), 1)
    with pytest.raises(CoverageError):
        mis_estimate(b, d_e, d_b, 1.0)


def test_mis_exact_occupancies_on_chain():
    """Per-timestep MIS with exact occupancies is unbiased over the behaviour trajectory distribution."""
    mdp = chain_mdp(ChainConfig(horizon=3))
    pb, pe = random_pair(5, 2, 9)
    dist = enumerate_trajectory_dist(mdp, pb)
    b = Batch([t for t, _ in dist], horizon=3)
    p = np.array([q for _, q in dist])
    d_e = VisitationTable.exact(mdp, pe, per_timestep=True)
    d_b = VisitationTable.exact(mdp, pb, per_timestep=True)
    rep = mis_estimate(b, d_e, d_b, mdp.gamma, per_timestep=True)
    assert p @ rep.per_trajectory_values == pytest.approx(enumerate_value(mdp, pe), abs=1e-9)
    cmap = ConceptMap.identity(5)
    crep = mis_estimate(b, d_e, d_b, mdp.gamma, "concept", cmap, per_timestep=True)
    assert np.isfinite(crep.point_estimate)


def test_mis_identical_policies_converge_to_mean_return():
    mdp = chain_mdp()
    pi = TabularPolicy(np.tile([0.5, 0.5], (5, 1)))
    b = Batch(rollout_batch(mdp, pi, 20_000, seed=5), horizon=mdp.horizon)
    d = VisitationTable.from_batch(b, 5, 2)
    rep = mis_estimate(b, d, VisitationTable.exact(mdp, pi), mdp.gamma)
    assert rep.point_estimate == pytest.approx(b.discounted_returns(mdp.gamma).mean(), rel=0.02)


def test_concept_estimators_use_concept_tables():
    mdp = chain_mdp()
    pb, pe = random_pair(5, 2, 10)
    b = Batch(rollout_batch(mdp, pb, 40, seed=6))
    cmap = ConceptMap.identity(5)
    st_t = RatioTables(pe.probs, pb.probs)
    c_t = RatioTables(pe.probs, pb.probs, cmap.ids)
    for s_name, c_name in (("IS", "CIS"), ("PDWIS", "CPDWIS")):
        a = estimate(s_name, b, 0.9, st_t).point_estimate
        c = estimate(c_name, b, 0.9, st_t, concept_tables=c_t).point_estimate
        assert a == pytest.approx(c)
    with pytest.raises(ValueError):
        estimate("CIS", b, 0.9, st_t)
    with pytest.raises(ValueError):
        estimate("XIS", b, 0.9, st_t)


def test_report_json_and_resampling():
    b = Batch([one_step(0, 0, 1.0), one_step(0, 1, 2.0), one_step(0, 0, 4.0)])
    W = np.array([[1.0], [2.0], [0.5]])
    rep = point_estimate(b, W, 1.0, "IS", normalized=True)
    doc = json.loads(rep.to_json())
    assert doc["weights"] == [[1.0], [2.0], [0.5]]
    assert rep.resampled(np.ones(3))[0] == pytest.approx(rep.point_estimate)
    only_first = rep.resampled(np.array([[3.0, 0.0, 0.0]]))
    assert only_first[0] == pytest.approx(1.0)
