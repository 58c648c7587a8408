"""Importance-sampling estimator family over states or concepts.

Weights are products of per-step ratios ``num(a|x) / den(a|x)`` where ``x``
is the state or its concept. Every estimator returns an
:class:`EstimateReport` whose per-trajectory terms can be recombined under
resampling weights, which is how the bootstrap avoids recomputing ratios.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .core import Batch, MDPSpec, TabularPolicy, Trajectory, as_batch
from .errors import CoverageError, DegenerateBatchError

UNDERFLOW = 1e-300


@dataclass(frozen=True)
class WeightStream:
    """Cumulative ratios ``rho_{0:t}`` of one trajectory."""

    cumulative: np.ndarray

    @property
    def full(self) -> float:
        return float(self.cumulative[-1]) if len(self.cumulative) else 1.0


def _conditioned(x_of_state, cmap):
    if cmap is None:
        return x_of_state
    return cmap.ids[x_of_state] if cmap.discrete else cmap(x_of_state)


def weight_stream(traj: Trajectory, num_prob: Callable, den_prob: Callable,
                  conditioning: str = "state", cmap=None) -> WeightStream:
    """Per-step cumulative ratio products for a single trajectory.

    With ``conditioning="concept"`` each state is routed through ``cmap``
    before the probability callables see it.
    """
    rho, out = 1.0, []
    for tr in traj.transitions:
        x = tr.state if conditioning == "state" else _conditioned(tr.state, cmap)
        den = den_prob(x, tr.action)
        if den <= 0:
            raise CoverageError(f"zero behaviour probability at x={x}, a={tr.action}")
        rho *= num_prob(x, tr.action) / den
        out.append(rho)
    return WeightStream(np.array(out, dtype=float))


def step_ratios(batch: Batch, num_table: np.ndarray, den_table: np.ndarray, index=None) -> np.ndarray:
    """``(N, width)`` per-step ratios; 1 on padded steps."""
    x = batch.states if index is None else np.asarray(index)[batch.states]
    a = batch.actions
    den = den_table[x, a]
    bad = batch.mask & (den <= 0)
    if bad.any():
        n, t = np.argwhere(bad)[0]
        raise CoverageError(f"zero behaviour probability at x={int(x[n, t])}, a={int(a[n, t])}")
    ratios = np.ones(batch.states.shape)
    m = batch.mask
    ratios[m] = num_table[x[m], a[m]] / den[m]
    return ratios


def cumulative_weights(ratios: np.ndarray) -> np.ndarray:
    """Running products along time; frozen past each episode's end since padding ratios are 1."""
    return np.cumprod(ratios, axis=1)


@dataclass
class EstimateReport:
    """Point estimate plus the per-trajectory pieces it was combined from.

    ``combine`` is one of ``mean``, ``ratio`` (self-normalised over
    trajectories), ``stepwise_ratio`` (self-normalised per time step) or
    ``pooled_ratio`` (self-normalised over all trajectory-steps). For the
    step-wise rules ``numerators``/``denominators`` are ``(N, width)``.
    """

    estimator_name: str
    point_estimate: float
    per_trajectory_values: np.ndarray
    weights: np.ndarray
    lengths: np.ndarray
    combine: str = "mean"
    numerators: np.ndarray | None = None
    denominators: np.ndarray | None = None
    discount: np.ndarray | None = None
    degenerate: bool = False
    config: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return len(self.per_trajectory_values)

    def weight_streams(self) -> list[WeightStream]:
        return [WeightStream(self.weights[i, :k]) for i, k in enumerate(self.lengths)]

    @property
    def full_weights(self) -> np.ndarray:
        """``rho_{0:T}`` per trajectory."""
        return self.weights[:, -1]

    def resampled(self, counts: np.ndarray) -> np.ndarray:
        """Point estimates under multiplicity weights ``counts`` of shape ``(B, N)``."""
        counts = np.atleast_2d(np.asarray(counts, dtype=float))
        n = counts.sum(axis=1)
        if self.combine == "mean":
            return counts @ self.per_trajectory_values / n
        num = counts @ self.numerators
        den = counts @ self.denominators
        if self.combine in ("ratio", "pooled_ratio"):
            with np.errstate(divide="ignore", invalid="ignore"):
                out = num / den
            fallback = counts @ self.per_trajectory_values / n
            return np.where(den > UNDERFLOW, out, fallback)
        if self.combine == "stepwise_ratio":
            with np.errstate(divide="ignore", invalid="ignore"):
                per_t = np.where(den > UNDERFLOW, num / den, 0.0)
            return per_t @ self.discount
        raise ValueError(f"unknown combine rule {self.combine}")

    def to_dict(self) -> dict:
        return {
            "estimator": self.estimator_name,
            "point_estimate": self.point_estimate,
            "per_trajectory_values": self.per_trajectory_values.tolist(),
            "weights": [ws.cumulative.tolist() for ws in self.weight_streams()],
            "degenerate": bool(self.degenerate),
            "config": self.config,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def point_estimate(batch, weights: np.ndarray, gamma: float, mode: str = "IS", normalized: bool = False,
                   name: str | None = None, pd_normalization: str = "per_step") -> EstimateReport:
    """Combine cumulative weights with rewards.

    Parameters
    ----------
    weights:
        ``(N, width)`` cumulative ratios as returned by :func:`cumulative_weights`.
    mode:
        ``IS`` weights the whole discounted return by ``rho_{0:T}``; ``PDIS``
        weights each reward by its prefix ratio ``rho_{0:t}``.
    normalized:
        Self-normalised variant. For ``PDIS`` the default
        ``pd_normalization="per_step"`` normalises each time step across
        trajectories; ``"pooled"`` divides by the sum of all ``rho_{0:t}``
        over trajectories and steps up to the horizon.
    """
    b = as_batch(batch)
    if len(b) == 0:
        raise DegenerateBatchError("empty batch")
    W = np.asarray(weights, dtype=float)
    if W.shape != b.states.shape:
        raise ValueError(f"weights shape {W.shape} does not match batch {b.states.shape}")
    disc = gamma ** np.arange(b.width)
    returns = b.discounted_returns(gamma)
    full = W[:, -1]
    name = name or (("W" if normalized else "") if mode == "IS" else ("PDW" if normalized else "PD")) + "IS"
    cfg = {"mode": mode, "normalized": normalized, "gamma": gamma}
    common = dict(weights=W, lengths=b.lengths, config=cfg)
    if mode == "IS":
        vals = full * returns
        if not normalized:
            return EstimateReport(name, float(vals.mean()), vals, **common)
        den = full.sum()
        if den == 0:
            raise DegenerateBatchError("all importance weights are zero")
        degenerate = den < UNDERFLOW
        est = float(vals.mean()) if degenerate else float(vals.sum() / den)
        return EstimateReport(name, est, vals, combine="ratio", numerators=vals, denominators=full,
                              degenerate=degenerate, **common)
    if mode != "PDIS":
        raise ValueError(f"unknown mode {mode}")
    step_terms = W * b.rewards
    vals = step_terms @ disc
    if not normalized:
        return EstimateReport(name, float(vals.mean()), vals, **common)
    if pd_normalization == "per_step":
        num, den = step_terms, W
        colsum = den.sum(axis=0)
        if (colsum == 0).all():
            raise DegenerateBatchError("all importance weights are zero")
        degenerate = bool((colsum < UNDERFLOW).any())
        per_t = np.divide(num.sum(axis=0), colsum, out=np.zeros(b.width), where=colsum > UNDERFLOW)
        est = float(vals.mean()) if degenerate else float(per_t @ disc)
        return EstimateReport(name, est, vals, combine="stepwise_ratio", numerators=num, denominators=den,
                              discount=disc, degenerate=degenerate, **common)
    if pd_normalization == "pooled":
        # logically padded to the horizon: frozen weights keep counting
        den_traj = W.sum(axis=1) + (b.horizon - b.width) * full
        tot = den_traj.sum()
        if tot == 0:
            raise DegenerateBatchError("all importance weights are zero")
        degenerate = tot < UNDERFLOW
        est = float(vals.mean()) if degenerate else float(vals.sum() / tot)
        return EstimateReport(name, est, vals, combine="pooled_ratio", numerators=vals, denominators=den_traj,
                              degenerate=degenerate, **common)
    raise ValueError(f"unknown pd_normalization {pd_normalization}")


@dataclass(frozen=True)
class QModel:
    """Tabular ``Q`` (stationary ``(S, A)`` or time-indexed ``(T, S, A)``) and its ``V`` under ``pi_e``."""

    q: np.ndarray
    v: np.ndarray

    @classmethod
    def from_q(cls, q: np.ndarray, pi_e: TabularPolicy) -> "QModel":
        q = np.asarray(q, dtype=float)
        return cls(q, (q * pi_e.probs).sum(axis=-1))

    def q_at(self, t: np.ndarray, s: np.ndarray, a: np.ndarray) -> np.ndarray:
        if self.q.ndim == 2:
            return self.q[s, a]
        return self.q[np.minimum(t, len(self.q) - 1), s, a]

    def v_at(self, t: np.ndarray, s: np.ndarray) -> np.ndarray:
        if self.v.ndim == 1:
            return self.v[s]
        return self.v[np.minimum(t, len(self.v) - 1), s]


def exact_q_model(mdp: MDPSpec, pi_e: TabularPolicy) -> QModel:
    from .core import q_tables

    Q, V = q_tables(mdp, pi_e)
    return QModel(Q, V)


def fit_q_model(batch, pi_e: TabularPolicy, gamma: float, sweeps: int = 100, horizon: int | None = None) -> QModel:
    """Fitted-Q evaluation by tabular Bellman backups over the batch.

    A backup replaces ``Q(s, a)`` with the batch mean of
    ``r + gamma * sum_a' pi_e(a'|s') Q(s', a')`` (no bootstrap after a
    terminal). With ``horizon`` the backups run backwards in time and give a
    time-indexed ``(horizon, S, A)`` model; otherwise ``sweeps`` stationary
    backups are applied. Unseen actions take the mean of the seen actions in
    the same state; unseen states stay at zero.
    """
    b = as_batch(batch)
    S, A = pi_e.n_states, pi_e.n_actions
    m = b.mask
    s, a, r, s2 = b.states[m], b.actions[m], b.rewards[m], b.next_states[m]
    done = np.zeros_like(m)
    last = b.lengths - 1
    rows = np.flatnonzero(b.lengths > 0)
    done[rows, last[rows]] = [b.trajectories[i].transitions[-1].done for i in rows]
    done = done[m]
    flat = s * A + a
    counts = np.bincount(flat, minlength=S * A).astype(float)
    seen = (counts > 0).reshape(S, A)
    n_seen = seen.sum(axis=1, keepdims=True)

    def backup(V):
        target = r + gamma * np.where(done, 0.0, V[s2])
        Q = (np.bincount(flat, weights=target, minlength=S * A) / np.maximum(counts, 1)).reshape(S, A)
        fill = np.where(n_seen > 0, (Q * seen).sum(axis=1, keepdims=True) / np.maximum(n_seen, 1), 0.0)
        return np.where(seen, Q, fill)

    def value(Q):
        return (Q * pi_e.probs).sum(axis=1)

    if horizon is None:
        Q = np.zeros((S, A))
        for _ in range(sweeps):
            Q = backup(value(Q))
        return QModel.from_q(Q, pi_e)
    Qt = np.zeros((horizon, S, A))
    V = np.zeros(S)
    for t in range(horizon - 1, -1, -1):
        Qt[t] = backup(V)
        V = value(Qt[t])
    return QModel.from_q(Qt, pi_e)


def dr_estimate(batch, weights: np.ndarray, qmodel: QModel, gamma: float, conditioning: str = "state",
                name: str | None = None) -> EstimateReport:
    """Doubly robust estimate (per-decision form).

    Per trajectory: ``sum_t gamma^t [rho_{0:t} (r_t - Q(s_t, a_t)) + rho_{0:t-1} V(s_t)]``
    with ``rho_{0:-1} = 1``. The model is always state-based; only the
    ratios depend on ``conditioning``.
    """
    b = as_batch(batch)
    W = np.asarray(weights, dtype=float)
    n, width = b.states.shape
    t = np.broadcast_to(np.arange(width), (n, width))
    m = b.mask
    q = np.zeros((n, width))
    v = np.zeros((n, width))
    q[m] = qmodel.q_at(t[m], b.states[m], b.actions[m])
    v[m] = qmodel.v_at(t[m], b.states[m])
    if not np.isfinite(q[m]).all():
        raise CoverageError("model has no finite Q value for some batch (s, a)")
    prev = np.concatenate([np.ones((n, 1)), W[:, :-1]], axis=1)
    disc = gamma ** np.arange(width)
    terms = (W * (b.rewards - q) + prev * v) * m
    vals = terms @ disc
    name = name or ("CDR" if conditioning == "concept" else "DR")
    return EstimateReport(name, float(vals.mean()), vals, W, b.lengths,
                          config={"mode": "DR", "gamma": gamma, "conditioning": conditioning})


def _density_ratio(d_e: np.ndarray, d_b: np.ndarray, visited) -> np.ndarray:
    bad = visited & (d_b <= 0)
    if bad.any():
        raise CoverageError(f"zero behaviour density at {tuple(int(i) for i in np.argwhere(bad)[0])}")
    return np.divide(d_e, d_b, out=np.zeros_like(d_e, dtype=float), where=d_b > 0)


def mis_ratios(batch, d_eval, d_behavior, conditioning: str = "state", cmap=None,
               per_timestep: bool = False) -> np.ndarray:
    """``(N, width)`` marginal density ratios ``d_e(x_t) / d_b(x_t)``; zero on padding.

    ``x = (s, a)`` for state conditioning and ``x = c`` for concepts. Time
    averaged frequencies by default; ``per_timestep`` uses the per-step
    occupancies (probability of the episode being at ``x`` at step ``t``).
    """
    b = as_batch(batch)
    n, width = b.states.shape
    m = b.mask

    def table(vt):
        if per_timestep:
            if not vt.per_timestep:
                raise ValueError("per-timestep MIS needs per-timestep visitation tables")
            occ = vt.occupancy()
        else:
            occ = vt.sa_freq()[None]
        if conditioning == "concept":
            occ = occ.sum(axis=2)  # (T, S)
            out = np.zeros((occ.shape[0], cmap.n_concepts))
            for c in range(cmap.n_concepts):
                out[:, c] = occ[:, cmap.ids == c].sum(axis=1)
            return out
        return occ

    de, db = table(d_eval), table(d_behavior)
    if per_timestep:
        if width > de.shape[0]:
            raise ValueError("batch longer than visitation tables")
        tt = np.broadcast_to(np.arange(width), (n, width))[m]
    else:
        tt = np.zeros(int(m.sum()), dtype=np.int64)
    if conditioning == "concept":
        key = (tt, cmap.ids[b.states[m]])
    else:
        key = (tt, b.states[m], b.actions[m])
    visited = np.zeros(db.shape, dtype=bool)
    visited[key] = True
    ratio = _density_ratio(de, db, visited)
    w = np.zeros((n, width))
    w[m] = ratio[key]
    return w


def mis_estimate(batch, d_eval, d_behavior, gamma: float, conditioning: str = "state", cmap=None,
                 per_timestep: bool = False, name: str | None = None) -> EstimateReport:
    """Marginalised IS: ``(1/N) sum_n sum_t w(x_t) gamma^t r_t`` with ``w`` from :func:`mis_ratios`."""
    b = as_batch(batch)
    w = mis_ratios(b, d_eval, d_behavior, conditioning, cmap, per_timestep)
    disc = gamma ** np.arange(b.width)
    vals = (w * b.rewards) @ disc
    name = name or ("CMIS" if conditioning == "concept" else "MIS")
    return EstimateReport(name, float(vals.mean()), vals, np.ones(b.states.shape), b.lengths,
                          config={"mode": "MIS", "gamma": gamma, "per_timestep": per_timestep})


ESTIMATOR_MODES = {
    "IS": ("IS", False, "state"),
    "PDIS": ("PDIS", False, "state"),
    "WIS": ("IS", True, "state"),
    "PDWIS": ("PDIS", True, "state"),
    "CIS": ("IS", False, "concept"),
    "CPDIS": ("PDIS", False, "concept"),
    "CWIS": ("IS", True, "concept"),
    "CPDWIS": ("PDIS", True, "concept"),
    "DR": ("DR", False, "state"),
    "CDR": ("DR", False, "concept"),
    "MIS": ("MIS", False, "state"),
    "CMIS": ("MIS", False, "concept"),
}


@dataclass(frozen=True)
class RatioTables:
    """Evaluation (numerator) and behaviour (denominator) action tables.

    Rows are looked up through ``index[state]`` when ``index`` is given
    (concept ids), otherwise by state directly.
    """

    num: np.ndarray
    den: np.ndarray
    index: np.ndarray | None = None

    def weights(self, batch: Batch) -> np.ndarray:
        return cumulative_weights(step_ratios(batch, self.num, self.den, self.index))


def estimate(name: str, batch, gamma: float, state_tables: RatioTables, concept_tables: RatioTables | None = None,
             qmodel: QModel | None = None, mis_tables=None, cmap=None, pd_normalization: str = "per_step",
             per_timestep_mis: bool = False) -> EstimateReport:
    """Run a named estimator (``IS``, ``CPDWIS``, ``CDR``, ``CMIS`` ...)."""
    if name not in ESTIMATOR_MODES:
        raise ValueError(f"unknown estimator {name!r}")
    mode, normalized, conditioning = ESTIMATOR_MODES[name]
    b = as_batch(batch)
    if mode == "MIS":
        if mis_tables is None:
            raise ValueError(f"{name} needs (d_eval, d_behavior) visitation tables")
        return mis_estimate(b, mis_tables[0], mis_tables[1], gamma, conditioning, cmap, per_timestep_mis, name=name)
    tables = concept_tables if conditioning == "concept" else state_tables
    if tables is None:
        raise ValueError(f"{name} needs concept policy tables")
    W = tables.weights(b)
    if mode == "DR":
        if qmodel is None:
            raise ValueError(f"{name} needs a Q model")
        return dr_estimate(b, W, qmodel, gamma, conditioning, name=name)
    return point_estimate(b, W, gamma, mode, normalized, name=name, pd_normalization=pd_normalization)
