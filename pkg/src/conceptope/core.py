"""MDP primitives, trajectories, rollouts and exact enumeration oracles."""
from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, EnumerationBudgetError

ROW_TOL = 1e-12


@dataclass(frozen=True)
class Transition:
    state: int
    action: int
    reward: float
    next_state: int
    done: bool = False


@dataclass(frozen=True)
class Trajectory:
    """One episode as an ordered tuple of transitions."""

    transitions: tuple[Transition, ...]
    seed: int | None = None
    policy_id: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "transitions", tuple(self.transitions))

    def __len__(self) -> int:
        return len(self.transitions)

    def __iter__(self):
        return iter(self.transitions)

    @property
    def states(self) -> np.ndarray:
        return np.array([tr.state for tr in self.transitions], dtype=np.int64)

    @property
    def actions(self) -> np.ndarray:
        return np.array([tr.action for tr in self.transitions], dtype=np.int64)

    @property
    def rewards(self) -> np.ndarray:
        return np.array([tr.reward for tr in self.transitions], dtype=float)

    def validate(self) -> None:
        """Raise ``ValueError`` if the chaining or termination invariants fail."""
        trs = self.transitions
        for t in range(len(trs) - 1):
            if trs[t].next_state != trs[t + 1].state:
                raise ValueError(f"transition {t} does not chain into {t + 1}")
            if trs[t].done:
                raise ValueError(f"done flag set on non-final transition {t}")
        for t, tr in enumerate(trs):
            if not np.isfinite(tr.reward):
                raise ValueError(f"non-finite reward at step {t}")

    def to_json(self) -> str:
        steps = [[tr.state, tr.action, tr.reward, tr.next_state, tr.done] for tr in self.transitions]
        return json.dumps({"steps": steps, "seed": self.seed, "policy_id": self.policy_id})

    @classmethod
    def from_json(cls, line: str) -> "Trajectory":
        obj = json.loads(line)
        trs = tuple(
            Transition(int(s), int(a), float(r), int(s2), bool(d)) for s, a, r, s2, d in obj["steps"]
        )
        return cls(trs, seed=obj.get("seed"), policy_id=obj.get("policy_id"))


def write_jsonl(path, trajectories: Iterable[Trajectory]) -> None:
    with open(path, "w") as fh:
        for traj in trajectories:
            fh.write(traj.to_json())
            fh.write("\n")


def read_jsonl(path) -> list[Trajectory]:
    return [Trajectory.from_json(line) for line in Path(path).read_text().splitlines() if line.strip()]


class Batch:
    """Padded array view over a list of trajectories.

    Steps past the end of an episode carry zero reward and ``mask == False``;
    estimators freeze importance weights there.
    """

    def __init__(self, trajectories: Sequence[Trajectory], horizon: int | None = None):
        if len(trajectories) == 0:
            raise ValueError("empty batch")
        self.trajectories = list(trajectories)
        self.lengths = np.array([len(t) for t in self.trajectories], dtype=np.int64)
        width = max(int(self.lengths.max()), 1)
        self.horizon = int(horizon) if horizon is not None else width
        if self.horizon < width:
            raise ValueError(f"trajectory longer ({width}) than horizon {self.horizon}")
        n = len(self.trajectories)
        self.states = np.zeros((n, width), dtype=np.int64)
        self.actions = np.zeros((n, width), dtype=np.int64)
        self.next_states = np.zeros((n, width), dtype=np.int64)
        self.rewards = np.zeros((n, width), dtype=float)
        self.mask = np.zeros((n, width), dtype=bool)
        for i, traj in enumerate(self.trajectories):
            k = len(traj)
            if k == 0:
                continue
            arr = np.array([(tr.state, tr.action, tr.next_state) for tr in traj.transitions], dtype=np.int64)
            self.states[i, :k] = arr[:, 0]
            self.actions[i, :k] = arr[:, 1]
            self.next_states[i, :k] = arr[:, 2]
            self.rewards[i, :k] = [tr.reward for tr in traj.transitions]
            self.mask[i, :k] = True

    def __len__(self) -> int:
        return len(self.trajectories)

    @property
    def width(self) -> int:
        return self.states.shape[1]

    def subset(self, idx) -> "Batch":
        out = object.__new__(Batch)
        idx = np.asarray(idx)
        out.trajectories = [self.trajectories[i] for i in idx]
        out.horizon = self.horizon
        for name in ("lengths", "states", "actions", "next_states", "rewards", "mask"):
            setattr(out, name, getattr(self, name)[idx])
        return out

    def discounted_returns(self, gamma: float) -> np.ndarray:
        disc = gamma ** np.arange(self.width)
        return (self.rewards * disc).sum(axis=1)


def as_batch(data, horizon: int | None = None) -> Batch:
    if isinstance(data, Batch):
        return data
    return Batch(list(data), horizon=horizon)


@dataclass(frozen=True)
class TabularPolicy:
    """Action distribution per state, ``probs[s, a] = pi(a|s)``."""

    probs: np.ndarray
    name: str = ""

    def __post_init__(self):
        p = np.array(self.probs, dtype=float)
        if p.ndim != 2:
            raise ConfigError("policy table must be 2-D (states x actions)")
        if (p < 0).any() or not np.allclose(p.sum(axis=1), 1.0, atol=ROW_TOL, rtol=0):
            raise ConfigError("policy rows must be non-negative and sum to 1")
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)

    @property
    def n_states(self) -> int:
        return self.probs.shape[0]

    @property
    def n_actions(self) -> int:
        return self.probs.shape[1]

    def __call__(self, state: int, action: int) -> float:
        return float(self.probs[state, action])

    @classmethod
    def uniform(cls, n_states: int, n_actions: int, name: str = "uniform") -> "TabularPolicy":
        return cls(np.full((n_states, n_actions), 1.0 / n_actions), name=name)


@dataclass(frozen=True)
class MDPSpec:
    """Finite-horizon tabular MDP.

    ``transition_probs[s, a, s']`` and ``rewards[s, a]``; states flagged in
    ``terminal`` end the episode on arrival.
    """

    transition_probs: np.ndarray
    rewards: np.ndarray
    gamma: float
    horizon: int
    initial_dist: np.ndarray
    terminal: np.ndarray | None = None

    def __post_init__(self):
        P = np.array(self.transition_probs, dtype=float)
        R = np.array(self.rewards, dtype=float)
        d0 = np.array(self.initial_dist, dtype=float)
        if P.ndim != 3 or P.shape[0] != P.shape[2] or R.shape != P.shape[:2]:
            raise ConfigError("inconsistent transition/reward shapes")
        if not np.allclose(P.sum(axis=2), 1.0, atol=ROW_TOL, rtol=0) or (P < 0).any():
            raise ConfigError("transition rows must be distributions")
        if d0.shape != (P.shape[0],) or abs(d0.sum() - 1.0) > ROW_TOL or (d0 < 0).any():
            raise ConfigError("initial distribution must be a distribution over states")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError("gamma must lie in [0, 1]")
        if self.horizon < 1:
            raise ConfigError("horizon must be positive")
        term = np.zeros(P.shape[0], dtype=bool) if self.terminal is None else np.array(self.terminal, dtype=bool)
        for arr in (P, R, d0, term):
            arr.setflags(write=False)
        object.__setattr__(self, "transition_probs", P)
        object.__setattr__(self, "rewards", R)
        object.__setattr__(self, "initial_dist", d0)
        object.__setattr__(self, "terminal", term)

    @property
    def n_states(self) -> int:
        return self.transition_probs.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition_probs.shape[1]

    @cached_property
    def _cdf(self) -> np.ndarray:
        cdf = np.cumsum(self.transition_probs, axis=2)
        cdf[..., -1] = 1.0
        return cdf

    def check_policy(self, policy: TabularPolicy) -> None:
        if policy.probs.shape != (self.n_states, self.n_actions):
            raise ConfigError(
                f"policy shape {policy.probs.shape} does not match MDP ({self.n_states}, {self.n_actions})"
            )


def discounted_return(traj: Trajectory, gamma: float) -> float:
    total, disc = 0.0, 1.0
    for tr in traj.transitions:
        total += disc * tr.reward
        disc *= gamma
    return total


def _sample_index(cdf_row: np.ndarray, u: float) -> int:
    return int(min(np.searchsorted(cdf_row, u, side="right"), len(cdf_row) - 1))


def rollout(mdp: MDPSpec, policy: TabularPolicy, seed, horizon: int | None = None) -> Trajectory:
    """Sample one episode; the generator seeded from ``seed`` is the only randomness."""
    mdp.check_policy(policy)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    T = mdp.horizon if horizon is None else horizon
    pcdf = np.cumsum(policy.probs, axis=1)
    s = _sample_index(np.cumsum(mdp.initial_dist), rng.random())
    out = []
    for _ in range(T):
        a = _sample_index(pcdf[s], rng.random())
        s2 = _sample_index(mdp._cdf[s, a], rng.random())
        done = bool(mdp.terminal[s2])
        out.append(Transition(s, a, float(mdp.rewards[s, a]), s2, done))
        if done:
            break
        s = s2
    return Trajectory(tuple(out), seed=seed if isinstance(seed, (int, np.integer)) else None,
                      policy_id=policy.name or None)


def rollout_batch(mdp: MDPSpec, policy: TabularPolicy, n: int, seed, policy_id: str | None = None) -> list[Trajectory]:
    """Vectorised sampling of ``n`` episodes.

    Episodes are stepped in lock-step; each step draws one uniform per live
    episode for the action and one for the next state.
    """
    mdp.check_policy(policy)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    pcdf = np.cumsum(policy.probs, axis=1)
    pcdf[:, -1] = 1.0
    d0cdf = np.cumsum(mdp.initial_dist)
    d0cdf[-1] = 1.0
    s = np.minimum(np.searchsorted(d0cdf, rng.random(n), side="right"), mdp.n_states - 1)
    alive = np.ones(n, dtype=bool)
    cols = []
    for _ in range(mdp.horizon):
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        u_a = rng.random(idx.size)
        u_s = rng.random(idx.size)
        st = s[idx]
        a = (u_a[:, None] >= pcdf[st]).sum(axis=1)
        a = np.minimum(a, mdp.n_actions - 1)
        s2 = (u_s[:, None] >= mdp._cdf[st, a]).sum(axis=1)
        s2 = np.minimum(s2, mdp.n_states - 1)
        r = mdp.rewards[st, a]
        done = mdp.terminal[s2]
        cols.append((idx, st, a, r, s2, done))
        s[idx] = s2
        alive[idx[done]] = False
    steps: list[list[Transition]] = [[] for _ in range(n)]
    for idx, st, a, r, s2, done in cols:
        for j in range(idx.size):
            steps[idx[j]].append(Transition(int(st[j]), int(a[j]), float(r[j]), int(s2[j]), bool(done[j])))
    return [Trajectory(tuple(tr), policy_id=policy_id or policy.name or None) for tr in steps]


def q_tables(mdp: MDPSpec, policy: TabularPolicy) -> tuple[np.ndarray, np.ndarray]:
    """Time-indexed ``Q[t, s, a]`` and ``V[t, s]`` by backward induction.

    ``Q[t]`` is the value with ``horizon - t`` decisions remaining. Arriving at
    a terminal state contributes zero future value.
    """
    mdp.check_policy(policy)
    T, S, A = mdp.horizon, mdp.n_states, mdp.n_actions
    Q = np.zeros((T + 1, S, A))
    V = np.zeros((T + 1, S))
    cont = mdp.transition_probs * (~mdp.terminal)[None, None, :]
    for t in range(T - 1, -1, -1):
        Q[t] = mdp.rewards + mdp.gamma * cont @ V[t + 1]
        V[t] = (policy.probs * Q[t]).sum(axis=1)
    return Q[:T], V[:T]


def enumerate_value(mdp: MDPSpec, policy: TabularPolicy) -> float:
    """Exact value ``sum_s d0(s) V_0(s)`` by dynamic programming over (t, s)."""
    _, V = q_tables(mdp, policy)
    return float(mdp.initial_dist @ V[0])


def exact_occupancy(mdp: MDPSpec, policy: TabularPolicy) -> np.ndarray:
    """Per-timestep state-action occupancy ``d[t, s, a]`` (episodes still running)."""
    mdp.check_policy(policy)
    T, S, A = mdp.horizon, mdp.n_states, mdp.n_actions
    d = np.zeros((T, S, A))
    ds = mdp.initial_dist.copy()
    for t in range(T):
        d[t] = ds[:, None] * policy.probs
        nxt = np.einsum("sa,sap->p", d[t], mdp.transition_probs)
        ds = nxt * (~mdp.terminal)
    return d


def enumerate_trajectory_dist(
    mdp: MDPSpec, policy: TabularPolicy, max_T: int | None = None, budget: int = 10**6
) -> list[tuple[Trajectory, float]]:
    """Every trajectory with non-zero probability, with its probability.

    Raises
    ------
    EnumerationBudgetError
        if ``(n_states * n_actions) ** max_T`` exceeds ``budget``.
    """
    mdp.check_policy(policy)
    T = mdp.horizon if max_T is None else max_T
    if (mdp.n_states * mdp.n_actions) ** T > budget:
        raise EnumerationBudgetError(
            f"enumeration size ({mdp.n_states}*{mdp.n_actions})^{T} exceeds budget {budget}"
        )
    out: list[tuple[Trajectory, float]] = []
    P, R, pi = mdp.transition_probs, mdp.rewards, policy.probs

    def extend(prefix: list[Transition], s: int, prob: float):
        if len(prefix) == T:
            out.append((Trajectory(tuple(prefix)), prob))
            return
        for a in range(mdp.n_actions):
            pa = pi[s, a]
            if pa == 0.0:
                continue
            for s2 in np.flatnonzero(P[s, a]):
                p = prob * pa * P[s, a, s2]
                done = bool(mdp.terminal[s2])
                step = Transition(int(s), int(a), float(R[s, a]), int(s2), done)
                if done:
                    out.append((Trajectory(tuple(prefix) + (step,)), p))
                else:
                    extend(prefix + [step], int(s2), p)

    for s0 in np.flatnonzero(mdp.initial_dist):
        extend([], int(s0), float(mdp.initial_dist[s0]))
    return out


def trajectory_probability(traj: Trajectory, mdp: MDPSpec, policy: TabularPolicy) -> float:
    if len(traj) == 0:
        return 1.0
    p = mdp.initial_dist[traj.transitions[0].state]
    for tr in traj.transitions:
        p *= policy.probs[tr.state, tr.action] * mdp.transition_probs[tr.state, tr.action, tr.next_state]
    return float(p)

