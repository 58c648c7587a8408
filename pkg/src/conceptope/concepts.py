"""Interpretable gridworld features, concept maps and concept-conditioned policies."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from sklearn.cluster import KMeans

from .core import Batch, MDPSpec, TabularPolicy, as_batch, exact_occupancy, rollout_batch
from .envs import ORACLE_BLOCKS, Gridworld, GridworldConfig
from .errors import ConfigError, DataError

FEATURE_NAMES = (
    "x",
    "y",
    "horizontal_distance_to_goal",
    "vertical_distance_to_goal",
    "horizontal_wind",
    "vertical_wind",
    "region_penalty",
    "distance_left_wall",
    "distance_right_wall",
    "distance_top_wall",
    "distance_bottom_wall",
    "penalty_left_block",
    "penalty_right_block",
    "penalty_top_block",
    "penalty_bottom_block",
    "distance_left_block",
    "distance_right_block",
    "distance_top_block",
    "distance_bottom_block",
    "constant",
)
N_FEATURES = len(FEATURE_NAMES)


def raw_features(cfg: GridworldConfig, state: int) -> np.ndarray:
    """Unnormalised feature vector (cells, wind units, penalty units, constant)."""
    W, H, B = cfg.width, cfg.height, cfg.block_size
    x, y = int(state) % W, int(state) // W
    if not (0 <= x < W and 0 <= y < H):
        raise ConfigError(f"state {state} outside the grid")
    bx, by = x // B, y // B
    nb = cfg.n_blocks_side
    gx, gy = cfg.goal
    wx, wy = cfg.wind[by, bx]

    def pen(jx, jy):
        return float(cfg.region_penalty[jy, jx]) if 0 <= jx < nb and 0 <= jy < nb else 0.0

    return np.array(
        [
            x,
            y,
            abs(gx - x),
            abs(gy - y),
            wx,
            wy,
            cfg.region_penalty[by, bx],
            x,
            W - 1 - x,
            H - 1 - y,
            y,
            pen(bx - 1, by),
            pen(bx + 1, by),
            pen(bx, by + 1),
            pen(bx, by - 1),
            x - bx * B + 1,
            (bx + 1) * B - x,
            (by + 1) * B - y,
            y - by * B + 1,
            1.0,
        ],
        dtype=float,
    )


def feature_scale(cfg: GridworldConfig) -> np.ndarray:
    pen_max = float(np.abs(cfg.region_penalty).max()) or 1.0
    scale = np.full(N_FEATURES, float(cfg.width))
    scale[[4, 5]] = 2.0
    scale[[6, 11, 12, 13, 14]] = pen_max
    scale[-1] = 1.0
    return scale


def extract_features(cfg: GridworldConfig, state: int) -> np.ndarray:
    """Feature vector scaled into [-1, 1]; the last entry is the constant 1."""
    return raw_features(cfg, state) / feature_scale(cfg)


_FEATURE_TABLES: dict = {}


def feature_table(cfg: GridworldConfig) -> np.ndarray:
    """``(n_states, 20)`` array of normalised features for every cell."""
    key = (cfg.goal, cfg.wind.tobytes(), cfg.region_penalty.tobytes())
    if key not in _FEATURE_TABLES:
        table = np.stack([extract_features(cfg, s) for s in range(cfg.n_states)])
        table.setflags(write=False)
        _FEATURE_TABLES[key] = table
    return _FEATURE_TABLES[key]


@dataclass(frozen=True)
class ConceptMap:
    """State -> concept mapping.

    Discrete maps carry ``ids`` (one integer per state). Learned maps carry
    real ``vectors`` and may also carry a discretised ``ids`` view.
    """

    kind: str
    ids: np.ndarray | None = None
    vectors: np.ndarray | None = None
    n_concepts: int | None = None

    def __post_init__(self):
        if self.ids is None and self.vectors is None:
            raise ConfigError("concept map needs ids or vectors")
        if self.ids is not None:
            ids = np.asarray(self.ids, dtype=np.int64)
            ids.setflags(write=False)
            object.__setattr__(self, "ids", ids)
            if self.n_concepts is None:
                object.__setattr__(self, "n_concepts", int(ids.max()) + 1)
        if self.vectors is not None:
            v = np.asarray(self.vectors, dtype=float)
            v.setflags(write=False)
            object.__setattr__(self, "vectors", v)

    @property
    def discrete(self) -> bool:
        return self.ids is not None

    @property
    def n_states(self) -> int:
        return len(self.ids) if self.ids is not None else len(self.vectors)

    def __call__(self, state):
        if self.ids is not None:
            return self.ids[state]
        return self.vectors[state]

    @classmethod
    def identity(cls, n_states: int) -> "ConceptMap":
        return cls("identity", ids=np.arange(n_states))

    def to_csv(self, path) -> None:
        if self.ids is None:
            raise ConfigError("only discrete concept maps export as state/concept tables")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["state_id", "concept_id"])
            for s, c in enumerate(self.ids):
                w.writerow([s, int(c)])

    @classmethod
    def from_csv(cls, path, kind: str = "table") -> "ConceptMap":
        with open(path, newline="") as fh:
            rows = sorted((int(r["state_id"]), int(r["concept_id"])) for r in csv.DictReader(fh))
        return cls(kind, ids=np.array([c for _, c in rows]))


def known_concept(cfg: GridworldConfig, state):
    """Block id ``5 * block_y + block_x``: 25 values of distance-to-goal and wind."""
    bx, by = cfg.block_of(state)
    return by * cfg.n_blocks_side + bx


def oracle_concept(cfg: GridworldConfig, state):
    bx, by = cfg.block_of(state)
    return ORACLE_BLOCKS[by, bx]


def imperfect_concept(cfg: GridworldConfig, state):
    """Bucket of horizontal distance to the goal only (width-4 buckets)."""
    x, _ = cfg.coords(state)
    return (cfg.goal[0] - x) // cfg.block_size


def _map_all(kind, fn, cfg) -> ConceptMap:
    states = np.arange(cfg.n_states)
    return ConceptMap(kind, ids=np.asarray(fn(cfg, states), dtype=np.int64))


def known_concept_map(cfg: GridworldConfig) -> ConceptMap:
    return _map_all("known", known_concept, cfg)


def oracle_concept_map(cfg: GridworldConfig) -> ConceptMap:
    return _map_all("oracle", oracle_concept, cfg)


def imperfect_concept_map(cfg: GridworldConfig) -> ConceptMap:
    return _map_all("imperfect", imperfect_concept, cfg)


def kmeans_labels(points: np.ndarray, K: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd's algorithm with k-means++ seeding; returns (labels, centres)."""
    points = np.asarray(points, dtype=float)
    n_distinct = len(np.unique(points, axis=0))
    if not 1 <= K <= n_distinct:
        raise ConfigError(f"K={K} must lie in [1, {n_distinct}] (number of distinct points)")
    km = KMeans(n_clusters=K, init="k-means++", n_init=1, max_iter=100, tol=1e-6, random_state=int(seed) % 2**32)
    labels = km.fit_predict(points)
    return labels.astype(np.int64), km.cluster_centers_


def kmeans_abstraction(states, K: int, seed: int, cfg: GridworldConfig = GridworldConfig()) -> ConceptMap:
    """Cluster grid cells on their (x, y) coordinates.

    Clustering runs on ``states``; every grid cell is then assigned to its
    nearest centre so the map is total.
    """
    states = np.unique(np.asarray(states, dtype=np.int64))
    xy = np.stack(cfg.coords(states), axis=1).astype(float)
    labels, centres = kmeans_labels(xy, K, seed)
    all_xy = np.stack(cfg.coords(np.arange(cfg.n_states)), axis=1).astype(float)
    d2 = ((all_xy[:, None, :] - centres[None]) ** 2).sum(axis=2)
    ids = d2.argmin(axis=1)
    ids[states] = labels
    return ConceptMap(f"kmeans:{K}", ids=ids, n_concepts=K)


@dataclass(frozen=True)
class ConceptPolicy:
    """``probs[c, a] = pi^c(a|c)`` over discrete concept ids."""

    probs: np.ndarray
    name: str = ""

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=float)
        if p.ndim != 2 or (p < 0).any() or not np.allclose(p.sum(axis=1), 1.0, atol=1e-12, rtol=0):
            raise ConfigError("concept policy rows must be distributions")
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)

    def state_table(self, cmap: ConceptMap) -> np.ndarray:
        """Expand to a ``(n_states, n_actions)`` table via the concept map."""
        return self.probs[cmap.ids]


@dataclass(frozen=True)
class VisitationTable:
    """Visit counts over state-action pairs.

    ``counts`` has shape ``(S, A)`` or ``(T, S, A)`` when per-timestep. Exact
    occupancies are stored as counts with ``n_rollouts = 1``.
    """

    counts: np.ndarray
    n_rollouts: int

    @property
    def per_timestep(self) -> bool:
        return self.counts.ndim == 3

    def sa_counts(self) -> np.ndarray:
        return self.counts.sum(axis=0) if self.per_timestep else self.counts

    def state_freq(self) -> np.ndarray:
        c = self.sa_counts().sum(axis=1)
        return c / c.sum()

    def sa_freq(self) -> np.ndarray:
        c = self.sa_counts()
        return c / c.sum()

    def slice_freq(self) -> np.ndarray:
        """Per-timestep frequencies, each non-empty slice normalised to 1."""
        if not self.per_timestep:
            return self.sa_freq()[None]
        tot = self.counts.sum(axis=(1, 2), keepdims=True)
        return np.divide(self.counts, tot, out=np.zeros_like(self.counts, dtype=float), where=tot > 0)

    def occupancy(self) -> np.ndarray:
        """Counts per rollout, i.e. probability of being at (s, a) at step t."""
        return self.counts / self.n_rollouts

    @classmethod
    def exact(cls, mdp: MDPSpec, policy: TabularPolicy, per_timestep: bool = False) -> "VisitationTable":
        d = exact_occupancy(mdp, policy)
        return cls(d if per_timestep else d.sum(axis=0), 1)

    @classmethod
    def from_batch(cls, batch, n_states: int, n_actions: int, per_timestep: bool = False) -> "VisitationTable":
        b = as_batch(batch)
        m = b.mask
        if per_timestep:
            counts = np.zeros((b.horizon, n_states, n_actions))
            t_idx = np.broadcast_to(np.arange(b.width), m.shape)[m]
            np.add.at(counts, (t_idx, b.states[m], b.actions[m]), 1.0)
        else:
            counts = np.zeros((n_states, n_actions))
            np.add.at(counts, (b.states[m], b.actions[m]), 1.0)
        return cls(counts, len(b))


def estimate_visitation(env, policy: TabularPolicy, n_rollouts: int, horizon: int | None = None,
                        seed: int = 0, per_timestep: bool = False) -> VisitationTable:
    """Empirical visitation from seeded on-policy rollouts."""
    if n_rollouts < 1:
        raise ConfigError("n_rollouts must be >= 1")
    mdp = env.mdp if isinstance(env, Gridworld) else env
    if horizon is not None and horizon != mdp.horizon:
        mdp = MDPSpec(mdp.transition_probs, mdp.rewards, mdp.gamma, horizon, mdp.initial_dist, mdp.terminal)
    trajs = rollout_batch(mdp, policy, n_rollouts, seed)
    batch = Batch(trajs, horizon=mdp.horizon)
    return VisitationTable.from_batch(batch, mdp.n_states, mdp.n_actions, per_timestep)


def _floor_rows(p: np.ndarray, floor: float) -> np.ndarray:
    if floor <= 0:
        return p
    low = p < floor
    if not low.any():
        return p
    p = np.where(low, floor, p)
    return p / p.sum(axis=1, keepdims=True)


def aggregate_concept_policy(state_policy: TabularPolicy, cmap: ConceptMap, visitation: VisitationTable,
                             smoothing: float = 1e-3) -> ConceptPolicy:
    """Visitation-weighted average of the state policy inside each concept.

    ``pi^c(a|c) = sum_{s: phi(s)=c} w(s) pi(a|s)`` with
    ``w(s) proportional to d(s) + smoothing`` over the concept's preimage. Rows are
    floored at ``smoothing`` and renormalised.
    """
    if not cmap.discrete:
        raise ConfigError("aggregation needs a discrete concept map")
    d = visitation.state_freq() + smoothing
    K, A = cmap.n_concepts, state_policy.n_actions
    out = np.zeros((K, A))
    for c in range(K):
        members = np.flatnonzero(cmap.ids == c)
        if members.size == 0:
            raise DataError(f"concept {c} has an empty preimage")
        w = d[members]
        if w.sum() <= 0:
            raise DataError(f"visitation has no mass on concept {c} and smoothing is zero")
        out[c] = (w / w.sum()) @ state_policy.probs[members]
    return ConceptPolicy(_floor_rows(out, smoothing), name=state_policy.name)


def fit_concept_behavior_policy(batch, cmap: ConceptMap, smoothing: float = 1e-3,
                                n_actions: int | None = None) -> ConceptPolicy:
    """Laplace-smoothed action frequencies per concept; unseen concepts are uniform."""
    b = as_batch(batch)
    A = n_actions or int(b.actions[b.mask].max()) + 1
    counts = np.zeros((cmap.n_concepts, A))
    np.add.at(counts, (cmap.ids[b.states[b.mask]], b.actions[b.mask]), 1.0)
    num = counts + smoothing
    den = num.sum(axis=1, keepdims=True)
    probs = np.divide(num, den, out=np.full_like(num, 1.0 / A), where=den > 0)
    return ConceptPolicy(probs, name="fitted_behavior")


def proximity_gap(cpolicy: ConceptPolicy, spolicy: TabularPolicy, cmap: ConceptMap, states=None) -> float:
    """``max_{s, a} |pi^c(a|phi(s)) - pi(a|s)|`` over ``states`` (default all)."""
    states = np.arange(spolicy.n_states) if states is None else np.asarray(states)
    diff = np.abs(cpolicy.probs[cmap.ids[states]] - spolicy.probs[states])
    return float(diff.max())


# Concept desiderata diagnostics


def conciseness(weights: np.ndarray, tol: float = 1e-2) -> int:
    """Number of near-zero coefficients in a learned concept weight matrix."""
    return int((np.abs(weights) < tol).sum())


def diversity(weights: np.ndarray) -> float:
    """Largest pairwise cosine similarity between concept weight rows."""
    w = np.asarray(weights, dtype=float)
    norms = np.linalg.norm(w, axis=1)
    cos = (w @ w.T) / np.maximum(np.outer(norms, norms), 1e-300)
    iu = np.triu_indices(len(w), k=1)
    return float(cos[iu].max()) if iu[0].size else 0.0


def trajectory_coverage(batch, cpolicy: ConceptPolicy, cmap: ConceptMap, spolicy: TabularPolicy) -> tuple[float, float]:
    """Summed probabilities of the logged actions under concept vs state policies."""
    b = as_batch(batch)
    s, a = b.states[b.mask], b.actions[b.mask]
    return float(cpolicy.probs[cmap.ids[s], a].sum()), float(spolicy.probs[s, a].sum())
