"""Concept interventions: criteria, blended concepts and intervened estimates."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from conceptope.concepts import ConceptMap
from conceptope.core import Batch, TabularPolicy, as_batch
from conceptope.errors import ConfigError, DataError
from conceptope.estimators import ESTIMATOR_MODES, EstimateReport, RatioTables, cumulative_weights, point_estimate

CRITERION_KINDS = ("oracle_match", "threshold", "always", "never", "custom_table")
STRATEGIES = ("state_policy", "state_mle_policy", "qualitative")
MLE_FLOOR = 1e-6


@dataclass(frozen=True)
class Criterion:
    """``kappa(s, c) in {0, 1}``; ``1`` keeps the concept, ``0`` intervenes.

    * ``oracle_match``: ``1`` iff ``concept id == reference[s]``
    * ``threshold``: ``1`` iff ``features[s, feature_index] > threshold``
    * ``custom_table``: ``table[s]``
    """

    kind: str
    reference: np.ndarray | None = None
    features: np.ndarray | None = None
    feature_index: int = 0
    threshold: float = 0.0
    table: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in CRITERION_KINDS:
            raise ConfigError(f"unknown criterion kind {self.kind!r}")
        need = {"oracle_match": "reference", "threshold": "features", "custom_table": "table"}.get(self.kind)
        if need and getattr(self, need) is None:
            raise ConfigError(f"criterion {self.kind} needs {need}")
        if self.kind == "custom_table" and not np.isin(self.table, (0, 1)).all():
            raise ConfigError("custom criterion table must be 0/1")

    def __call__(self, states, concepts=None) -> np.ndarray:
        s = np.asarray(states)
        if self.kind == "always":
            return np.ones(s.shape, dtype=np.int8)
        if self.kind == "never":
            return np.zeros(s.shape, dtype=np.int8)
        if self.kind == "threshold":
            return (self.features[s, self.feature_index] > self.threshold).astype(np.int8)
        if self.kind == "custom_table":
            return np.asarray(self.table, dtype=np.int8)[s]
        if concepts is None:
            raise ConfigError("oracle_match needs the current concept ids")
        return (np.asarray(concepts) == np.asarray(self.reference)[s]).astype(np.int8)


def blend_concepts(traj, cmap: ConceptMap, criterion: Criterion, c_int) -> tuple[np.ndarray, np.ndarray]:
    """Effective concepts ``c~ = kappa c + (1 - kappa) c_int`` per step, and ``kappa``.

    ``c_int`` is a :class:`ConceptMap` or an array indexed by state. Discrete
    concepts are selected rather than mixed arithmetically.
    """
    states = np.asarray(traj.states if hasattr(traj, "states") else traj)
    c = cmap(states)
    kappa = criterion(states, c if cmap.discrete else None)
    need = kappa == 0
    if isinstance(c_int, ConceptMap):
        alt = c_int(states)
    else:
        src = np.asarray(c_int)
        if need.any() and states[need].max() >= len(src):
            raise DataError("intervention concept missing for a flagged step")
        alt = src[np.where(need, states, 0)]
    if cmap.discrete:
        return np.where(kappa == 1, c, alt), kappa
    k = kappa.astype(float)[:, None]
    return k * c + (1.0 - k) * alt, kappa


def mle_state_policy(source, n_states: int | None = None, n_actions: int | None = None,
                     floor: float = MLE_FLOOR) -> TabularPolicy:
    """Argmax policy (lowest index wins ties): ``1 - floor (A - 1)`` on the argmax, ``floor`` elsewhere.

    ``source`` is a :class:`TabularPolicy` or a batch, whose per-state action
    counts are used.
    """
    if isinstance(source, TabularPolicy):
        probs = source.probs
    else:
        b = as_batch(source)
        S = n_states or int(b.states[b.mask].max()) + 1
        A = n_actions or int(b.actions[b.mask].max()) + 1
        probs = np.zeros((S, A))
        np.add.at(probs, (b.states[b.mask], b.actions[b.mask]), 1.0)
    A = probs.shape[1]
    if not 0 <= floor * (A - 1) < 1:
        raise ConfigError("MLE floor too large for the action count")
    p = np.full(probs.shape, float(floor))
    p[np.arange(len(probs)), np.argmax(probs, axis=1)] = 1.0 - floor * (A - 1)
    return TabularPolicy(p, name="mle")


@dataclass(frozen=True)
class InterventionPlan:
    """Criterion plus the resources its strategy needs.

    ``state_policy`` and ``state_mle_policy`` need ``pi_b``/``pi_e`` and
    substitute them on flagged steps. ``qualitative`` needs a substitute
    concept map plus ``fit_tables``, which refits both concept policies on a
    given concept map; they are refit on the blended concepts and used at
    every step.
    """

    criterion: Criterion
    strategy: str
    pi_b: TabularPolicy | None = None
    pi_e: TabularPolicy | None = None
    alt_map: ConceptMap | None = None
    fit_tables: Callable[[ConceptMap], RatioTables] | None = None

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}")
        if self.strategy == "qualitative":
            if self.alt_map is None or self.fit_tables is None:
                raise ConfigError("qualitative strategy needs alt_map and fit_tables")
            if not self.alt_map.discrete:
                raise ConfigError("qualitative strategy needs a discrete substitute map")
        elif self.pi_b is None or self.pi_e is None:
            raise ConfigError(f"{self.strategy} strategy needs pi_b and pi_e")

    def substitute_tables(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-state ``(num, den)`` used on intervened steps by the state strategies."""
        if self.strategy == "state_policy":
            return self.pi_e.probs, self.pi_b.probs
        if self.strategy == "state_mle_policy":
            return mle_state_policy(self.pi_e).probs, mle_state_policy(self.pi_b).probs
        raise ConfigError("qualitative plans refit tables on the blended map")

    def blended_map(self, cmap: ConceptMap) -> ConceptMap:
        """Concept map ``c~(s)``: the current concept where kept, the substitute elsewhere."""
        if not cmap.discrete:
            raise ConfigError("qualitative strategy needs a discrete concept map")
        states = np.arange(cmap.n_states)
        kappa = self.criterion(states, cmap.ids)
        ids = np.where(kappa == 1, cmap.ids, self.alt_map.ids)
        return ConceptMap(f"{cmap.kind}+intervened", ids=ids,
                          n_concepts=max(cmap.n_concepts, self.alt_map.n_concepts))


def per_state_tables(tables: RatioTables, cmap: ConceptMap | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Expand concept-indexed ratio tables to one row per state."""
    if tables.index is not None:
        return tables.num[tables.index], tables.den[tables.index]
    if cmap is not None and cmap.discrete and len(tables.num) != cmap.n_states:
        return tables.num[cmap.ids], tables.den[cmap.ids]
    return tables.num, tables.den


@dataclass
class InterventionReport:
    report: EstimateReport
    kept: np.ndarray
    n_intervened: int
    floor_hits: int
    coverage_warning: bool
    extra: dict = field(default_factory=dict)


def intervened_estimate(batch, plan: InterventionPlan, base: RatioTables, cmap: ConceptMap, gamma: float,
                        estimator: str = "CPDIS", pd_normalization: str = "per_step") -> InterventionReport:
    """Concept estimator under an intervention plan.

    ``base`` holds the concept policies of the run being intervened on and
    ``cmap`` its concept map; ``kept`` marks steps with ``kappa = 1``. State
    strategies swap in state-policy ratios on flagged steps. The qualitative
    strategy refits the concept policies on the blended map and uses them at
    every step, unless the blended map equals ``cmap``.
    """
    if estimator not in ESTIMATOR_MODES or ESTIMATOR_MODES[estimator][0] not in ("IS", "PDIS"):
        raise ConfigError(f"interventions support IS-family estimators, not {estimator}")
    mode, normalized, _ = ESTIMATOR_MODES[estimator]
    b: Batch = as_batch(batch)
    m = b.mask
    s, a = b.states[m], b.actions[m]
    concepts = cmap(s) if cmap.discrete else None
    kappa = plan.criterion(s, concepts)
    keep = kappa == 1
    if plan.strategy == "qualitative":
        blended = plan.blended_map(cmap)
        if np.array_equal(blended.ids, cmap.ids):
            tables, lookup = base, cmap
        else:
            tables, lookup = plan.fit_tables(blended), blended
        num, den = (t[s, a] for t in per_state_tables(tables, lookup))
    else:
        bn, bd = per_state_tables(base, cmap)
        sn, sd = plan.substitute_tables()
        num = np.where(keep, bn[s, a], sn[s, a])
        den = np.where(keep, bd[s, a], sd[s, a])
    if (den <= 0).any():
        raise DataError("zero behaviour probability on a logged action")
    floor_hits = int(((~keep) & (den <= MLE_FLOOR * (1 + 1e-9))).sum()) if plan.strategy == "state_mle_policy" else 0
    ratios = np.ones(b.states.shape)
    ratios[m] = num / den
    kept = np.zeros(b.states.shape, dtype=bool)
    kept[m] = keep
    W = cumulative_weights(ratios)
    rep = point_estimate(b, W, gamma, mode, normalized, name=f"{estimator}[{plan.strategy}]",
                         pd_normalization=pd_normalization)
    rep.config.update(strategy=plan.strategy, criterion=plan.criterion.kind)
    n_int = int((~keep).sum())
    return InterventionReport(rep, kept, n_int, floor_hits, floor_hits > 0)


def match_cluster_ids(labels: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """Relabel clusters by the permutation that agrees most with ``reference``.

    Ties go to the lexicographically first permutation.
    """
    labels = np.asarray(labels)
    reference = np.asarray(reference)
    k = int(max(labels.max(), reference.max())) + 1
    if k > 8:
        raise ConfigError("cluster matching is exhaustive and limited to 8 concepts")
    best, best_hits = None, -1
    for perm in itertools.permutations(range(k)):
        hits = int((np.asarray(perm)[labels] == reference).sum())
        if hits > best_hits:
            best, best_hits = np.asarray(perm), hits
    return best[labels]


def corrupt_blocks(ids: np.ndarray, reference: np.ndarray, blocks: np.ndarray, n_blocks: int,
                   state_weight: np.ndarray, n_concepts: int) -> tuple[np.ndarray, list[int]]:
    """Reassign the ``n_blocks`` heaviest blocks that ``ids`` gets right to a wrong concept.

    A block counts as right when most of its states match ``reference``; its
    states move to ``(reference + n_concepts // 2) % n_concepts``. Returns the
    corrupted ids and the chosen block ids.
    """
    ids = np.array(ids, copy=True)
    weight = np.bincount(blocks, weights=state_weight, minlength=int(blocks.max()) + 1)
    chosen = []
    for blk in np.argsort(-weight, kind="stable"):
        members = blocks == blk
        if (ids[members] == reference[members]).mean() > 0.5:
            chosen.append(int(blk))
            ids[members] = (reference[members] + n_concepts // 2) % n_concepts
        if len(chosen) == n_blocks:
            break
    if len(chosen) < n_blocks:
        raise DataError(f"only {len(chosen)} blocks agree with the reference; cannot corrupt {n_blocks}")
    return ids, chosen
