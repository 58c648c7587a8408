"""Bias/variance/MSE/ESS, IPS histograms and premise/bound diagnostics."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from conceptope.concepts import ConceptMap
from conceptope.core import Batch, TabularPolicy, as_batch, rollout_batch
from conceptope.envs import Gridworld
from conceptope.errors import ConfigError, DataError
from conceptope.estimators import EstimateReport, RatioTables, step_ratios

GRIDWORLD_R_MAX = 5.0


def on_policy_value(env, pi_e: TabularPolicy, gamma: float | None = None, n_rollouts: int = 10_000,
                    seed=0) -> tuple[float, float]:
    """Monte-Carlo mean and per-trajectory variance of the discounted return under ``pi_e``."""
    mdp = env.mdp if isinstance(env, Gridworld) else env
    if gamma is None:
        gamma = mdp.gamma
    b = Batch(rollout_batch(mdp, pi_e, n_rollouts, seed), horizon=mdp.horizon)
    g = b.discounted_returns(gamma)
    return float(g.mean()), float(g.var())


def resample_counts(n: int, B: int, seed) -> np.ndarray:
    """``(B, n)`` multiplicities of ``B`` with-replacement resamples of ``n`` items."""
    if B < 2:
        raise ConfigError("bootstrap needs B >= 2")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, n, size=(B, n))
    counts = np.zeros((B, n))
    np.add.at(counts, (np.repeat(np.arange(B), n), idx.ravel()), 1.0)
    return counts


def bootstrap_estimates(report: EstimateReport, B: int = 200, seed=0) -> np.ndarray:
    """Point estimates of ``report``'s estimator over ``B`` trajectory resamples.

    Policies stay fixed at their full-batch fit; only the trajectory
    multiplicities change.
    """
    return report.resampled(resample_counts(report.n, B, seed))


def bootstrap_variance(batch_or_report, estimator: Callable[[Batch], EstimateReport] | None = None,
                       B: int = 200, seed=0) -> float:
    """Variance of the point estimate across ``B`` seeded bootstrap resamples.

    Accepts either a finished :class:`EstimateReport` or a batch plus a
    callable producing one.
    """
    if isinstance(batch_or_report, EstimateReport):
        report = batch_or_report
    else:
        if estimator is None:
            raise ConfigError("bootstrap_variance needs an estimator for a raw batch")
        report = estimator(as_batch(batch_or_report))
    return float(np.var(bootstrap_estimates(report, B, seed), ddof=1))


@dataclass(frozen=True)
class MetricsRow:
    estimator_name: str
    N: int
    seed_count: int
    bias: float
    variance: float
    mse: float
    ess: float
    ess_infinite: bool = False

    CSV_FIELDS = ("estimator", "N", "seed_count", "bias", "variance", "mse", "ess")

    def csv_row(self) -> dict:
        return {"estimator": self.estimator_name, "N": self.N, "seed_count": self.seed_count,
                "bias": self.bias, "variance": self.variance, "mse": self.mse,
                "ess": "inf" if self.ess_infinite else self.ess}


def metrics_row(estimates: Sequence[float], ground_truth: float, v_on: float, v_off: float, N: int,
                name: str = "") -> MetricsRow:
    """Bias against ground truth, ``mse = bias^2 + v_off`` and ``ess = N v_on / v_off``.

    ``v_off`` is the variance of the off-policy estimate and ``v_on`` that of
    the on-policy Monte-Carlo mean over the same ``N``.
    """
    est = np.asarray(estimates, dtype=float)
    if est.size == 0:
        raise DataError("no estimates")
    if v_off < 0 or v_on < 0:
        raise ConfigError("variances must be non-negative")
    bias = abs(float(est.mean()) - ground_truth)
    infinite = v_off == 0
    ess = math.inf if infinite else N * v_on / v_off
    return MetricsRow(name, int(N), int(est.size), bias, float(v_off), bias * bias + float(v_off), ess, infinite)


def write_metrics_csv(path, rows: Sequence[MetricsRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=MetricsRow.CSV_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow(r.csv_row())


# IPS histograms


@dataclass(frozen=True)
class Histogram:
    """Histogram of ``log10`` importance weights."""

    edges: np.ndarray
    counts: np.ndarray
    quantiles: dict
    n_weights: int

    @property
    def median(self) -> float:
        return self.quantiles[0.5]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bin_left", "bin_right", "count"])
            for lo, hi, c in zip(self.edges[:-1], self.edges[1:], self.counts):
                w.writerow([repr(float(lo)), repr(float(hi)), int(c)])


QUANTILES = (0.05, 0.25, 0.5, 0.75, 0.95)


def log_weight_histogram(log_w: np.ndarray, log_bins: int = 50, edges: np.ndarray | None = None) -> Histogram:
    log_w = np.asarray(log_w, dtype=float).ravel()
    if log_w.size == 0:
        raise DataError("no weights to histogram")
    if edges is None:
        lo, hi = float(log_w.min()), float(log_w.max())
        if hi - lo < 1e-12:
            lo, hi = lo - 0.5, hi + 0.5
        edges = np.linspace(lo, hi, log_bins + 1)
    counts, edges = np.histogram(np.clip(log_w, edges[0], edges[-1]), bins=edges)
    q = {p: float(v) for p, v in zip(QUANTILES, np.quantile(log_w, QUANTILES))}
    return Histogram(np.asarray(edges), counts, q, int(log_w.size))


def _log10(w: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log10(w)


def ips_histogram(reports: Sequence[EstimateReport], log_bins: int = 50) -> tuple[Histogram, Histogram]:
    """Histograms of ``log10 rho_{0:T}`` and of every realised ``log10 rho_{0:t}``.

    Reports are pooled; returns ``(full_horizon, per_decision)``.
    """
    if isinstance(reports, EstimateReport):
        reports = [reports]
    if not reports:
        raise DataError("no reports")
    full = np.concatenate([_log10(r.full_weights) for r in reports])
    per = np.concatenate([_log10(ws.cumulative) for r in reports for ws in r.weight_streams()])
    return log_weight_histogram(full, log_bins), log_weight_histogram(per, log_bins)


# Covariance premise diagnostics


@dataclass(frozen=True)
class CovarianceReport:
    concept_cov: np.ndarray
    state_cov: np.ndarray
    mis_cov: np.ndarray | None
    n_pairs: int
    concept_vs_state: float
    concept_vs_mis: float | None

    def summary(self) -> dict:
        return {"n_pairs": self.n_pairs, "concept_vs_state": self.concept_vs_state,
                "concept_vs_mis": self.concept_vs_mis}


def _term_cov(terms: np.ndarray) -> np.ndarray:
    """Sample covariance between time-step columns."""
    return np.atleast_2d(np.cov(terms, rowvar=False, ddof=1))


def covariance_diagnostic(batch, concept_tables: RatioTables, state_tables: RatioTables,
                          mis_ratios: np.ndarray | None = None, tol: float = 1e-12) -> CovarianceReport:
    """Empirical ``Cov(rho_{0:t} r_t, rho_{0:k} r_k)`` for ``t < k`` under both conditionings.

    ``mis_ratios`` is an ``(N, width)`` array of marginal density ratios per
    step (as used by MIS). Only steps that at least two trajectories reach
    enter the comparison; ties within ``tol`` count as satisfied.
    """
    b = as_batch(batch)
    if len(b) < 2:
        raise DataError("covariance diagnostic needs at least two trajectories")
    alive = b.mask.sum(axis=0) >= 2
    steps = int(alive.sum())
    r = b.rewards[:, :steps]
    wc = concept_tables.weights(b)[:, :steps]
    ws = state_tables.weights(b)[:, :steps]
    cc, cs = _term_cov(wc * r), _term_cov(ws * r)
    iu = np.triu_indices(steps, k=1)
    n_pairs = int(iu[0].size)

    def frac(a, c):
        if n_pairs == 0:
            return 1.0
        return float(np.mean(a[iu] <= c[iu] + tol))

    cm = None
    vs_mis = None
    if mis_ratios is not None:
        cm = _term_cov(np.asarray(mis_ratios)[:, :steps] * r)
        vs_mis = frac(cc, cm)
    return CovarianceReport(cc, cs, cm, n_pairs, frac(cc, cs), vs_mis)


# Bound diagnostics


@dataclass(frozen=True)
class BoundReport:
    U_c: float
    U_s: float
    K: float
    R_max: float
    T: int
    N: int
    log10_bound_concept: float
    log10_bound_state: float
    bias_term: float | None = None
    observed_U_c: float | None = None
    observed_U_s: float | None = None
    extra: dict = field(default_factory=dict)

    @property
    def bound_concept(self) -> float:
        return _pow10(self.log10_bound_concept)

    @property
    def bound_state(self) -> float:
        return _pow10(self.log10_bound_state)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(bound_concept=self.bound_concept, bound_state=self.bound_state)
        return d


def _pow10(x: float) -> float:
    return math.inf if x > 308 else 10.0 ** x


def _max_ratio(num: np.ndarray, den: np.ndarray) -> float:
    ok = den > 0
    return float((num[ok] / den[ok]).max())


def _log10_cr_bound(T: int, R_max: float, U: float, N: int) -> float:
    """``log10(T^2 R_max^2 U^{2T} / N)``."""
    return 2 * math.log10(T) + 2 * math.log10(R_max) + 2 * T * math.log10(U) - math.log10(N)


def bound_report(concept_tables: RatioTables, state_tables: RatioTables, cmap: ConceptMap,
                 R_max: float = GRIDWORLD_R_MAX, T: int = 200, N: int = 1, on_policy_estimate: float | None = None,
                 reports: Sequence[EstimateReport] | None = None, batch=None) -> BoundReport:
    """Tabulated maximum ratios, cardinality ratio and variance/bias bound terms.

    ``U`` is the largest ``num/den`` entry of each table. With
    ``on_policy_estimate`` the unknown-concept bias term
    ``T R_max U_c^T / N + |on-policy estimate|`` is added. Passing the batch
    also records the largest ratio actually realised in it.
    """
    if not cmap.discrete:
        raise ConfigError("bound report needs a discrete concept map")
    U_c = _max_ratio(concept_tables.num, concept_tables.den)
    U_s = _max_ratio(state_tables.num, state_tables.den)
    K = cmap.n_concepts / cmap.n_states
    bias = None
    if on_policy_estimate is not None:
        bias = T * R_max * _pow10(T * math.log10(U_c)) / N + abs(on_policy_estimate)
    obs_c = obs_s = None
    if batch is not None:
        b = as_batch(batch)
        obs_c = float(step_ratios(b, concept_tables.num, concept_tables.den, concept_tables.index)[b.mask].max())
        obs_s = float(step_ratios(b, state_tables.num, state_tables.den, state_tables.index)[b.mask].max())
    extra = {"n_reports": len(reports)} if reports else {}
    return BoundReport(U_c, U_s, K, R_max, T, N, _log10_cr_bound(T, R_max, U_c, N),
                       _log10_cr_bound(T, R_max, U_s, N), bias, obs_c, obs_s, extra)
