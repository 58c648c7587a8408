"""Concept bottleneck model trained to minimise OPE variance.

Parameters (float64, row-vector convention ``h = x @ M + b``):

* ``W``  ``(d, F)`` linear concept layer, ``c = W f(s)``
* ``P1 p1 P2 p2 P3 p3`` next-state predictor ``d -> H -> H -> O`` (ReLU hidden)
* ``B1 b1 B2 b2`` behaviour head and ``E1 e1 E2 e2`` evaluation head,
  ``d -> H_head -> A`` (ReLU hidden), softmax over actions

Gradients are written out by hand and checked against central differences
in the test-suite.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from conceptope.concepts import FEATURE_NAMES, ConceptMap, kmeans_labels
from conceptope.core import Batch, TabularPolicy, as_batch
from conceptope.errors import ConfigError, DataError, DivergenceError
from conceptope.estimators import RatioTables

PARAM_ORDER = ("W", "P1", "p1", "P2", "p2", "P3", "p3", "B1", "b1", "B2", "b2", "E1", "e1", "E2", "e2")
PREDICTOR = ("P1", "p1", "P2", "p2", "P3", "p3")
HEADS = ("B1", "b1", "B2", "b2", "E1", "e1", "E2", "e2")
LOSS_NAMES = ("output", "interpretability", "diversity", "policy", "ope")
CHECKPOINT_MAGIC = "# conceptope-checkpoint v1"


@dataclass(frozen=True)
class LossWeights:
    output: float = 1.0
    interpretability: float = 1e-3
    diversity: float = 1e-2
    policy: float = 1.0
    ope: float = 1e-2

    def __post_init__(self):
        for k in LOSS_NAMES:
            if getattr(self, k) < 0:
                raise ConfigError(f"loss weight {k} must be >= 0")

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, k) for k in LOSS_NAMES])


@dataclass(frozen=True)
class TrainConfig:
    weights: LossWeights = LossWeights()
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    minibatch: int = 16
    stages: tuple = (30, 30, 30)
    estimator: str = "CPDIS"
    beta: float = 0.0
    gamma: float = 0.99
    seed: int = 0
    n_concepts: int = 4
    hidden: int = 256
    head_hidden: int = 64
    init_scale: float = 0.1
    output_loss: str = "mse"

    def __post_init__(self):
        if self.estimator not in ("CIS", "CPDIS"):
            raise ConfigError("learner estimator must be CIS or CPDIS")
        if self.output_loss not in ("mse", "xent"):
            raise ConfigError("output_loss must be mse or xent")
        if len(self.stages) != 3 or any(int(s) < 0 for s in self.stages):
            raise ConfigError("stages must be three non-negative epoch budgets")
        if self.minibatch < 1:
            raise ConfigError("minibatch must be >= 1")


@dataclass(frozen=True)
class LossBreakdown:
    output: float
    interpretability: float
    diversity: float
    policy: float
    ope: float
    total: float

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in LOSS_NAMES + ("total",)}


# Model


@dataclass
class ConceptModel:
    params: dict
    seed: int = 0
    stage: int = 0

    @classmethod
    def init(cls, n_features: int = len(FEATURE_NAMES), n_concepts: int = 4, hidden: int = 256,
             head_hidden: int = 64, n_actions: int = 4, n_outputs: int = len(FEATURE_NAMES) - 1,
             seed: int = 0, scale: float = 0.1) -> "ConceptModel":
        rng = np.random.default_rng(seed)
        d, H, Hh, A, O, F = n_concepts, hidden, head_hidden, n_actions, n_outputs, n_features
        shapes = {"W": (d, F), "P1": (d, H), "p1": (H,), "P2": (H, H), "p2": (H,), "P3": (H, O), "p3": (O,),
                  "B1": (d, Hh), "b1": (Hh,), "B2": (Hh, A), "b2": (A,),
                  "E1": (d, Hh), "e1": (Hh,), "E2": (Hh, A), "e2": (A,)}
        params = {k: rng.uniform(-scale, scale, size=shapes[k]) for k in PARAM_ORDER}
        return cls(params, seed=seed)

    @classmethod
    def from_config(cls, cfg: TrainConfig, n_actions: int, n_outputs: int, n_features: int = len(FEATURE_NAMES)):
        return cls.init(n_features, cfg.n_concepts, cfg.hidden, cfg.head_hidden, n_actions, n_outputs,
                        cfg.seed, cfg.init_scale)

    @property
    def W(self) -> np.ndarray:
        return self.params["W"]

    @property
    def dims(self) -> dict:
        p = self.params
        return {"concepts": p["W"].shape[0], "features": p["W"].shape[1], "hidden": p["P1"].shape[1],
                "outputs": p["P3"].shape[1], "head_hidden": p["B1"].shape[1], "actions": p["B2"].shape[1]}

    def copy(self) -> "ConceptModel":
        return ConceptModel({k: v.copy() for k, v in self.params.items()}, self.seed, self.stage)

    def check_finite(self) -> None:
        for k in PARAM_ORDER:
            if not np.isfinite(self.params[k]).all():
                raise DivergenceError(f"parameter {k} is not finite")

    def concepts(self, X: np.ndarray) -> np.ndarray:
        return np.asarray(X, dtype=float) @ self.params["W"].T

    def forward(self, X: np.ndarray) -> "Forward":
        """Concepts, next-state prediction and both heads for feature rows ``X``."""
        self.check_finite()
        p = self.params
        X = np.atleast_2d(np.asarray(X, dtype=float))
        c = X @ p["W"].T
        h1 = _relu(c @ p["P1"] + p["p1"])
        h2 = _relu(h1 @ p["P2"] + p["p2"])
        y = h2 @ p["P3"] + p["p3"]
        gb = _relu(c @ p["B1"] + p["b1"])
        lb = gb @ p["B2"] + p["b2"]
        ge = _relu(c @ p["E1"] + p["e1"])
        le = ge @ p["E2"] + p["e2"]
        return Forward(X, c, h1, h2, y, gb, lb, _softmax(lb), ge, le, _softmax(le))

    def head_probs(self, C: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Behaviour and evaluation action distributions at concept vectors ``C``."""
        p = self.params
        C = np.atleast_2d(C)
        lb = _relu(C @ p["B1"] + p["b1"]) @ p["B2"] + p["b2"]
        le = _relu(C @ p["E1"] + p["e1"]) @ p["E2"] + p["e2"]
        return _softmax(lb), _softmax(le)


@dataclass
class Forward:
    X: np.ndarray
    c: np.ndarray
    h1: np.ndarray
    h2: np.ndarray
    y: np.ndarray
    gb: np.ndarray
    logits_b: np.ndarray
    probs_b: np.ndarray
    ge: np.ndarray
    logits_e: np.ndarray
    probs_e: np.ndarray


def _relu(x):
    return np.maximum(x, 0.0)


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _softmax_backward(p: np.ndarray, dp: np.ndarray) -> np.ndarray:
    return p * (dp - (dp * p).sum(axis=-1, keepdims=True))


# Training data


@dataclass(frozen=True)
class Minibatch:
    """Flattened transitions of whole trajectories, in trajectory order."""

    X: np.ndarray
    target: np.ndarray
    next_state: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    traj: np.ndarray
    t: np.ndarray
    pi_b: np.ndarray
    pi_e: np.ndarray
    n_traj: int

    def __len__(self) -> int:
        return len(self.actions)


@dataclass(frozen=True)
class TrainingData:
    batch: Batch
    features: np.ndarray
    pi_b: TabularPolicy
    pi_e: TabularPolicy

    def minibatch(self, idx=None) -> Minibatch:
        b = self.batch if idx is None else self.batch.subset(idx)
        if len(b) == 0:
            raise DataError("empty minibatch")
        m = b.mask
        s, a, s2 = b.states[m], b.actions[m], b.next_states[m]
        traj = np.broadcast_to(np.arange(len(b))[:, None], m.shape)[m]
        t = np.broadcast_to(np.arange(b.width), m.shape)[m]
        if s.size == 0:
            raise DataError("minibatch has no transitions")
        return Minibatch(self.features[s], self.features[s2][:, :-1], s2, a, b.rewards[m], traj, t,
                         self.pi_b.probs[s], self.pi_e.probs[s], len(b))


# Losses and gradients


def _segment_cumsum(x: np.ndarray, traj: np.ndarray) -> np.ndarray:
    """Cumulative sum restarting wherever ``traj`` changes."""
    cs = np.cumsum(x)
    seg = np.r_[0, np.cumsum(np.diff(traj) != 0)]
    starts = np.r_[0, np.flatnonzero(np.diff(traj)) + 1]
    before = np.r_[0.0, cs[starts[1:] - 1]]
    return cs - before[seg]


def _segment_revcumsum(x: np.ndarray, traj: np.ndarray) -> np.ndarray:
    return _segment_cumsum(x[::-1], traj[::-1])[::-1]


def ope_values(log_ratio: np.ndarray, mb: Minibatch, gamma: float, estimator: str):
    """Per-trajectory concept estimator values and per-step ``dv/dlog_ratio``."""
    L = _segment_cumsum(log_ratio, mb.traj)
    disc = gamma ** mb.t
    if estimator == "CPDIS":
        with np.errstate(over="ignore"):
            term = disc * mb.rewards * np.exp(L)
        v = np.bincount(mb.traj, weights=term, minlength=mb.n_traj)
        dv = _segment_revcumsum(term, mb.traj)
    else:
        G = np.bincount(mb.traj, weights=disc * mb.rewards, minlength=mb.n_traj)
        last = np.r_[np.flatnonzero(np.diff(mb.traj)), len(mb.traj) - 1]
        with np.errstate(over="ignore"):
            v = np.exp(L[last]) * G
        dv = v[mb.traj]
    return v, dv


def _cosines(W: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(W, axis=1)
    safe = np.maximum(norms, 1e-12)
    return (W @ W.T) / np.outer(safe, safe), safe


def loss_components(model: ConceptModel, mb: Minibatch, cfg: TrainConfig,
                    weights: LossWeights | None = None, grad: bool = False):
    """Loss breakdown, plus parameter gradients of the weighted total when ``grad``."""
    lam = cfg.weights if weights is None else weights
    p = model.params
    fw = model.forward(mb.X)
    n, A = fw.probs_b.shape
    d = p["W"].shape[0]

    # output head
    if cfg.output_loss == "mse":
        diff = fw.y - mb.target
        l_out = float(np.mean(diff**2))
        dy = 2.0 * diff / diff.size
    else:
        if fw.y.shape[1] <= int(mb.next_state.max()):
            raise ConfigError("cross-entropy output needs one logit per next state")
        logp = _log_softmax(fw.y)
        l_out = float(-logp[np.arange(n), mb.next_state].mean())
        dy = np.exp(logp)
        dy[np.arange(n), mb.next_state] -= 1.0
        dy /= n
    # interpretability
    W = p["W"]
    l_int = float(np.abs(W).mean())
    # diversity
    cos, norms = _cosines(W)
    off = ~np.eye(d, dtype=bool)
    pos = (cos > 0) & off
    l_div = float(np.where(pos, cos, 0.0)[off].mean()) if d > 1 else 0.0
    # policy heads
    db_ = fw.probs_b - mb.pi_b
    de_ = fw.probs_e - mb.pi_e
    hb = np.maximum(np.abs(db_) - cfg.beta, 0.0)
    he = np.maximum(np.abs(de_) - cfg.beta, 0.0)
    l_pol = float(np.mean(hb**2) + np.mean(he**2))
    # OPE variance
    rows = np.arange(n)
    log_ratio = (_log_softmax(fw.logits_e)[rows, mb.actions] - _log_softmax(fw.logits_b)[rows, mb.actions])
    v, dv = ope_values(log_ratio, mb, cfg.gamma, cfg.estimator)
    l_ope = float(np.var(v)) if mb.n_traj > 1 else 0.0
    comps = np.array([l_out, l_int, l_div, l_pol, l_ope])
    total = float(lam.as_array() @ comps)
    br = LossBreakdown(*comps.tolist(), total)
    if not grad:
        return br

    g = {}
    signals = {
        "output": lam.output * dy,
        "policy": None,
        "ope": None,
    }
    dprob_b = lam.policy * 2.0 * hb * np.sign(db_) / db_.size
    dprob_e = lam.policy * 2.0 * he * np.sign(de_) / de_.size
    signals["policy"] = np.concatenate([dprob_b, dprob_e])
    if mb.n_traj > 1 and lam.ope > 0:
        dvar = 2.0 * (v - v.mean()) / mb.n_traj
        dl = lam.ope * dvar[mb.traj] * dv
    else:
        dl = np.zeros(n)
    signals["ope"] = dl
    for name, sig in signals.items():
        if not np.isfinite(sig).all():
            raise DivergenceError(f"non-finite gradient from the {name} loss")

    onehot = np.zeros((n, A))
    onehot[rows, mb.actions] = 1.0
    dlogit_e = _softmax_backward(fw.probs_e, dprob_e) + dl[:, None] * (onehot - fw.probs_e)
    dlogit_b = _softmax_backward(fw.probs_b, dprob_b) - dl[:, None] * (onehot - fw.probs_b)

    dc = np.zeros_like(fw.c)
    # predictor
    dy = signals["output"]
    g["P3"] = fw.h2.T @ dy
    g["p3"] = dy.sum(axis=0)
    dz2 = (dy @ p["P3"].T) * (fw.h2 > 0)
    g["P2"] = fw.h1.T @ dz2
    g["p2"] = dz2.sum(axis=0)
    dz1 = (dz2 @ p["P2"].T) * (fw.h1 > 0)
    g["P1"] = fw.c.T @ dz1
    g["p1"] = dz1.sum(axis=0)
    dc += dz1 @ p["P1"].T
    # heads
    for (M1, m1, M2, m2), hid, dlog in ((("B1", "b1", "B2", "b2"), fw.gb, dlogit_b),
                                        (("E1", "e1", "E2", "e2"), fw.ge, dlogit_e)):
        g[M2] = hid.T @ dlog
        g[m2] = dlog.sum(axis=0)
        dz = (dlog @ p[M2].T) * (hid > 0)
        g[M1] = fw.c.T @ dz
        g[m1] = dz.sum(axis=0)
        dc += dz @ p[M1].T
    # concept layer
    gW = dc.T @ fw.X + lam.interpretability * np.sign(W) / W.size
    if d > 1 and lam.diversity > 0:
        unit = W / norms[:, None]
        # d cos_ij / d W_i = W_j/(|W_i||W_j|) - cos_ij W_i/|W_i|^2
        coef = np.where(pos, 1.0, 0.0)
        gdiv = (coef @ unit) / norms[:, None] - (coef * cos).sum(axis=1)[:, None] * unit / norms[:, None]
        gW += lam.diversity * 2.0 * gdiv / (d * (d - 1))
    g["W"] = gW
    for k in PARAM_ORDER:
        if not np.isfinite(g[k]).all():
            raise DivergenceError(f"non-finite gradient for parameter {k}")
    return br, g


def _active_pattern(model: ConceptModel, X: np.ndarray) -> tuple:
    fw = model.forward(X)
    return tuple(a > 0 for a in (fw.h1, fw.h2, fw.gb, fw.ge))


def finite_difference_check(model: ConceptModel, mb: Minibatch, cfg: TrainConfig, h: float = 1e-5,
                            max_coords: int | None = None, seed: int = 0, floor: float = 1e-6,
                            kink_retries: int = 2) -> float:
    """Largest relative error between analytic and central-difference gradients.

    ``rel = |g_a - g_fd| / max(|g_a|, |g_fd|, floor)``. ``max_coords`` samples
    that many coordinates per parameter (all when ``None``). When a
    perturbation flips a ReLU activation the difference straddles a kink, so
    the step is shrunk tenfold up to ``kink_retries`` times.
    """
    _, g = loss_components(model, mb, cfg, grad=True)
    rng = np.random.default_rng(seed)
    base = _active_pattern(model, mb.X)
    worst = 0.0
    for k in PARAM_ORDER:
        arr = model.params[k]
        flat = arr.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = rng.choice(flat.size, max_coords, replace=False)
        for i in idx:
            old = flat[i]
            step = h
            for attempt in range(kink_retries + 1):
                flat[i] = old + step
                up = loss_components(model, mb, cfg).total
                smooth = _same_pattern(base, _active_pattern(model, mb.X))
                flat[i] = old - step
                down = loss_components(model, mb, cfg).total
                smooth &= _same_pattern(base, _active_pattern(model, mb.X))
                flat[i] = old
                if smooth or attempt == kink_retries:
                    break
                step /= 10
            fd = (up - down) / (2 * step)
            ga = g[k].reshape(-1)[i]
            worst = max(worst, abs(ga - fd) / max(abs(ga), abs(fd), floor))
    return worst


def _same_pattern(a: tuple, b: tuple) -> bool:
    return all(np.array_equal(x, y) for x, y in zip(a, b))


# Optimiser


class Adam:
    def __init__(self, params: dict, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = {k: 0 for k in params}

    def step(self, params: dict, grads: dict, keys) -> None:
        for k in keys:
            self.t[k] += 1
            t = self.t[k]
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * grads[k]
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * grads[k] ** 2
            mhat = self.m[k] / (1 - self.beta1**t)
            vhat = self.v[k] / (1 - self.beta2**t)
            params[k] -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


# Training


@dataclass
class TrainResult:
    model: ConceptModel
    initial: ConceptModel
    final: ConceptModel
    curve: list = field(default_factory=list)
    best_epoch: int = 0
    best_stage: int = 0

    CURVE_FIELDS = ("epoch", "stage", "lambda_ope") + tuple(f"train_{k}" for k in LOSS_NAMES + ("total",)) + \
        tuple(f"val_{k}" for k in LOSS_NAMES + ("total",))

    def write_curve(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=self.CURVE_FIELDS)
            w.writeheader()
            for row in self.curve:
                w.writerow(row)


def train(train_batch, pi_b: TabularPolicy, pi_e: TabularPolicy, features: np.ndarray, cfg: TrainConfig = TrainConfig(),
          val_batch=None, model: ConceptModel | None = None,
          on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Three-stage training; returns the parameters with the lowest validation total loss.

    Stage 1 trains everything without the OPE term, stage 2 ramps the OPE
    weight linearly up to its configured value, stage 3 freezes ``W`` and the
    predictor and refines only the policy heads. ``features`` is the
    ``(n_states, F)`` feature table whose last column is the constant.
    """
    features = np.asarray(features, dtype=float)
    tb = as_batch(train_batch)
    vb = tb if val_batch is None else as_batch(val_batch)
    if len(tb) == 0:
        raise DataError("empty training batch")
    n_out = features.shape[0] if cfg.output_loss == "xent" else features.shape[1] - 1
    if model is None:
        model = ConceptModel.from_config(cfg, pi_b.n_actions, n_out, features.shape[1])
    model = model.copy()
    train_data = TrainingData(tb, features, pi_b, pi_e)
    val_mb = TrainingData(vb, features, pi_b, pi_e).minibatch()
    initial = model.copy()
    opt = Adam(model.params, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    rng = np.random.default_rng(cfg.seed)
    full = cfg.weights

    def val_loss(m):
        return loss_components(m, val_mb, cfg, full)

    best_loss = val_loss(model)
    best = model.copy()
    result = TrainResult(best, initial, model, best_epoch=0, best_stage=0)
    result.curve.append(_curve_row(0, 0, 0.0, None, best_loss))
    epoch = 0
    for stage, budget in enumerate(cfg.stages, start=1):
        budget = int(budget)
        keys = HEADS if stage == 3 else PARAM_ORDER
        for e in range(budget):
            epoch += 1
            lam_ope = 0.0 if stage == 1 else (full.ope * (e + 1) / budget if stage == 2 else full.ope)
            lam = replace(full, ope=lam_ope)
            order = rng.permutation(len(tb))
            sums = np.zeros(6)
            nb = 0
            for start in range(0, len(order), cfg.minibatch):
                mb = train_data.minibatch(np.sort(order[start:start + cfg.minibatch]))
                br, g = loss_components(model, mb, cfg, lam, grad=True)
                if not np.isfinite(br.total):
                    raise DivergenceError(f"training loss diverged in stage {stage}, epoch {epoch}")
                opt.step(model.params, g, keys)
                sums += [br.output, br.interpretability, br.diversity, br.policy, br.ope, br.total]
                nb += 1
            model.stage = stage
            try:
                vl = val_loss(model)
            except DivergenceError as exc:
                raise DivergenceError(f"{exc} (stage {stage}, epoch {epoch})") from exc
            if not np.isfinite(vl.total):
                raise DivergenceError(f"validation loss diverged in stage {stage}, epoch {epoch}")
            row = _curve_row(epoch, stage, lam_ope, sums / max(nb, 1), vl)
            result.curve.append(row)
            if on_epoch is not None:
                on_epoch(row)
            if vl.total < best_loss.total:
                best_loss, best = vl, model.copy()
                result.best_epoch, result.best_stage = epoch, stage
    result.model = best
    result.final = model
    return result


def _curve_row(epoch, stage, lam_ope, train_sums, val: LossBreakdown) -> dict:
    row = {"epoch": epoch, "stage": stage, "lambda_ope": lam_ope}
    names = LOSS_NAMES + ("total",)
    for i, k in enumerate(names):
        row[f"train_{k}"] = "" if train_sums is None else float(train_sums[i])
        row[f"val_{k}"] = getattr(val, k)
    return row


# Learned concepts as estimator inputs


@dataclass(frozen=True)
class LearnedConcepts:
    """Concept map plus head policies evaluated per state."""

    cmap: ConceptMap
    pi_b: np.ndarray
    pi_e: np.ndarray
    cluster_map: ConceptMap | None = None

    def ratio_tables(self) -> RatioTables:
        """Per-state tables ``pi~_e(a|c(s))`` / ``pi~_b(a|c(s))`` for the estimators."""
        return RatioTables(self.pi_e, self.pi_b)


def learned_concept_map(model: ConceptModel, features: np.ndarray, n_clusters: int | None = 4,
                        seed: int = 0) -> LearnedConcepts:
    """Wrap a trained model so estimators consume learned concepts and head policies.

    ``n_clusters`` adds a discrete view: k-means on the concept vectors.
    """
    fw = model.forward(features)
    vectors = fw.c
    cmap = ConceptMap("learned", vectors=vectors)
    clusters = None
    if n_clusters:
        labels, _ = kmeans_labels(vectors, n_clusters, seed)
        clusters = ConceptMap("learned-clusters", ids=labels, n_concepts=n_clusters)
    return LearnedConcepts(cmap, fw.probs_b, fw.probs_e, clusters)


# Serialisation


def save_checkpoint(model: ConceptModel, path) -> None:
    """Text header then every parameter as a row-major matrix of exact float reprs."""
    with open(path, "w") as fh:
        fh.write(checkpoint_text(model))


def checkpoint_text(model: ConceptModel) -> str:
    out = io.StringIO()
    out.write(CHECKPOINT_MAGIC + "\n")
    out.write("dims " + " ".join(f"{k}={v}" for k, v in model.dims.items()) + "\n")
    out.write(f"seed {model.seed}\nstage {model.stage}\n")
    for k in PARAM_ORDER:
        arr = np.atleast_2d(model.params[k])
        out.write(f"param {k} {arr.shape[0]} {arr.shape[1]} {model.params[k].ndim}\n")
        for row in arr:
            out.write(",".join(repr(float(x)) for x in row) + "\n")
    return out.getvalue()


def load_checkpoint(path) -> ConceptModel:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a concept-model checkpoint")
    seed = stage = 0
    params = {}
    i = 1
    while i < len(lines):
        parts = lines[i].split()
        if not parts:
            i += 1
            continue
        if parts[0] == "seed":
            seed = int(parts[1])
        elif parts[0] == "stage":
            stage = int(parts[1])
        elif parts[0] == "param":
            name, r, c, ndim = parts[1], int(parts[2]), int(parts[3]), int(parts[4])
            rows = [[float(x) for x in lines[i + 1 + j].split(",")] for j in range(r)]
            arr = np.array(rows, dtype=float).reshape(r, c)
            params[name] = arr.reshape(-1) if ndim == 1 else arr
            i += r
        i += 1
    missing = [k for k in PARAM_ORDER if k not in params]
    if missing:
        raise DataError(f"{path}: checkpoint lacks {missing}")
    return ConceptModel(params, seed, stage)


def write_coefficients(model: ConceptModel, path, feature_names=FEATURE_NAMES) -> None:
    """Learned ``W`` as a feature-by-concept coefficient table."""
    W = model.params["W"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["feature"] + [f"c{i + 1}" for i in range(W.shape[0])])
        for j, name in enumerate(feature_names):
            w.writerow([name] + [repr(float(x)) for x in W[:, j]])
