"""Experiment pipelines behind the CLI subcommands.

Each pipeline writes CSV/JSONL outputs plus ``manifest.json`` recording the
serialised config, its SHA-256 and the SHA-256 of every output file.
"""

from __future__ import annotations

import csv
import hashlib
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from conceptope.concepts import (
    ConceptMap,
    VisitationTable,
    aggregate_concept_policy,
    feature_table,
    imperfect_concept_map,
    kmeans_abstraction,
    known_concept_map,
    oracle_concept_map,
)
from conceptope.core import Batch, MDPSpec, TabularPolicy, enumerate_value, read_jsonl, rollout_batch, write_jsonl
from conceptope.envs import ChainConfig, Gridworld, GridworldConfig, chain_mdp, train_q_policies
from conceptope.errors import ConceptOPEError, ConfigError, DataError, IntegrityError
from conceptope.estimators import ESTIMATOR_MODES, RatioTables, estimate, fit_q_model
from conceptope.harness.config import ExperimentConfig, parse, serialize
from conceptope.harness.seeds import derive_seed
from conceptope.interventions import (
    Criterion,
    InterventionPlan,
    corrupt_blocks,
    intervened_estimate,
    match_cluster_ids,
)
from conceptope.learner import (
    ConceptModel,
    LossWeights,
    TrainConfig,
    learned_concept_map,
    load_checkpoint,
    save_checkpoint,
    train,
    write_coefficients,
)
from conceptope.metrics import (
    bootstrap_variance,
    ips_histogram,
    log_weight_histogram,
    metrics_row,
    on_policy_value,
    write_metrics_csv,
)

MANIFEST = "manifest.json"
POLICY_FILES = {"behavior": "pi_b.csv", "evaluation": "pi_e.csv"}
SPLITS = ("train", "val", "test", "pool")


# Files and manifests


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out: Path, command: str, cfg: ExperimentConfig, files, extra: dict | None = None) -> Path:
    text = serialize(cfg)
    manifest = {
        "command": command,
        "seed": cfg.experiment.seed,
        "config": text,
        "config_hash": hashlib.sha256(text.encode()).hexdigest(),
        "files": {str(f): sha256_file(out / f) for f in sorted(files)},
    }
    if extra:
        manifest["extra"] = extra
    path = out / MANIFEST
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def verify_manifest(bundle: Path) -> dict:
    """Load and check a bundle manifest; raises :class:`IntegrityError` on any mismatch."""
    path = Path(bundle) / MANIFEST
    try:
        manifest = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise DataError(f"{path}: missing manifest") from exc
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"{path}: unreadable manifest") from exc
    for key in ("command", "config", "config_hash", "files"):
        if key not in manifest:
            raise IntegrityError(f"{path}: manifest lacks {key}")
    if hashlib.sha256(manifest["config"].encode()).hexdigest() != manifest["config_hash"]:
        raise IntegrityError(f"{path}: config hash mismatch")
    for name, digest in manifest["files"].items():
        f = Path(bundle) / name
        if not f.exists():
            raise IntegrityError(f"{bundle}: listed file {name} is missing")
        if sha256_file(f) != digest:
            raise IntegrityError(f"{bundle}: hash mismatch for {name}")
    return manifest


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in r])


def write_policy_csv(path, policy: TabularPolicy) -> None:
    A = policy.n_actions
    write_csv(path, ["state"] + [f"a{i}" for i in range(A)],
              ([s] + [float(p) for p in row] for s, row in enumerate(policy.probs)))


def read_policy_csv(path, name: str = "") -> TabularPolicy:
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))[1:]
    except FileNotFoundError as exc:
        raise DataError(f"missing policy file {path}") from exc
    rows.sort(key=lambda r: int(r[0]))
    return TabularPolicy(np.array([[float(x) for x in r[1:]] for r in rows]), name=name)


# Environment and data


@dataclass
class Setup:
    mdp: MDPSpec
    grid: GridworldConfig | None
    env: object

    @property
    def features(self) -> np.ndarray:
        if self.grid is None:
            raise ConfigError("learned concepts need the gridworld feature table")
        return feature_table(self.grid)


def build_setup(cfg: ExperimentConfig) -> Setup:
    e = cfg.env
    if e.kind == "chain":
        mdp = chain_mdp(ChainConfig(e.chain_states, e.chain_actions, e.chain_slip, e.horizon, e.gamma))
        return Setup(mdp, None, mdp)
    grid = GridworldConfig(horizon=e.horizon, goal_reward=e.goal_reward, away_penalty=e.away_penalty)
    if e.layout_csv:
        try:
            grid = grid.with_layout_csv(e.layout_csv)
        except FileNotFoundError as exc:
            raise ConfigError(f"[env] layout_csv: {exc}") from exc
    env = Gridworld(grid, e.gamma)
    return Setup(env.mdp, grid, env)


@dataclass
class Dataset:
    pi_b: TabularPolicy
    pi_e: TabularPolicy
    splits: dict

    def batch(self, split: str) -> Batch:
        if split not in self.splits:
            raise DataError(f"data split {split!r} not found")
        return self.splits[split]


_DATA_CACHE: dict = {}


def load_dataset(data_dir, horizon: int) -> Dataset:
    key = (str(Path(data_dir).resolve()), horizon)
    if key in _DATA_CACHE:
        return _DATA_CACHE[key]
    d = Path(data_dir)
    pb = read_policy_csv(d / POLICY_FILES["behavior"], "behavior")
    pe = read_policy_csv(d / POLICY_FILES["evaluation"], "evaluation")
    splits = {}
    for split in SPLITS:
        f = d / f"{split}.jsonl"
        if f.exists():
            trajs = read_jsonl(f)
            for t in trajs:
                t.validate()
            splits[split] = Batch(trajs, horizon=horizon)
    ds = Dataset(pb, pe, splits)
    _DATA_CACHE[key] = ds
    return ds


def run_gen(cfg: ExperimentConfig, out) -> Path:
    """Train the policy pair and roll out train/val/test splits plus an evaluation pool."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    setup = build_setup(cfg)
    master = cfg.experiment.seed
    p = cfg.policy
    pb, pe = train_q_policies(setup.env, p.episodes, (p.snapshot_frac,), p.temperature,
                              derive_seed(master, "policy"), p.alpha, p.epsilon)
    pb = TabularPolicy(pb.probs, "behavior")
    pe = TabularPolicy(pe.probs, "evaluation")
    write_policy_csv(out / POLICY_FILES["behavior"], pb)
    write_policy_csv(out / POLICY_FILES["evaluation"], pe)
    d = cfg.data
    n_split = d.n_train + d.n_val + d.n_test
    trajs = rollout_batch(setup.mdp, pb, n_split, derive_seed(master, "splits"), "behavior")
    parts = {"train": trajs[:d.n_train], "val": trajs[d.n_train:d.n_train + d.n_val],
             "test": trajs[d.n_train + d.n_val:]}
    parts["pool"] = rollout_batch(setup.mdp, pb, d.pool_size, derive_seed(master, "pool"), "behavior")
    files = list(POLICY_FILES.values())
    for split, tr in parts.items():
        write_jsonl(out / f"{split}.jsonl", tr)
        files.append(f"{split}.jsonl")
    values = {"v_behavior": enumerate_value(setup.mdp, pb), "v_evaluation": enumerate_value(setup.mdp, pe)}
    (out / "policy_values.json").write_text(json.dumps(values, indent=2, sort_keys=True) + "\n")
    files.append("policy_values.json")
    return write_manifest(out, "gen", cfg, files)


# Concept resolution


@dataclass
class ConceptSource:
    """A discrete map whose policies are aggregated, or learned per-state head tables."""

    cmap: ConceptMap
    learned: RatioTables | None = None

    def tables(self, batch: Batch, pi_b: TabularPolicy, pi_e: TabularPolicy, eval_visits: VisitationTable,
               smoothing: float) -> RatioTables:
        if self.learned is not None:
            return self.learned
        vb = VisitationTable.from_batch(batch, pi_b.n_states, pi_b.n_actions)
        cb = aggregate_concept_policy(pi_b, self.cmap, vb, smoothing)
        ce = aggregate_concept_policy(pi_e, self.cmap, eval_visits, smoothing)
        return RatioTables(ce.probs, cb.probs, self.cmap.ids)


def resolve_concepts(source: str, setup: Setup, n_clusters: int = 4, seed: int = 0) -> ConceptSource:
    n = setup.mdp.n_states
    if source == "identity":
        return ConceptSource(ConceptMap.identity(n))
    if setup.grid is None:
        raise ConfigError(f"concept source {source!r} needs the gridworld")
    g = setup.grid
    if source == "known":
        return ConceptSource(known_concept_map(g))
    if source == "oracle":
        return ConceptSource(oracle_concept_map(g))
    if source == "imperfect":
        return ConceptSource(imperfect_concept_map(g))
    if source.startswith("kmeans:"):
        return ConceptSource(kmeans_abstraction(np.arange(n), int(source.split(":", 1)[1]), seed, g))
    if source.startswith("learned:"):
        path = source.split(":", 1)[1]
        try:
            model = load_checkpoint(path)
        except FileNotFoundError as exc:
            raise ConfigError(f"checkpoint {path} not found") from exc
        lc = learned_concept_map(model, setup.features, n_clusters, seed)
        return ConceptSource(lc.cluster_map, lc.ratio_tables())
    raise ConfigError(f"unknown concept source {source!r}")


# Evaluation sweep


def _subsample(pool: Batch, n: int, seed: int) -> Batch:
    if n > len(pool):
        raise DataError(f"requested N={n} but the pool holds {len(pool)} trajectories")
    idx = np.sort(np.random.default_rng(seed).choice(len(pool), n, replace=False))
    return pool.subset(idx)


@dataclass
class EvalContext:
    cfg: ExperimentConfig
    setup: Setup
    data: Dataset
    concepts: ConceptSource
    eval_visits: VisitationTable
    eval_visits_t: VisitationTable | None

    @classmethod
    def build(cls, cfg: ExperimentConfig, data_dir, concept: str | None = None) -> "EvalContext":
        setup = build_setup(cfg)
        data = load_dataset(data_dir, setup.mdp.horizon)
        concept = concept or cfg.eval.concept
        seed = cfg.ablate.kmeans_seed if concept.startswith("kmeans:") else derive_seed(cfg.experiment.seed, "clusters")
        concepts = resolve_concepts(concept, setup, cfg.learn.clusters, seed)
        ev = VisitationTable.exact(setup.mdp, data.pi_e)
        ev_t = VisitationTable.exact(setup.mdp, data.pi_e, per_timestep=True) if cfg.eval.mis_per_timestep else None
        return cls(cfg, setup, data, concepts, ev, ev_t)

    def reports(self, batch: Batch, estimators) -> dict:
        """Estimator name -> report, or the error message for failed estimators."""
        cfg, mdp, d = self.cfg, self.setup.mdp, self.data
        state = RatioTables(d.pi_e.probs, d.pi_b.probs)
        out = {}
        try:
            ctab = self.concepts.tables(batch, d.pi_b, d.pi_e, self.eval_visits, cfg.eval.smoothing)
        except ConceptOPEError as exc:
            ctab = exc
        qmodel = None
        if any(ESTIMATOR_MODES[e][0] == "DR" for e in estimators):
            qmodel = fit_q_model(batch, d.pi_e, mdp.gamma, cfg.eval.fqe_sweeps, horizon=mdp.horizon)
        per_t = cfg.eval.mis_per_timestep
        vb = VisitationTable.from_batch(batch, mdp.n_states, mdp.n_actions, per_timestep=per_t)
        mis = (self.eval_visits_t if per_t else self.eval_visits, vb)
        cmap = self.concepts.cmap
        for name in estimators:
            conditioning = ESTIMATOR_MODES[name][2]
            if conditioning == "concept" and isinstance(ctab, Exception):
                out[name] = str(ctab)
                continue
            try:
                out[name] = estimate(name, batch, mdp.gamma, state, None if isinstance(ctab, Exception) else ctab,
                                     qmodel=qmodel, mis_tables=mis, cmap=cmap,
                                     pd_normalization=cfg.eval.pd_normalization, per_timestep_mis=per_t)
            except ConceptOPEError as exc:
                out[name] = str(exc)
        return out


_CTX: dict = {}


def _context(cfg_text: str, data_dir: str, concept: str) -> EvalContext:
    key = (cfg_text, data_dir, concept)
    if key not in _CTX:
        _CTX[key] = EvalContext.build(parse(cfg_text), data_dir, concept)
    return _CTX[key]


def _eval_task(args) -> list:
    cfg_text, data_dir, concept, n, seed_idx = args
    ctx = _context(cfg_text, data_dir, concept)
    cfg = ctx.cfg
    master = cfg.experiment.seed
    batch = _subsample(ctx.data.batch("pool"), n, derive_seed(master, "eval", n, seed_idx))
    rows = []
    for name, rep in ctx.reports(batch, cfg.eval.estimators).items():
        if isinstance(rep, str):
            rows.append((name, n, seed_idx, None, None, None, rep))
            continue
        var = bootstrap_variance(rep, B=cfg.eval.bootstrap, seed=derive_seed(master, "boot", n, seed_idx, name))
        logw = np.log10(rep.full_weights) if ESTIMATOR_MODES[name][0] in ("IS", "PDIS") else None
        rows.append((name, n, seed_idx, rep.point_estimate, var, logw, ""))
    return rows


def _map(tasks, fn, jobs: int):
    if jobs <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, tasks))


def _ground_truth(ctx: EvalContext) -> tuple[float, float]:
    cfg = ctx.cfg
    truth = enumerate_value(ctx.setup.mdp, ctx.data.pi_e)
    _, var_on = on_policy_value(ctx.setup.mdp, ctx.data.pi_e, None, cfg.eval.on_policy_rollouts,
                                derive_seed(cfg.experiment.seed, "on_policy"))
    return truth, var_on


def sweep(cfg: ExperimentConfig, data_dir, n_values, seeds: int, concept: str | None = None):
    """Per-(estimator, N, seed) estimates and bootstrap variances, plus metrics rows."""
    concept = concept or cfg.eval.concept
    ctx = _context(serialize(cfg), str(data_dir), concept)
    tasks = [(serialize(cfg), str(data_dir), concept, int(n), s) for n in n_values for s in range(seeds)]
    rows = [r for chunk in _map(tasks, _eval_task, cfg.experiment.jobs) for r in chunk]
    truth, var_on = _ground_truth(ctx)
    metrics = []
    for name in cfg.eval.estimators:
        for n in n_values:
            ok = [r for r in rows if r[0] == name and r[1] == n and r[3] is not None]
            if not ok:
                continue
            est = [r[3] for r in ok]
            v_off = float(np.mean([r[4] for r in ok]))
            metrics.append(metrics_row(est, truth, var_on / n, v_off, n, name))
    return rows, metrics, truth, var_on


def _write_ips(out: Path, rows, n_values, log_bins: int) -> list[str]:
    files = []
    summary = []
    for name in sorted({r[0] for r in rows if r[5] is not None}):
        for n in n_values:
            logs = [r[5] for r in rows if r[0] == name and r[1] == n and r[5] is not None]
            if not logs:
                continue
            h = log_weight_histogram(np.concatenate(logs), log_bins)
            f = f"ips_{name}_N{n}.csv"
            h.write_csv(out / f)
            files.append(f)
            summary.append([name, n, h.n_weights] + [h.quantiles[q] for q in sorted(h.quantiles)])
    qs = sorted(log_weight_histogram(np.zeros(1)).quantiles)
    write_csv(out / "ips_summary.csv", ["estimator", "N", "n_weights"] + [f"q{int(q * 100):02d}" for q in qs], summary)
    return files + ["ips_summary.csv"]


def run_eval(cfg: ExperimentConfig, data_dir, out) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    rows, metrics, truth, var_on = sweep(cfg, data_dir, cfg.eval.n_values, cfg.eval.seeds)
    write_csv(out / "estimates.csv", ["estimator", "N", "seed", "estimate", "bootstrap_variance", "error"],
              [(r[0], r[1], r[2], "" if r[3] is None else r[3], "" if r[4] is None else r[4], r[6]) for r in rows])
    write_metrics_csv(out / "metrics.csv", metrics)
    files = ["estimates.csv", "metrics.csv"] + _write_ips(out, rows, cfg.eval.n_values, cfg.eval.log_bins)
    extra = {"ground_truth": truth, "on_policy_variance": var_on, "concept": cfg.eval.concept}
    return write_manifest(out, "eval", cfg, files, extra)


# Concept learning


def train_config(cfg: ExperimentConfig) -> TrainConfig:
    c = cfg.learn
    w = LossWeights(c.lambda_output, c.lambda_interp, c.lambda_div, c.lambda_policy, c.lambda_ope)
    return TrainConfig(weights=w, lr=c.lr, minibatch=c.minibatch, stages=tuple(c.stages), estimator=c.estimator,
                       beta=c.beta, gamma=cfg.env.gamma, seed=derive_seed(cfg.experiment.seed, "learn") % 2**32,
                       n_concepts=c.n_concepts, hidden=c.hidden, head_hidden=c.head_hidden,
                       init_scale=c.init_scale, output_loss=c.output_loss)


def learned_variance(model: ConceptModel, features, batch: Batch, gamma: float, estimator: str, B: int,
                     seed: int) -> tuple[float, float]:
    """Point estimate and bootstrap variance of a concept estimator under learned concepts."""
    lc = learned_concept_map(model, features, n_clusters=None)
    rep = estimate(estimator, batch, gamma, lc.ratio_tables(), lc.ratio_tables())
    return rep.point_estimate, bootstrap_variance(rep, B=B, seed=seed)


def run_learn(cfg: ExperimentConfig, data_dir, out) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    setup = build_setup(cfg)
    data = load_dataset(data_dir, setup.mdp.horizon)
    tc = train_config(cfg)
    res = train(data.batch("train"), data.pi_b, data.pi_e, setup.features, tc, val_batch=data.splits.get("val"))
    save_checkpoint(res.model, out / "checkpoint.txt")
    write_coefficients(res.model, out / "coefficients.csv")
    res.write_curve(out / "training_curve.csv")
    lc = learned_concept_map(res.model, setup.features, cfg.learn.clusters, derive_seed(cfg.experiment.seed, "clusters"))
    lc.cluster_map.to_csv(out / "learned_concepts.csv")
    test = data.splits.get("test", data.batch("train"))
    seed = derive_seed(cfg.experiment.seed, "learn_eval")
    before = learned_variance(res.initial, setup.features, test, setup.mdp.gamma, tc.estimator, cfg.eval.bootstrap, seed)
    after = learned_variance(res.model, setup.features, test, setup.mdp.gamma, tc.estimator, cfg.eval.bootstrap, seed)
    summary = {"best_epoch": res.best_epoch, "best_stage": res.best_stage,
               "estimate_init": before[0], "variance_init": before[1],
               "estimate_trained": after[0], "variance_trained": after[1],
               "ground_truth": enumerate_value(setup.mdp, data.pi_e)}
    (out / "learn_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    files = ["checkpoint.txt", "coefficients.csv", "training_curve.csv", "learned_concepts.csv", "learn_summary.json"]
    return write_manifest(out, "learn", cfg, files, summary)


# Interventions


def _criterion(cfg: ExperimentConfig, setup: Setup) -> Criterion:
    c = cfg.intervene
    if c.criterion == "oracle_match":
        return Criterion("oracle_match", reference=oracle_concept_map(setup.grid).ids)
    if c.criterion == "threshold":
        return Criterion("threshold", features=setup.features, feature_index=c.feature_index, threshold=c.threshold)
    if c.criterion == "custom_table":
        if not c.table_csv:
            raise ConfigError("[intervene] custom_table criterion needs table_csv")
        try:
            cm = ConceptMap.from_csv(c.table_csv)
        except FileNotFoundError as exc:
            raise ConfigError(f"[intervene] table_csv: {exc}") from exc
        return Criterion("custom_table", table=cm.ids)
    return Criterion(c.criterion)


def intervention_fixture(cfg: ExperimentConfig, setup: Setup, data: Dataset, model: ConceptModel):
    """Learned cluster map aligned to oracle ids, then corrupted on the configured number of blocks."""
    oracle = oracle_concept_map(setup.grid)
    lc = learned_concept_map(model, setup.features, oracle.n_concepts, derive_seed(cfg.experiment.seed, "clusters"))
    ids = match_cluster_ids(lc.cluster_map.ids, oracle.ids)
    weight = VisitationTable.exact(setup.mdp, data.pi_b).state_freq()
    blocks = known_concept_map(setup.grid).ids
    chosen = []
    if cfg.intervene.corrupt_blocks:
        ids, chosen = corrupt_blocks(ids, oracle.ids, blocks, cfg.intervene.corrupt_blocks, weight, oracle.n_concepts)
    return ConceptMap("learned-corrupted", ids=ids, n_concepts=oracle.n_concepts), oracle, chosen


def run_intervene(cfg: ExperimentConfig, data_dir, out) -> Path:
    c = cfg.intervene
    if not c.checkpoint:
        raise ConfigError("[intervene] checkpoint is required")
    try:
        model = load_checkpoint(c.checkpoint)
    except FileNotFoundError as exc:
        raise ConfigError(f"[intervene] checkpoint {c.checkpoint} not found") from exc
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    setup = build_setup(cfg)
    data = load_dataset(data_dir, setup.mdp.horizon)
    cmap, oracle, chosen = intervention_fixture(cfg, setup, data, model)
    criterion = _criterion(cfg, setup)
    ev = VisitationTable.exact(setup.mdp, data.pi_e)
    base_src = ConceptSource(cmap)
    truth = enumerate_value(setup.mdp, data.pi_e)
    master = cfg.experiment.seed
    rows = []
    for seed_idx in range(c.seeds):
        batch = _subsample(data.batch("pool"), c.n, derive_seed(master, "intervene", c.n, seed_idx))
        base = base_src.tables(batch, data.pi_b, data.pi_e, ev, cfg.eval.smoothing)
        boot = derive_seed(master, "intervene_boot", seed_idx)
        rep = estimate(c.estimator, batch, setup.mdp.gamma, base, base)
        rows.append((seed_idx, "none", rep.point_estimate, rep.point_estimate - truth,
                     bootstrap_variance(rep, B=cfg.eval.bootstrap, seed=boot), 0, 0))
        for strategy in c.strategies:
            plan = InterventionPlan(criterion, strategy, pi_b=data.pi_b, pi_e=data.pi_e, alt_map=oracle,
                                    fit_tables=lambda m, b=batch: ConceptSource(m).tables(b, data.pi_b, data.pi_e, ev,
                                                                                          cfg.eval.smoothing))
            ir = intervened_estimate(batch, plan, base, cmap, setup.mdp.gamma, c.estimator,
                                     cfg.eval.pd_normalization)
            r = ir.report
            rows.append((seed_idx, strategy, r.point_estimate, r.point_estimate - truth,
                         bootstrap_variance(r, B=cfg.eval.bootstrap, seed=boot), ir.n_intervened, ir.floor_hits))
    write_csv(out / "interventions.csv",
              ["seed", "strategy", "estimate", "error", "bootstrap_variance", "n_intervened", "floor_hits"], rows)
    cmap.to_csv(out / "corrupted_concepts.csv")
    extra = {"ground_truth": truth, "corrupted_blocks": chosen}
    return write_manifest(out, "intervene", cfg, ["interventions.csv", "corrupted_concepts.csv"], extra)


# Ablations


def run_ablate(cfg: ExperimentConfig, data_dir, out) -> Path:
    """K-means sweep, imperfect-concept comparison and IPS histograms over the N grid."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    a = cfg.ablate
    est = a.estimator
    state_est = {"CIS": "IS", "CPDIS": "PDIS", "CWIS": "WIS", "CPDWIS": "PDWIS"}.get(est, "IS")
    sub = _with_estimators(cfg, (state_est, est))

    def mse_of(concept):
        _, metrics, _, _ = sweep(sub, data_dir, (a.n,), a.seeds, concept)
        return {m.estimator_name: m for m in metrics}

    rows = []
    ref = mse_of("known")
    s, k = ref[state_est], ref[est]
    rows.append(("state", "", s.bias, s.variance, s.mse))
    rows.append(("known", "", k.bias, k.variance, k.mse))
    imp = mse_of("imperfect")[est]
    rows.append(("imperfect", "", imp.bias, imp.variance, imp.mse))
    for K in range(a.k_min, a.k_max + 1):
        m = mse_of(f"kmeans:{K}")[est]
        rows.append(("kmeans", K, m.bias, m.variance, m.mse))
    write_csv(out / "ablation.csv", ["concepts", "K", "bias", "variance", "mse"], rows)
    ips_cfg = _with_estimators(cfg, (state_est, est))
    ips_rows, _, _, _ = sweep(ips_cfg, data_dir, cfg.eval.n_values, a.seeds)
    files = ["ablation.csv"] + _write_ips(out, ips_rows, cfg.eval.n_values, cfg.eval.log_bins)
    return write_manifest(out, "ablate", cfg, files)


def _with_estimators(cfg: ExperimentConfig, estimators) -> ExperimentConfig:
    return replace(cfg, eval=replace(cfg.eval, estimators=tuple(estimators)))


# Report


SUMMARY_FILES = ("metrics.csv", "ablation.csv", "interventions.csv", "ips_summary.csv", "training_curve.csv")


def run_report(bundles, out) -> Path:
    """Verify every bundle manifest, then merge same-named tables with a ``bundle`` column."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    bundles = sorted(Path(b) for b in bundles)
    if not bundles:
        raise ConfigError("report needs at least one results directory")
    manifests = {str(b): verify_manifest(b) for b in bundles}
    files = []
    for name in SUMMARY_FILES:
        header, merged = None, []
        for b in bundles:
            f = b / name
            if not f.exists() or name not in manifests[str(b)]["files"]:
                continue
            with open(f, newline="") as fh:
                rows = list(csv.reader(fh))
            if header is None:
                header = rows[0]
            elif rows[0] != header:
                raise IntegrityError(f"{f}: header differs from other bundles")
            merged.extend([b.name] + r for r in rows[1:])
        if header is not None:
            target = f"summary_{name}"
            write_csv(out / target, ["bundle"] + header, merged)
            files.append(target)
    index = {str(b): {"command": m["command"], "config_hash": m["config_hash"], "seed": m["seed"],
                      "extra": m.get("extra", {})} for b, m in manifests.items()}
    (out / "summary.json").write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")
    files.append("summary.json")
    return out / "summary.json"
