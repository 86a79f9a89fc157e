"""Experiment orchestration: method registry, early stopping, metrics and sweeps."""

from __future__ import annotations

import csv
import hashlib
import io
import itertools
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from . import __version__
from .baselines import (
    GlobalModelState,
    PersonalizedPool,
    ensemble_accuracy,
    fedavg_round,
    init_global,
    materialize_pool,
    pfl_nearest,
    pfl_sampled,
)
from .config import ExperimentConfig, apply_overrides, config_text, load_config
from .data import (
    ClientDataset,
    ConfigurationError,
    Federation,
    corrupt_covariate,
    kl_to_nearest_train,
    make_synthetic_federation,
    train_val_split,
)
from .formats import write_bundle
from .models import (
    EncoderSpec,
    HyperNetworkSpec,
    TargetModelSpec,
    WeightBundle,
    accuracy,
    default_descriptor_dim,
    encode_dataset,
    generate_weights,
)
from .privacy import SWEEP_HEADER, SweepRow, dp_accuracy_sweep, sem
from .protocol import (
    ROUND_LOG_HEADER,
    RoundLog,
    ServerState,
    copy_state,
    embedding_round,
    encoder_regression_step,
    infer_novel,
    init_server,
    model_for,
    train_round,
)

logger = logging.getLogger(__name__)

METHODS: Tuple[str, ...] = (
    "odpfl_hn",
    "odpfl_hn_two_phase",
    "fedavg",
    "fedprox",
    "pfl_sampled",
    "pfl_nearest",
    "pfl_ensemble",
)

METRICS_HEADER = [
    "method",
    "seed",
    "client_id",
    "client_kind",
    "accuracy",
    "kl_to_nearest_train",
    "corruption",
    "severity",
    "dp_epsilon",
    "dp_m",
]


class UnknownMethodError(ConfigurationError):
    pass


def derive_seed(root: int, label: str) -> int:
    """Sub-seed for ``label``; independent of which other labels exist."""
    digest = hashlib.sha256(f"{root}/{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def _rng(root: int, label: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root, label))


# ---------------------------------------------------------------------------
# federation and model construction


@dataclass
class Prepared:
    federation: Federation
    fit: List[ClientDataset]
    val: List[ClientDataset]
    cohort_size: int
    target: TargetModelSpec
    encoder: EncoderSpec
    hypernet: HyperNetworkSpec

    @property
    def novel(self) -> List[ClientDataset]:
        return self.federation.novel


def cohort_size_for(fraction: float, n_train: int) -> int:
    return max(1, int(round(fraction * n_train)))


def build_specs(cfg: ExperimentConfig, n_train: int) -> Tuple[TargetModelSpec, EncoderSpec, HyperNetworkSpec]:
    fed, mc = cfg.federation, cfg.model
    target = TargetModelSpec(fed.feature_dim, fed.num_classes, tuple(mc.target_hidden))
    D = mc.descriptor_dim or default_descriptor_dim(n_train)
    enc = EncoderSpec(
        fed.feature_dim,
        D,
        phi_hidden_dims=tuple(mc.phi_hidden),
        pool_split=mc.pool_split,
        unit_sphere_normalize=mc.unit_sphere,
        psi_kind=mc.psi_kind,
    )
    hn = HyperNetworkSpec(D, target, trunk_hidden_dims=tuple(mc.hn_trunk), head_gain=mc.head_gain)
    return target, enc, hn


def prepare(cfg: ExperimentConfig) -> Prepared:
    fed = make_synthetic_federation(cfg.federation, derive_seed(cfg.seed, "federation"))
    rng = _rng(cfg.seed, "validation-split")
    fit, val = [], []
    for ds in fed.train:
        a, b = train_val_split(ds, cfg.federation.train_fraction, rng)
        fit.append(a)
        val.append(b)
    target, enc, hn = build_specs(cfg, len(fit))
    return Prepared(fed, fit, val, cohort_size_for(cfg.train.cohort_fraction, len(fit)), target, enc, hn)


# ---------------------------------------------------------------------------
# early stopping


@dataclass
class FitResult:
    state: object
    logs: List[RoundLog]
    history: List[Tuple[int, float]]
    best_round: int
    best_score: float


def fit_with_early_stopping(
    state,
    step: Callable[[object], Tuple[object, RoundLog]],
    score: Callable[[object], float],
    rounds: int,
    eval_every: int,
    patience: int,
) -> FitResult:
    """Run up to ``rounds`` steps, keep the state with the best validation score.

    Scores are taken every ``eval_every`` rounds and after the last one.
    Training stops once ``patience`` rounds pass without a strict improvement
    (``patience=0`` always runs the full budget). Ties keep the earlier state.
    """
    if eval_every < 1:
        raise ConfigurationError("eval_every must be at least 1")
    best_score, best_round, best_state = score(state), 0, state
    history = [(0, best_score)]
    logs: List[RoundLog] = []
    for r in range(1, rounds + 1):
        state, log = step(state)
        logs.append(log)
        if r % eval_every and r != rounds:
            continue
        s = score(state)
        history.append((r, s))
        if s > best_score:
            best_score, best_round, best_state = s, r, state
        elif patience and r - best_round >= patience:
            break
    return FitResult(best_state, logs, history, best_round, best_score)


def _mean_val(models: Sequence[Mapping[str, np.ndarray]], prep: Prepared) -> float:
    accs = [accuracy(prep.target, w, v.features, v.labels) for w, v in zip(models, prep.val) if v.m]
    return float(np.mean(accs)) if accs else 0.0


# ---------------------------------------------------------------------------
# methods

Predictor = Callable[[ClientDataset, ClientDataset], float]


@dataclass
class TrainedMethod:
    """A fitted method: ``predict(context, evaluation)`` returns accuracy.

    ``context`` is what the novel client shows the method (its unlabeled
    features); ``evaluation`` is the labeled data it is scored on.
    """

    method: str
    predict: Predictor
    val_score: float
    logs: List[RoundLog]
    history: List[Tuple[int, float]]
    checkpoints: Dict[str, WeightBundle] = field(default_factory=dict)
    state: object = None
    train_models: List[WeightBundle] = field(default_factory=list)


def _hn_predictor(state: ServerState) -> Predictor:
    def predict(ctx: ClientDataset, ev: ClientDataset) -> float:
        w = infer_novel(state, ctx.unlabeled()).weights
        return accuracy(state.target_spec, w, ev.features, ev.labels)

    return predict


def _server_checkpoints(state: ServerState) -> Dict[str, WeightBundle]:
    out = {"theta": state.theta, "gamma": state.gamma}
    if state.embeddings is not None:
        out["embeddings"] = WeightBundle({"embeddings": state.embeddings})
    if state.theta_pretune is not None:
        out["theta_pretune"] = state.theta_pretune
    return out


def _train_hn(cfg: ExperimentConfig, prep: Prepared) -> TrainedMethod:
    state = init_server(prep.hypernet, prep.encoder, _rng(cfg.seed, "init:odpfl_hn"), cfg.server)
    rng = _rng(cfg.seed, "train:odpfl_hn")

    def models(s):
        return [model_for(s, ds.features) for ds in prep.fit]

    res = fit_with_early_stopping(
        state,
        lambda s: train_round(s, prep.fit, prep.cohort_size, rng, cfg.local),
        lambda s: _mean_val(models(s), prep),
        cfg.train.rounds,
        cfg.train.eval_every,
        cfg.train.patience,
    )
    best = res.state
    return TrainedMethod("odpfl_hn", _hn_predictor(best), res.best_score, res.logs, res.history, _server_checkpoints(best), best, models(best))


def _table_models(s: ServerState) -> List[WeightBundle]:
    return [WeightBundle(generate_weights(s.hn_spec, s.theta, e)) for e in s.embeddings]


def _phase1(cfg: ExperimentConfig, prep: Prepared, label: str) -> FitResult:
    """Embedding-table hypernetwork with early stopping on validation accuracy."""
    state = init_server(prep.hypernet, prep.encoder, _rng(cfg.seed, f"init:{label}"), cfg.server, n_embeddings=len(prep.fit))
    rng = _rng(cfg.seed, f"train:{label}")
    return fit_with_early_stopping(
        state,
        lambda s: embedding_round(s, prep.fit, prep.cohort_size, rng, cfg.local),
        lambda s: _mean_val(_table_models(s), prep),
        cfg.train.rounds,
        cfg.train.eval_every,
        cfg.train.patience,
    )


def _train_two_phase(cfg: ExperimentConfig, prep: Prepared) -> TrainedMethod:
    p1 = _phase1(cfg, prep, "odpfl_hn_two_phase")
    state = p1.state
    for _ in range(cfg.train.phase2_epochs):
        state, _ = encoder_regression_step(state, prep.fit)
    logs, history = list(p1.logs), list(p1.history)

    def models(s):
        return [model_for(s, ds.features) for ds in prep.fit]

    score = _mean_val(models(state), prep)
    if cfg.train.phase3_rounds > 0:
        state = copy_state(state)
        state.theta_pretune = state.theta
        state.theta_velocity = None
        rng = _rng(cfg.seed, "finetune:odpfl_hn_two_phase")
        p3 = fit_with_early_stopping(
            state,
            lambda s: train_round(s, prep.fit, prep.cohort_size, rng, cfg.local, update_encoder=False),
            lambda s: _mean_val(models(s), prep),
            cfg.train.phase3_rounds,
            cfg.train.eval_every,
            cfg.train.patience,
        )
        state, score = p3.state, p3.best_score
        logs += p3.logs
        history += [(p1.best_round + r, s) for r, s in p3.history]
    return TrainedMethod("odpfl_hn_two_phase", _hn_predictor(state), score, logs, history, _server_checkpoints(state), state, models(state))


def _train_fl(cfg: ExperimentConfig, prep: Prepared, method: str) -> TrainedMethod:
    mu = cfg.train.prox_mu if method == "fedprox" else 0.0
    state = init_global(prep.target, _rng(cfg.seed, f"init:{method}"))
    rng = _rng(cfg.seed, f"train:{method}")
    res = fit_with_early_stopping(
        state,
        lambda s: fedavg_round(s, prep.fit, prep.cohort_size, cfg.fl_local, rng, prox_mu=mu),
        lambda s: _mean_val([s.weights] * len(prep.fit), prep),
        cfg.train.rounds,
        cfg.train.eval_every,
        cfg.train.patience,
    )
    best: GlobalModelState = res.state

    def predict(ctx: ClientDataset, ev: ClientDataset) -> float:
        return accuracy(prep.target, best.weights, ev.features, ev.labels)

    return TrainedMethod(method, predict, res.best_score, res.logs, res.history, {"global": best.weights}, best, [best.weights] * len(prep.fit))


def _train_pool(cfg: ExperimentConfig, prep: Prepared, method: str) -> TrainedMethod:
    # every pool-based method trains the same pool: one seed label for all three
    p1 = _phase1(cfg, prep, "pfl_pool")
    pool: PersonalizedPool = materialize_pool(p1.state, [c.client_id for c in prep.fit])
    nearest_seed = derive_seed(cfg.seed, "a_distance")
    fit_features = [c.features for c in prep.fit]

    if method == "pfl_sampled":

        def predict(ctx, ev):
            return pfl_sampled(pool, ev)

    elif method == "pfl_ensemble":

        def predict(ctx, ev):
            return ensemble_accuracy(pool, ev)

    else:

        def predict(ctx, ev):
            w, _ = pfl_nearest(pool, fit_features, ctx.features, seed=nearest_seed)
            return accuracy(pool.spec, w, ev.features, ev.labels)

    ckpt = _server_checkpoints(p1.state)
    return TrainedMethod(method, predict, p1.best_score, p1.logs, p1.history, ckpt, pool, list(pool.bundles))


_REGISTRY: Dict[str, Callable[[ExperimentConfig, Prepared], TrainedMethod]] = {
    "odpfl_hn": _train_hn,
    "odpfl_hn_two_phase": _train_two_phase,
    "fedavg": lambda c, p: _train_fl(c, p, "fedavg"),
    "fedprox": lambda c, p: _train_fl(c, p, "fedprox"),
    "pfl_sampled": lambda c, p: _train_pool(c, p, "pfl_sampled"),
    "pfl_nearest": lambda c, p: _train_pool(c, p, "pfl_nearest"),
    "pfl_ensemble": lambda c, p: _train_pool(c, p, "pfl_ensemble"),
}
assert tuple(_REGISTRY) == METHODS


def method_registry() -> Tuple[str, ...]:
    return METHODS


def train_method(cfg: ExperimentConfig, prep: Optional[Prepared] = None) -> Tuple[TrainedMethod, Prepared]:
    method = cfg.train.method
    if method not in _REGISTRY:
        raise UnknownMethodError(f"unknown method {method!r}; registry: {', '.join(METHODS)}")
    prep = prep or prepare(cfg)
    return _REGISTRY[method](cfg, prep), prep


# ---------------------------------------------------------------------------
# evaluation


@dataclass(frozen=True)
class MetricsRecord:
    method: str
    seed: int
    client_id: int
    client_kind: str
    accuracy: float
    kl_to_nearest_train: Optional[float] = None
    corruption: str = "none"
    severity: float = 0.0
    dp_epsilon: Optional[float] = None
    dp_m: Optional[int] = None

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 1.0:
            raise ValueError(f"accuracy {self.accuracy} outside [0, 1]")
        if self.client_kind not in ("train", "novel"):
            raise ValueError("client_kind must be 'train' or 'novel'")

    def csv_row(self) -> list:
        opt = lambda v: "" if v is None else repr(v)
        return [
            self.method,
            self.seed,
            self.client_id,
            self.client_kind,
            repr(self.accuracy),
            opt(self.kl_to_nearest_train),
            self.corruption,
            repr(self.severity),
            opt(self.dp_epsilon),
            "" if self.dp_m is None else self.dp_m,
        ]


def _novel_views(cfg: ExperimentConfig, ds: ClientDataset) -> Tuple[ClientDataset, ClientDataset]:
    if cfg.eval.novel_split == "all":
        return ds, ds
    if cfg.eval.novel_split == "holdout":
        return train_val_split(ds, cfg.federation.train_fraction, _rng(cfg.seed, f"novel-split:{ds.client_id}"))
    raise ConfigurationError(f"eval.novel_split must be 'all' or 'holdout', got {cfg.eval.novel_split!r}")


def corrupt_novel(cfg: ExperimentConfig, ds: ClientDataset, kind: str, severity: float) -> ClientDataset:
    if kind == "none" or severity == 0:
        return ds
    return corrupt_covariate(ds, kind, severity, derive_seed(cfg.seed, f"corruption:{kind}:{ds.client_id}"))


def evaluate_novel(
    cfg: ExperimentConfig,
    trained: TrainedMethod,
    prep: Prepared,
    kind: Optional[str] = None,
    severity: Optional[float] = None,
) -> List[MetricsRecord]:
    kind = cfg.eval.corruption if kind is None else kind
    severity = cfg.eval.severity if severity is None else severity
    rows = []
    for ds in prep.novel:
        kl = kl_to_nearest_train(ds, prep.federation.train)
        shifted = corrupt_novel(cfg, ds, kind, severity)
        ctx, ev = _novel_views(cfg, shifted)
        acc = trained.predict(ctx, ev)
        rows.append(MetricsRecord(trained.method, cfg.seed, ds.client_id, "novel", acc, kl, kind, float(severity)))
    return rows


def evaluate_train(cfg: ExperimentConfig, trained: TrainedMethod, prep: Prepared) -> List[MetricsRecord]:
    rows = []
    for w, v in zip(trained.train_models, prep.val):
        if v.m:
            rows.append(MetricsRecord(trained.method, cfg.seed, v.client_id, "train", accuracy(prep.target, w, v.features, v.labels)))
    return rows


# ---------------------------------------------------------------------------
# results directory


def _csv_text(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return out.getvalue()


def _sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


CSV_OUTPUTS = ("metrics.csv", "round_log.csv", "validation.csv")


@dataclass
class ExperimentResult:
    directory: Path
    records: List[MetricsRecord]
    trained: TrainedMethod
    checksums: Dict[str, str]

    @property
    def novel_accuracy(self) -> float:
        return float(np.mean([r.accuracy for r in self.records if r.client_kind == "novel"]))


def run_experiment(cfg: ExperimentConfig, output_dir: Optional[Union[str, Path]] = None) -> ExperimentResult:
    """Train, evaluate and write ``metrics.csv``, logs, checkpoints and ``manifest.txt``."""
    out = Path(output_dir if output_dir is not None else cfg.output_dir)
    trained, prep = train_method(cfg)
    records = evaluate_train(cfg, trained, prep) + evaluate_novel(cfg, trained, prep)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(_csv_text(METRICS_HEADER, [r.csv_row() for r in records]))
    log_rows = [row for log in trained.logs for row in log.csv_rows(trained.method)]
    (out / "round_log.csv").write_text(_csv_text(["method"] + ROUND_LOG_HEADER, log_rows))
    (out / "validation.csv").write_text(_csv_text(["round", "val_accuracy"], [(r, repr(s)) for r, s in trained.history]))
    ck = out / "checkpoints"
    ck.mkdir(exist_ok=True)
    for name, bundle in trained.checkpoints.items():
        write_bundle(ck / f"{name}.bin", bundle)
    sums = {name: _sha(out / name) for name in CSV_OUTPUTS}
    manifest = [config_text(replace(cfg, output_dir=str(out)))]
    manifest.append(f"library.name = odpfl\nlibrary.version = {__version__}\n")
    manifest += [f"output.{k}.sha256 = {v}\n" for k, v in sums.items()]
    (out / "manifest.txt").write_text("".join(manifest))
    return ExperimentResult(out, records, trained, sums)


def read_manifest(directory: Union[str, Path]) -> Tuple[ExperimentConfig, Dict[str, str]]:
    path = Path(directory) / "manifest.txt"
    cfg = load_config(path)
    sums = {}
    for line in path.read_text().splitlines():
        if line.startswith("output.") and "=" in line:
            k, v = line.split("=", 1)
            sums[k.strip()[len("output.") : -len(".sha256")]] = v.strip()
    return cfg, sums


def rerun_from_manifest(directory: Union[str, Path], output_dir: Union[str, Path]) -> Tuple[bool, Dict[str, Tuple[str, str]]]:
    """Re-run a results directory's config; report whether every CSV checksum matches."""
    cfg, expected = read_manifest(directory)
    res = run_experiment(cfg, output_dir)
    diff = {k: (expected.get(k, ""), res.checksums[k]) for k in res.checksums if expected.get(k) != res.checksums[k]}
    return not diff, diff


def read_metrics(path: Union[str, Path]) -> List[MetricsRecord]:
    rows = []
    with open(path, newline="") as f:
        for r in csv.DictReader(f):
            opt = lambda v, t: None if v == "" else t(v)
            rows.append(
                MetricsRecord(
                    r["method"],
                    int(r["seed"]),
                    int(r["client_id"]),
                    r["client_kind"],
                    float(r["accuracy"]),
                    opt(r["kl_to_nearest_train"], float),
                    r["corruption"],
                    float(r["severity"]),
                    opt(r["dp_epsilon"], float),
                    opt(r["dp_m"], int),
                )
            )
    return rows


# ---------------------------------------------------------------------------
# hyperparameter search


@dataclass
class GridRow:
    params: Dict[str, str]
    val_score: float


@dataclass
class SearchResult:
    best: ExperimentConfig
    best_params: Dict[str, str]
    best_score: float
    rows: List[GridRow]

    def csv_text(self) -> str:
        keys = list(self.rows[0].params) if self.rows else []
        return _csv_text(keys + ["val_accuracy"], [[r.params[k] for k in keys] + [repr(r.val_score)] for r in self.rows])


def _is_lr(key: str) -> bool:
    return "lr" in key.rsplit(".", 1)[-1]


def _tie_key(params: Mapping[str, str]) -> tuple:
    lrs = tuple(float(params[k]) for k in sorted(params) if _is_lr(k))
    return (lrs, tuple(params[k] for k in sorted(params)))


def hyperparameter_search(cfg: ExperimentConfig, grid: Optional[Mapping[str, Sequence[str]]] = None) -> SearchResult:
    """Score every grid cell on training-client validation accuracy.

    Ties prefer the lower learning rate(s), then the lexicographically
    smaller parameter values.
    """
    grid = dict(grid if grid is not None else cfg.grid_dict())
    if not grid or any(len(v) == 0 for v in grid.values()):
        raise ConfigurationError("hyperparameter grid is empty")
    keys = sorted(grid)
    base = replace(cfg, grid=())
    rows = []
    for combo in itertools.product(*(grid[k] for k in keys)):
        params = dict(zip(keys, (str(v) for v in combo)))
        cell = apply_overrides(base, params)
        trained, _ = train_method(cell)
        rows.append(GridRow(params, trained.val_score))
    top = max(r.val_score for r in rows)
    winner = min((r for r in rows if r.val_score == top), key=lambda r: _tie_key(r.params))
    return SearchResult(apply_overrides(base, winner.params), winner.params, top, rows)


# ---------------------------------------------------------------------------
# KL analysis


def rank_average(x: Sequence[float]) -> np.ndarray:
    """1-based ranks with ties sharing their average rank."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(len(x))
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and x[order[j + 1]] == x[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman(x: Sequence[float], y: Sequence[float]) -> float:
    """Pearson correlation of average ranks; 0 when either side is constant."""
    if len(x) != len(y):
        raise ValueError("x and y differ in length")
    rx, ry = rank_average(x), rank_average(y)
    rx -= rx.mean()
    ry -= ry.mean()
    den = math.sqrt(float(rx @ rx) * float(ry @ ry))
    if den == 0.0:
        return 0.0
    return float(rx @ ry) / den


@dataclass(frozen=True)
class KLPoint:
    alpha: float
    seed: int
    client_id: int
    kl: float
    accuracy: float


@dataclass
class KLAnalysis:
    points: List[KLPoint]
    correlation: Optional[float]

    def csv_text(self) -> str:
        rows = [[repr(p.alpha), p.seed, p.client_id, repr(p.kl), repr(p.accuracy)] for p in self.points]
        return _csv_text(["alpha", "seed", "client_id", "kl_to_nearest_train", "accuracy"], rows)


MIN_CORRELATION_POINTS = 5


def kl_analysis(points: Sequence[KLPoint]) -> KLAnalysis:
    """Scatter table plus Spearman correlation of KL against accuracy.

    Needs points from at least two alpha values. With fewer than
    ``MIN_CORRELATION_POINTS`` points only the table is returned.
    """
    if len({p.alpha for p in points}) < 2:
        raise ConfigurationError("KL analysis needs results from at least two alpha values")
    pts = list(points)
    if len(pts) < MIN_CORRELATION_POINTS:
        logger.warning("only %d novel-client points; correlation not computed", len(pts))
        return KLAnalysis(pts, None)
    return KLAnalysis(pts, spearman([p.kl for p in pts], [p.accuracy for p in pts]))


def kl_points(records: Sequence[MetricsRecord], alpha: float, method: str = "odpfl_hn") -> List[KLPoint]:
    return [
        KLPoint(alpha, r.seed, r.client_id, r.kl_to_nearest_train, r.accuracy)
        for r in records
        if r.client_kind == "novel" and r.method == method and r.kl_to_nearest_train is not None
    ]


def run_kl_study(cfg: ExperimentConfig, alphas: Sequence[float], seeds: Sequence[int], method: str = "odpfl_hn") -> KLAnalysis:
    pts = []
    for a in alphas:
        for s in seeds:
            cell = replace(cfg, seed=s, federation=replace(cfg.federation, alpha=float(a)), train=replace(cfg.train, method=method))
            trained, prep = train_method(cell)
            pts += kl_points(evaluate_novel(cell, trained, prep), float(a), method)
    return kl_analysis(pts)


# ---------------------------------------------------------------------------
# covariate-shift and privacy sweeps


@dataclass(frozen=True)
class CorruptionRow:
    method: str
    seed: int
    kind: str
    severity: float
    accuracy_mean: float
    accuracy_sem: float

    def csv_row(self) -> list:
        return [self.method, self.seed, self.kind, repr(self.severity), repr(self.accuracy_mean), repr(self.accuracy_sem)]


CORRUPTION_HEADER = ["method", "seed", "kind", "severity", "accuracy_mean", "accuracy_sem"]


def corrupt_sweep(cfg: ExperimentConfig, methods: Sequence[str], kind: str, severities: Sequence[float]) -> List[CorruptionRow]:
    """Train each method once, then score novel clients at every severity."""
    rows = []
    prep = prepare(cfg)
    for m in methods:
        trained, _ = train_method(replace(cfg, train=replace(cfg.train, method=m)), prep)
        for sev in severities:
            accs = [r.accuracy for r in evaluate_novel(cfg, trained, prep, kind, float(sev))]
            rows.append(CorruptionRow(m, cfg.seed, kind, float(sev), float(np.mean(accs)), sem(accs)))
    return rows


def dp_compatible(cfg: ExperimentConfig) -> ExperimentConfig:
    """The same config with a certifiable encoder: unit-sphere phi, mean pooling, identity psi."""
    return replace(cfg, model=replace(cfg.model, unit_sphere=True, pool_split=False, psi_kind="identity_mean"))


def dp_sweep(
    cfg: ExperimentConfig,
    epsilons: Sequence[float],
    sizes: Sequence[int],
    repeats: int,
    delta: float = 0.01,
) -> Tuple[List[SweepRow], TrainedMethod]:
    """Train the encoder method and sweep (epsilon, m) on the novel clients."""
    if not cfg.train.method.startswith("odpfl_hn"):
        raise ConfigurationError("the privacy sweep needs an encoder method (odpfl_hn or odpfl_hn_two_phase)")
    trained, prep = train_method(cfg)
    rows = dp_accuracy_sweep(trained.state, prep.novel, epsilons, sizes, repeats, _rng(cfg.seed, "dp-noise"), delta)
    return rows, trained


def sweep_csv(rows: Sequence[SweepRow]) -> str:
    return _csv_text(SWEEP_HEADER, [r.csv_row() for r in rows])


def corruption_csv(rows: Sequence[CorruptionRow]) -> str:
    return _csv_text(CORRUPTION_HEADER, [r.csv_row() for r in rows])


# ---------------------------------------------------------------------------
# embedding export

DOMINANT_SHARE = 0.2


def dominant_labels(ds: ClientDataset) -> List[int]:
    """Classes holding at least 20% of the client's samples, most frequent first."""
    if not ds.labeled or ds.m == 0:
        return []
    h = ds.label_histogram
    order = sorted(range(len(h)), key=lambda c: (-h[c], c))
    keep = [c for c in order if h[c] >= DOMINANT_SHARE * ds.m]
    return keep or order[:1]


def export_embeddings(state: ServerState, clients: Sequence[ClientDataset]) -> str:
    """CSV with one row per client: id, dominant labels, descriptor coordinates."""
    rows = []
    for ds in clients:
        e = encode_dataset(state.enc_spec, state.gamma, ds.features).data
        rows.append([ds.client_id, ";".join(str(c) for c in dominant_labels(ds))] + ["%.17g" % v for v in e])
    dim = state.enc_spec.descriptor_dim
    return _csv_text(["client_id", "dominant_labels"] + [f"e{j}" for j in range(dim)], rows)


def read_embeddings(text: str) -> Dict[int, Tuple[List[int], np.ndarray]]:
    out = {}
    reader = csv.reader(io.StringIO(text))
    next(reader)
    for row in reader:
        labels = [int(c) for c in row[1].split(";") if c]
        out[int(row[0])] = (labels, np.array([float(v) for v in row[2:]]))
    return out


__all__ = [
    "METHODS",
    "ExperimentConfig",
    "MetricsRecord",
    "derive_seed",
    "run_experiment",
    "hyperparameter_search",
    "kl_analysis",
    "export_embeddings",
]
