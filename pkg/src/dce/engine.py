"""Incremental training of the collaborative-expert model and paradigm baselines.

Per task ``b`` the model

1. trains one expert per adjustment exponent on the task's training set,
2. stores class means and the task's averaged OAS covariance,
3. samples ``K`` pseudo-features for every stored (domain, class) pair,
4. retrains the selector from scratch on those pseudo-features,
5. evaluates the fused prediction on the test sets of domains ``1..b``.

Experts of task ``b`` occupy pool slots ``|alphas|*(b-1) ...`` in alpha
order and are never touched again.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import TaskStream
from .metrics import MetricsLedger, build_report, evaluate_snapshot
from .model import (
    Expert,
    Selector,
    TrainConfig,
    expert_logits,
    fit_heads,
    fuse,
    hidden_width,
    init_mlp,
    mlp_forward,
    selector_weights,
    train_expert_group,
    train_selector,
)
from .numerics import RngState, cholesky_factor, sample_mvn
from .stats import StatsError, StatsRepo, build_domain_stats, merge_repo

log = logging.getLogger(__name__)

METHODS = ("dce", "shared", "domain", "prototype")


class EngineError(ValueError):
    pass


@dataclass
class DceConfig:
    alphas: tuple[float, ...] = (0.0, 1.0, 2.0)
    K: int = 256
    cov_min_samples: int = 10
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self) -> None:
        if not self.alphas:
            raise EngineError("alphas must not be empty")
        if any(a < 0 for a in self.alphas):
            raise EngineError("alphas must be non-negative")
        if self.K < 1:
            raise EngineError("K must be at least 1")
        if self.cov_min_samples < 2:
            raise EngineError("cov_min_samples must be at least 2")
        self.train.validate()

    def as_dict(self) -> dict:
        out = asdict(self)
        out["alphas"] = list(self.alphas)
        return out


@dataclass
class SyntheticSet:
    features: np.ndarray
    labels: np.ndarray
    provenance: list[tuple[int, int, int]]

    def __len__(self) -> int:
        return self.labels.shape[0]


@dataclass
class DceModel:
    expert_pool: list[Expert] = field(default_factory=list)
    selector: Selector | None = None
    repo: StatsRepo = field(default_factory=StatsRepo)

    def logits(self, X) -> np.ndarray:
        return fuse_predict(X, self.expert_pool, self.selector)

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.logits(X), axis=-1)


@dataclass
class RunResult:
    method: str
    seed: int
    config: dict
    ledger: MetricsLedger
    model: object = None

    @property
    def snapshots(self):
        return self.ledger.snapshots

    def report(self) -> dict:
        return build_report(self.method, self.seed, self.config, self.ledger)


def build_synthetic_set(repo: StatsRepo, K: int, rng: RngState, factor=cholesky_factor) -> SyntheticSet:
    """``K`` Gaussian pseudo-features per stored (domain, class) pair.

    Every class of domain ``b`` is sampled with the shared domain covariance.
    Pairs are visited by domain, then class.
    """
    if not repo.gaussians:
        raise EngineError("statistics repository is empty")
    if K < 1:
        raise EngineError("K must be at least 1")
    feats, labels, provenance = [], [], []
    chol = {}
    for dom, c in repo.pairs():
        if dom not in chol:
            if dom not in repo.domain_covs:
                raise EngineError(f"missing domain covariance for domain {dom}")
            chol[dom] = factor(repo.domain_covs[dom].sigma_bar)[0]
        g = repo.gaussians[(dom, c)]
        feats.append(sample_mvn(g.mean, chol[dom], rng, size=K))
        labels.append(np.full(K, c, dtype=np.int64))
        provenance.append((dom, c, K))
    return SyntheticSet(np.vstack(feats), np.concatenate(labels), provenance)


def fuse_predict(x, pool, selector: Selector) -> np.ndarray:
    """Selector-weighted sum of expert logits (one vector or a batch)."""
    if not pool:
        raise EngineError("expert pool is empty")
    X = np.asarray(x, dtype=np.float64)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    E = expert_logits(pool, X)
    if selector is None:
        if len(pool) != 1:
            raise EngineError("a selector is required for more than one expert")
        w = np.ones((X.shape[0], 1))
    else:
        if selector.num_outputs != len(pool):
            raise EngineError(f"selector has {selector.num_outputs} outputs for {len(pool)} experts")
        w = selector_weights(selector, X)
    out = fuse(w, E)
    return out[0] if single else out


def _new_ledger(stream: TaskStream) -> MetricsLedger:
    return MetricsLedger([], stream.groups(), tuple(stream.thresholds))


def _rng(rng, seed):
    return RngState(seed) if rng is None else rng


def run_dce(stream: TaskStream, cfg: DceConfig, rng: RngState | None = None, on_task=None) -> RunResult:
    """Train the expert pool and selector task by task.

    ``on_task(b, model)``, if given, is called after task ``b`` is fully
    trained and evaluated; it must not modify the model.
    """
    cfg.validate()
    if not stream.tasks:
        raise EngineError("task stream is empty")
    rng = _rng(rng, cfg.train.seed)
    model = DceModel()
    ledger = _new_ledger(stream)
    for b, task in enumerate(stream.tasks, start=1):
        model.expert_pool.extend(train_expert_group(task, cfg.train, cfg.alphas, rng))
        try:
            gaussians, cov = build_domain_stats(task, cfg.cov_min_samples)
        except StatsError as exc:
            raise EngineError(str(exc)) from None
        model.repo = merge_repo(model.repo, gaussians, cov)
        synth = build_synthetic_set(model.repo, cfg.K, rng)
        model.selector = train_selector(synth.features, synth.labels, model.expert_pool, cfg.train, rng)
        ledger.snapshots.append(evaluate_snapshot(model.predict, stream, b))
        log.info("dce task %d/%d: pool=%d |D^|=%d A_b=%.4f", b, len(stream), len(model.expert_pool), len(synth), ledger.snapshots[-1].A_b)
        if on_task is not None:
            on_task(b, model)
    return RunResult("dce", cfg.train.seed, cfg.as_dict(), ledger, model)


def run_shared_baseline(stream: TaskStream, cfg: DceConfig, rng: RngState | None = None) -> RunResult:
    """One plain-CE head fine-tuned on each task in turn, without replay."""
    cfg.validate()
    rng = _rng(rng, cfg.train.seed)
    ledger = _new_ledger(stream)
    D, C = stream.d, stream.num_classes
    head = init_mlp(rng, D, hidden_width(D), C)
    zero = np.zeros(C)
    for b, task in enumerate(stream.tasks, start=1):
        fit_heads([head], task.train.features, task.train.labels, [zero], cfg.train, rng, cfg.train.epochs_stage1)
        ledger.snapshots.append(evaluate_snapshot(lambda X: np.argmax(mlp_forward(head, X), axis=1), stream, b))
        log.info("shared task %d/%d: A_b=%.4f", b, len(stream), ledger.snapshots[-1].A_b)
    return RunResult("shared", cfg.train.seed, cfg.as_dict(), ledger, head)


@dataclass
class DomainRouter:
    experts: list[Expert] = field(default_factory=list)
    centroids: list[np.ndarray] = field(default_factory=list)

    def route(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        cents = np.stack(self.centroids)
        dist = ((X[:, None, :] - cents[None, :, :]) ** 2).sum(axis=2)
        return np.argmin(dist, axis=1)

    def predict(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        route = self.route(X)
        out = np.empty(X.shape[0], dtype=np.int64)
        for i, expert in enumerate(self.experts):
            m = route == i
            if m.any():
                out[m] = np.argmax(mlp_forward(expert.params, X[m]), axis=1)
        return out


def run_domain_specific_baseline(stream: TaskStream, cfg: DceConfig, rng: RngState | None = None) -> RunResult:
    """Per-task plain-CE expert, hard-routed by nearest domain centroid."""
    cfg.validate()
    rng = _rng(rng, cfg.train.seed)
    ledger = _new_ledger(stream)
    router = DomainRouter()
    for b, task in enumerate(stream.tasks, start=1):
        router.experts.extend(train_expert_group(task, cfg.train, [0.0], rng))
        router.centroids.append(task.train.features.mean(axis=0))
        ledger.snapshots.append(evaluate_snapshot(router.predict, stream, b))
        log.info("domain task %d/%d: A_b=%.4f", b, len(stream), ledger.snapshots[-1].A_b)
    return RunResult("domain", cfg.train.seed, cfg.as_dict(), ledger, router)


@dataclass
class PrototypeClassifier:
    """Training-free cosine classifier over class means pooled across domains."""

    sums: np.ndarray
    counts: np.ndarray

    @classmethod
    def empty(cls, d: int, num_classes: int) -> "PrototypeClassifier":
        return cls(np.zeros((num_classes, d)), np.zeros(num_classes, dtype=np.int64))

    def update(self, features, labels) -> None:
        np.add.at(self.sums, labels, features)
        self.counts += np.bincount(labels, minlength=self.counts.size)

    @property
    def prototypes(self) -> np.ndarray:
        seen = self.counts > 0
        out = np.zeros_like(self.sums)
        out[seen] = self.sums[seen] / self.counts[seen, None]
        return out

    def scores(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        P = self.prototypes
        pn = np.linalg.norm(P, axis=1)
        xn = np.linalg.norm(X, axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            sim = (X @ P.T) / (np.maximum(xn, 1e-300)[:, None] * np.maximum(pn, 1e-300)[None, :])
        sim[:, self.counts == 0] = -np.inf
        return sim

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.scores(X), axis=1)


def run_prototype_baseline(stream: TaskStream, cfg: DceConfig | None = None, rng=None) -> RunResult:
    cfg = cfg or DceConfig()
    ledger = _new_ledger(stream)
    clf = PrototypeClassifier.empty(stream.d, stream.num_classes)
    for b, task in enumerate(stream.tasks, start=1):
        clf.update(task.train.features, task.train.labels)
        ledger.snapshots.append(evaluate_snapshot(clf.predict, stream, b))
    return RunResult("prototype", cfg.train.seed, cfg.as_dict(), ledger, clf)


RUNNERS = {
    "dce": run_dce,
    "shared": run_shared_baseline,
    "domain": run_domain_specific_baseline,
    "prototype": run_prototype_baseline,
}


def run_method(method: str, stream: TaskStream, cfg: DceConfig) -> RunResult:
    if method not in RUNNERS:
        raise EngineError(f"unknown method '{method}' (choose from {', '.join(METHODS)})")
    return RUNNERS[method](stream, cfg, RngState(cfg.train.seed))
