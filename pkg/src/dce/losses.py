"""Logit-adjusted cross-entropy family.

Every expert loss has the form ``-log softmax(v + alpha * log p)[y]``:

* ``alpha=0``: plain softmax cross-entropy,
* ``alpha=1``: balanced softmax,
* ``alpha=2``: inverse-distribution loss (targets the normalised inverse prior),
* ``alpha=3``: the extra fourth-expert loss used in the expert-count ablation.

Classes absent from a task get a ``-inf`` adjustment when ``alpha > 0`` and
drop out of the softmax denominator.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import log_softmax, stable_softmax


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class ClassPrior:
    """Per-class frequency distribution of one task."""

    p: np.ndarray
    present: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.p, dtype=np.float64)
        present = np.asarray(self.present, dtype=bool)
        if p.shape != present.shape or p.ndim != 1:
            raise LossError("prior and presence mask must be 1-D of equal length")
        if not present.any():
            raise LossError("prior has no present class")
        if np.any(p[~present] != 0.0) or np.any(p[present] <= 0.0):
            raise LossError("absent classes must have p=0 and present classes p>0")
        if abs(p[present].sum() - 1.0) > 1e-12:
            raise LossError("present probabilities must sum to 1")
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "present", present)

    @property
    def num_classes(self) -> int:
        return self.p.shape[0]

    @property
    def log_p(self) -> np.ndarray:
        out = np.full(self.p.shape, -np.inf)
        out[self.present] = np.log(self.p[self.present])
        return out

    @classmethod
    def uniform(cls, num_classes: int) -> "ClassPrior":
        return cls(np.full(num_classes, 1.0 / num_classes), np.ones(num_classes, bool))


def prior_from_counts(counts) -> ClassPrior:
    counts = np.asarray(counts, dtype=np.float64)
    if counts.ndim != 1 or counts.size == 0:
        raise LossError("counts must be a non-empty 1-D sequence")
    if np.any(counts < 0):
        raise LossError("counts must be non-negative")
    total = counts.sum()
    if total <= 0:
        raise LossError("all-zero class counts")
    present = counts > 0
    p = np.where(present, counts / total, 0.0)
    # renormalise the present mass so it sums to 1 to the last ulp we can get
    p[present] /= p[present].sum()
    return ClassPrior(p, present)


def adjustment_vector(prior: ClassPrior, alpha: float) -> np.ndarray:
    if alpha < 0:
        raise LossError("alpha must be non-negative")
    if alpha == 0:
        return np.zeros(prior.num_classes)
    out = np.full(prior.num_classes, -np.inf)
    out[prior.present] = alpha * np.log(prior.p[prior.present])
    return out


def _check_target(y, adj):
    if np.any(~np.isfinite(adj[y])):
        raise LossError("target class masked")


def adjusted_loss(v, y: int, adj) -> float:
    v = np.asarray(v, dtype=np.float64)
    adj = np.asarray(adj, dtype=np.float64)
    if v.shape != adj.shape:
        raise LossError(f"logits {v.shape} and adjustment {adj.shape} differ")
    _check_target(y, adj)
    return float(-log_softmax(v + adj)[y])


def adjusted_loss_grad(v, y: int, adj) -> np.ndarray:
    """Closed form ``softmax(v + adj) - onehot(y)``."""
    v = np.asarray(v, dtype=np.float64)
    adj = np.asarray(adj, dtype=np.float64)
    if v.shape != adj.shape:
        raise LossError(f"logits {v.shape} and adjustment {adj.shape} differ")
    _check_target(y, adj)
    g = stable_softmax(v + adj)
    g[y] -= 1.0
    return g


def adjusted_loss_batch(V, y, adj) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample losses and logit gradients for a batch ``V`` of shape (n, C)."""
    V = np.asarray(V, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    adj = np.asarray(adj, dtype=np.float64)
    _check_target(y, adj)
    logp = log_softmax(V + adj)
    rows = np.arange(V.shape[0])
    losses = -logp[rows, y]
    grad = np.exp(logp)
    grad[rows, y] -= 1.0
    return losses, grad


def inverse_prior(prior: ClassPrior) -> ClassPrior:
    inv = np.zeros_like(prior.p)
    inv[prior.present] = 1.0 / prior.p[prior.present]
    inv[prior.present] /= inv[prior.present].sum()
    return ClassPrior(inv, prior.present.copy())


def reweight_posterior(q, p_src: ClassPrior, p_tgt: ClassPrior) -> np.ndarray:
    """Bayes-reweight posterior ``q`` from prior ``p_tgt`` to ``p_src``.

    Assumes identical class-conditionals: the result is proportional to
    ``q * p_src / p_tgt`` and renormalised onto the simplex.
    """
    q = np.asarray(q, dtype=np.float64)
    if not np.array_equal(p_src.present, p_tgt.present):
        raise LossError("source and target priors have different supports")
    w = np.zeros_like(q)
    m = p_src.present
    w[m] = q[m] * p_src.p[m] / p_tgt.p[m]
    z = w.sum()
    if not z > 0:
        raise LossError("zero normalizer in posterior reweighting")
    return w / z
