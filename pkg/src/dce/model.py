"""Three-layer MLP heads, manual backprop and the two training stages.

An MLP maps ``D -> D//2 -> O`` with a ReLU hidden layer.  Experts have
``O = C`` and are trained with one logit-adjusted loss each; the selector has
``O = |pool|`` and is trained on pseudo-features through the fused expert
logits, with every expert frozen.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .losses import ClassPrior, LossError, adjusted_loss_batch, adjustment_vector
from .numerics import RngState, log_softmax, stable_softmax


class ModelError(ValueError):
    pass


@dataclass
class MlpParams:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.W1.shape[0], self.W1.shape[1], self.W2.shape[1]

    def arrays(self) -> list[np.ndarray]:
        return [self.W1, self.b1, self.W2, self.b2]

    def copy(self) -> "MlpParams":
        return MlpParams(*(a.copy() for a in self.arrays()))

    def zeros_like(self) -> "MlpParams":
        return MlpParams(*(np.zeros_like(a) for a in self.arrays()))


@dataclass
class Expert:
    params: MlpParams
    alpha: float
    task: int
    prior: ClassPrior


@dataclass
class Selector:
    params: MlpParams
    weighting: str = "softmax"

    @property
    def num_outputs(self) -> int:
        return self.params.W2.shape[1]


@dataclass
class TrainConfig:
    lr0: float = 0.01
    momentum: float = 0.9
    batch_size: int = 128
    epochs_stage1: int = 20
    epochs_stage2: int = 10
    selector_weighting: str = "softmax"
    seed: int = 0

    def validate(self) -> None:
        if self.lr0 <= 0:
            raise ModelError("lr0 must be positive")
        if not 0 <= self.momentum < 1:
            raise ModelError("momentum must be in [0, 1)")
        if self.batch_size < 1:
            raise ModelError("batch_size must be at least 1")
        if self.epochs_stage1 < 1 or self.epochs_stage2 < 1:
            raise ModelError("epoch counts must be positive")
        if self.selector_weighting not in ("softmax", "raw"):
            raise ModelError("selector_weighting must be 'softmax' or 'raw'")


def hidden_width(D: int) -> int:
    return max(1, D // 2)


def init_mlp(rng: RngState, D: int, H: int, O: int) -> MlpParams:
    """Uniform fan-in init, ``U(-sqrt(6/fan_in), sqrt(6/fan_in))``; zero biases.

    Consumes ``D*H + H*O`` uniforms: W1 row-major, then W2 row-major.
    """
    if min(D, H, O) < 1:
        raise ModelError("MLP dimensions must be positive")
    b1 = math.sqrt(6.0 / D)
    b2 = math.sqrt(6.0 / H)
    W1 = (2.0 * rng.uniform(D * H) - 1.0).reshape(D, H) * b1
    W2 = (2.0 * rng.uniform(H * O) - 1.0).reshape(H, O) * b2
    return MlpParams(W1, np.zeros(H), W2, np.zeros(O))


def mlp_forward(params: MlpParams, x) -> np.ndarray:
    """Logits ``relu(x W1 + b1) W2 + b2`` for one vector or a batch of rows."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.W1.shape[0]:
        raise ModelError(f"input dim {x.shape[-1]} != MLP input {params.W1.shape[0]}")
    hidden = np.maximum(x @ params.W1 + params.b1, 0.0)
    return hidden @ params.W2 + params.b2


def mlp_grad(params: MlpParams, X, upstream) -> MlpParams:
    """Gradients of the batch-mean loss given per-sample logit gradients."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    G = np.atleast_2d(np.asarray(upstream, dtype=np.float64))
    n = X.shape[0]
    pre = X @ params.W1 + params.b1
    hidden = np.maximum(pre, 0.0)
    dW2 = hidden.T @ G / n
    db2 = G.sum(axis=0) / n
    dpre = (G @ params.W2.T) * (pre > 0.0)
    dW1 = X.T @ dpre / n
    db1 = dpre.sum(axis=0) / n
    return MlpParams(dW1, db1, dW2, db2)


def cosine_lr(t: int, total: int, lr0: float) -> float:
    if total <= 1:
        return lr0
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * t / (total - 1)))


class SGD:
    """Heavy-ball momentum: ``v <- m v + g``, ``theta <- theta - lr v``."""

    def __init__(self, params: MlpParams, momentum: float):
        self.params = params
        self.momentum = momentum
        self.velocity = params.zeros_like()

    def step(self, grads: MlpParams, lr: float) -> None:
        for p, v, g in zip(self.params.arrays(), self.velocity.arrays(), grads.arrays()):
            v *= self.momentum
            v += g
            p -= lr * v


def _batches(rng: RngState, n: int, batch_size: int):
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start : start + batch_size]


def fit_heads(heads, X, y, adjustments, cfg: TrainConfig, rng: RngState, epochs: int) -> None:
    """Train several MLP heads in place on one shared batch order.

    ``adjustments[i]`` is the logit adjustment of head ``i``.  The heads
    have disjoint parameters, so one pass over shared batches equals
    independent training of each.
    """
    opts = [SGD(h, cfg.momentum) for h in heads]
    for epoch in range(epochs):
        lr = cosine_lr(epoch, epochs, cfg.lr0)
        for idx in _batches(rng, X.shape[0], cfg.batch_size):
            xb, yb = X[idx], y[idx]
            for head, opt, adj in zip(heads, opts, adjustments):
                _, g = adjusted_loss_batch(mlp_forward(head, xb), yb, adj)
                opt.step(mlp_grad(head, xb, g), lr)


def train_expert_group(task, cfg: TrainConfig, alphas, rng: RngState) -> list[Expert]:
    """One expert per ``alpha`` trained on ``task``; initialised in ``alphas`` order."""
    train = task.train
    if len(train) == 0:
        raise ModelError(f"domain {task.index} has no training data")
    prior = task.prior
    D, C = train.d, train.num_classes
    heads = [init_mlp(rng, D, hidden_width(D), C) for _ in alphas]
    adjustments = [adjustment_vector(prior, a) for a in alphas]
    for adj in adjustments:
        if np.any(~np.isfinite(adj[train.labels])):
            raise LossError("target class masked")
    fit_heads(heads, train.features, train.labels, adjustments, cfg, rng, cfg.epochs_stage1)
    return [Expert(h, float(a), task.index, prior) for h, a in zip(heads, alphas)]


def expert_logits(pool, X) -> np.ndarray:
    """Stacked expert logits, shape (n, |pool|, C)."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    return np.stack([mlp_forward(e.params, X) for e in pool], axis=1)


def selector_weights(selector: Selector, X) -> np.ndarray:
    raw = mlp_forward(selector.params, X)
    return stable_softmax(raw) if selector.weighting == "softmax" else raw


def fuse(weights, E) -> np.ndarray:
    return np.einsum("np,npc->nc", weights, E)


def train_selector(features, labels, pool, cfg: TrainConfig, rng: RngState) -> Selector:
    """Fresh selector trained on ``(features, labels)`` through the frozen pool."""
    if not pool:
        raise ModelError("expert pool is empty")
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if X.shape[0] == 0:
        raise ModelError("synthetic set is empty")
    D = X.shape[1]
    selector = Selector(init_mlp(rng, D, hidden_width(D), len(pool)), cfg.selector_weighting)
    E = expert_logits(pool, X)
    opt = SGD(selector.params, cfg.momentum)
    for epoch in range(cfg.epochs_stage2):
        lr = cosine_lr(epoch, cfg.epochs_stage2, cfg.lr0)
        for idx in _batches(rng, X.shape[0], cfg.batch_size):
            xb, Eb, yb = X[idx], E[idx], y[idx]
            upstream = _selector_upstream(selector, xb, Eb, yb)[1]
            opt.step(mlp_grad(selector.params, xb, upstream), lr)
    return selector


def selector_loss(selector: Selector, X, E, y) -> float:
    return float(np.mean(_selector_upstream(selector, X, E, y)[0]))


def _selector_upstream(selector: Selector, X, E, y):
    """Per-sample fused CE losses and their gradients w.r.t. selector outputs."""
    raw = mlp_forward(selector.params, X)
    w = stable_softmax(raw) if selector.weighting == "softmax" else raw
    z = fuse(w, E)
    logp = log_softmax(z)
    rows = np.arange(z.shape[0])
    losses = -logp[rows, y]
    gz = np.exp(logp)
    gz[rows, y] -= 1.0
    gw = np.einsum("nc,npc->np", gz, E)
    if selector.weighting == "softmax":
        ga = w * (gw - np.sum(w * gw, axis=1, keepdims=True))
    else:
        ga = gw
    return losses, ga


# --------------------------------------------------------------------------
# checkpoints: JSON index + raw little-endian f64 sidecar


def save_checkpoint(path, pool, selector: Selector | None) -> None:
    path = Path(path)
    blob = bytearray()

    def put(params: MlpParams) -> dict:
        entry = {"offset": len(blob) // 8, "dims": list(params.shape)}
        for a in params.arrays():
            blob.extend(np.ascontiguousarray(a, dtype="<f8").tobytes())
        return entry

    index = {"format": "dce-model", "version": 1, "experts": []}
    for e in pool:
        entry = put(e.params)
        entry.update(
            task=e.task, alpha=e.alpha, prior=e.prior.p.tolist(), present=e.prior.present.tolist()
        )
        index["experts"].append(entry)
    if selector is not None:
        index["selector"] = put(selector.params)
        index["selector"].update(weighting=selector.weighting, outputs=selector.num_outputs)
    index["sidecar"] = path.with_suffix(".bin").name
    path.with_suffix(".bin").write_bytes(bytes(blob))
    path.write_text(json.dumps(index, indent=2) + "\n")


def load_checkpoint(path) -> tuple[list[Expert], Selector | None]:
    path = Path(path)
    index = json.loads(path.read_text())
    if index.get("format") != "dce-model":
        raise ModelError(f"{path}: not a model checkpoint")
    data = np.frombuffer((path.parent / index["sidecar"]).read_bytes(), dtype="<f8")

    def take(entry) -> MlpParams:
        D, H, O = entry["dims"]
        off = entry["offset"]
        out = []
        for shape in ((D, H), (H,), (H, O), (O,)):
            size = int(np.prod(shape))
            out.append(data[off : off + size].astype(np.float64).reshape(shape))
            off += size
        return MlpParams(*out)

    pool = [
        Expert(take(e), e["alpha"], e["task"], ClassPrior(np.array(e["prior"]), np.array(e["present"])))
        for e in index["experts"]
    ]
    selector = None
    if "selector" in index:
        selector = Selector(take(index["selector"]), index["selector"]["weighting"])
    return pool, selector


def train_config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
