"""Feature datasets, the on-disk benchmark format, and the synthetic generator.

Binary feature files (``.dilf``) are little-endian::

    magic  b"DILF"
    u32    version (1)
    u32    n records
    u32    d
    u32    C (label-space size)
    n x (u32 label, d x f64 features)

A benchmark directory holds one ``manifest.json`` naming a train and a test
file per domain, in task order.
"""

from __future__ import annotations

import csv
import json
import math
import os
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .losses import ClassPrior, prior_from_counts
from .numerics import RngState

MAGIC = b"DILF"
VERSION = 1
_HEADER = struct.Struct("<4sIIII")

GROUPS = ("many", "medium", "few")


class DataError(ValueError):
    pass


@dataclass
class FeatureSet:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise DataError("features must be a 2-D array")
        if self.labels.shape != (self.features.shape[0],):
            raise DataError("one label per feature row required")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError(f"label outside [0, {self.num_classes})")
        if not np.all(np.isfinite(self.features)):
            raise DataError("non-finite feature values")

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def __len__(self) -> int:
        return self.labels.shape[0]

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def of_class(self, c: int) -> np.ndarray:
        return self.features[self.labels == c]

    @classmethod
    def empty(cls, d: int, num_classes: int) -> "FeatureSet":
        return cls(np.zeros((0, d)), np.zeros(0, np.int64), num_classes)


@dataclass
class DomainTask:
    index: int
    name: str
    train: FeatureSet
    test: FeatureSet

    @property
    def class_counts(self) -> np.ndarray:
        return self.train.class_counts()

    @property
    def prior(self) -> ClassPrior:
        return class_prior(self.class_counts)


@dataclass
class TaskStream:
    d: int
    num_classes: int
    tasks: list[DomainTask]
    thresholds: tuple[int, int] = (20, 100)

    def __len__(self) -> int:
        return len(self.tasks)

    def groups(self) -> dict[tuple[int, int], str]:
        """Frequency group of every (domain, class) pair, from that domain's train counts."""
        out = {}
        for task in self.tasks:
            for c, g in enumerate(frequency_groups(task.class_counts, self.thresholds)):
                out[(task.index, c)] = g
        return out


def class_prior(counts) -> ClassPrior:
    try:
        return prior_from_counts(counts)
    except ValueError as exc:
        raise DataError(str(exc)) from None


def frequency_groups(counts, thresholds) -> list[str]:
    """Label each class ``many``/``medium``/``few``/``absent`` by its train count.

    ``n <= t_low`` is few, ``t_low < n <= t_high`` medium, above ``t_high`` many.
    """
    t_low, t_high = thresholds
    if not t_low < t_high:
        raise DataError("thresholds need t_low < t_high")
    out = []
    for n in np.asarray(counts).tolist():
        if n <= 0:
            out.append("absent")
        elif n <= t_low:
            out.append("few")
        elif n <= t_high:
            out.append("medium")
        else:
            out.append("many")
    return out


# --------------------------------------------------------------------------
# feature files


def write_features(path, fs: FeatureSet) -> None:
    n, d = fs.features.shape
    rec = np.empty(n, dtype=_record_dtype(d))
    rec["label"] = fs.labels
    rec["x"] = fs.features
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, n, d, fs.num_classes))
        fh.write(rec.tobytes())


def read_features(path) -> FeatureSet:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise DataError(f"{path}: truncated header")
    magic, version, n, d, num_classes = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise DataError(f"{path}: bad magic")
    if version != VERSION:
        raise DataError(f"{path}: unsupported version {version}")
    dtype = _record_dtype(d)
    body = blob[_HEADER.size:]
    if len(body) != n * dtype.itemsize:
        raise DataError(f"{path}: truncated file (expected {n} records)")
    rec = np.frombuffer(body, dtype=dtype, count=n)
    labels = rec["label"].astype(np.int64)
    if n and labels.max() >= num_classes:
        raise DataError(f"{path}: label >= C ({num_classes})")
    return FeatureSet(rec["x"].reshape(n, d).copy(), labels, num_classes)


def read_csv_features(path, num_classes: int) -> FeatureSet:
    """Import ``label,f0,...,f{d-1}`` CSV rows."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0].strip() != "label":
            raise DataError(f"{path}: CSV header must start with 'label'")
        d = len(header) - 1
        expected = [f"f{i}" for i in range(d)]
        if [h.strip() for h in header[1:]] != expected:
            raise DataError(f"{path}: CSV feature columns must be f0..f{d - 1}")
        labels, rows = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != d + 1:
                raise DataError(f"{path}:{lineno}: expected {d + 1} fields")
            labels.append(int(row[0]))
            rows.append([float(v) for v in row[1:]])
    feats = np.array(rows, dtype=np.float64).reshape(len(rows), d)
    return FeatureSet(feats, np.array(labels, dtype=np.int64), num_classes)


def _record_dtype(d: int) -> np.dtype:
    return np.dtype([("label", "<u4"), ("x", "<f8", (d,))])


# --------------------------------------------------------------------------
# manifests


def load_benchmark(manifest_path) -> TaskStream:
    manifest_path = Path(manifest_path)
    try:
        with open(manifest_path) as fh:
            manifest = json.load(fh)
    except FileNotFoundError:
        raise DataError(f"manifest not found: {manifest_path}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{manifest_path}: invalid JSON ({exc})") from None
    for key in ("d", "num_classes", "thresholds", "domains"):
        if key not in manifest:
            raise DataError(f"{manifest_path}: missing key '{key}'")
    d, num_classes = int(manifest["d"]), int(manifest["num_classes"])
    thresholds = tuple(int(t) for t in manifest["thresholds"])
    if len(thresholds) != 2 or not thresholds[0] < thresholds[1]:
        raise DataError("thresholds must be [t_low, t_high] with t_low < t_high")
    if not manifest["domains"]:
        raise DataError("manifest lists no domains")
    base = manifest_path.parent
    tasks = []
    for i, entry in enumerate(manifest["domains"], start=1):
        parts = {}
        for split in ("train", "test"):
            if split not in entry:
                raise DataError(f"{manifest_path}: domain {i} has no '{split}' file")
            path = base / entry[split]
            if not path.exists():
                raise DataError(f"missing feature file: {path}")
            fs = read_features(path)
            if fs.d != d:
                raise DataError(f"{path}: dimension {fs.d} != manifest d {d}")
            if fs.num_classes != num_classes:
                raise DataError(f"{path}: label space {fs.num_classes} != {num_classes}")
            parts[split] = fs
        tasks.append(DomainTask(i, entry.get("name", f"domain{i}"), parts["train"], parts["test"]))
    return TaskStream(d, num_classes, tasks, thresholds)


# --------------------------------------------------------------------------
# synthetic benchmark


@dataclass
class GenConfig:
    num_domains: int = 3
    num_classes: int = 20
    d: int = 16
    rho: float = 100.0
    n_max: int = 1000
    test_per_class: int = 50
    noise_sigma: float = 1.0
    drift_strength: float = 0.2
    permute_frequencies: bool = True
    thresholds: tuple[int, int] = (20, 100)
    seed: int = 0

    def validate(self) -> None:
        if self.rho < 1:
            raise DataError("rho must be ≥ 1")
        if self.n_max < self.rho:
            raise DataError("n_max must be ≥ rho so that n_min ≥ 1")
        for name in ("num_domains", "num_classes", "d", "n_max", "test_per_class"):
            if int(getattr(self, name)) < 1:
                raise DataError(f"{name} must be positive")
        if self.noise_sigma < 0 or self.drift_strength < 0:
            raise DataError("noise_sigma and drift_strength must be non-negative")
        t_low, t_high = self.thresholds
        if not t_low < t_high:
            raise DataError("thresholds need t_low < t_high")


def long_tail_counts(num_classes: int, n_max: int, rho: float, ranks=None) -> np.ndarray:
    """``n_c = round(n_max * rho ** (-rank_c / (C - 1)))``, half-up rounding."""
    ranks = np.arange(num_classes) if ranks is None else np.asarray(ranks)
    if num_classes == 1:
        return np.array([n_max], dtype=np.int64)
    return np.array(
        [int(math.floor(n_max * rho ** (-r / (num_classes - 1)) + 0.5)) for r in ranks.tolist()],
        dtype=np.int64,
    )


def _drift(rng: RngState, d: int, strength: float) -> tuple[np.ndarray, np.ndarray]:
    # Cayley transform of a random skew-symmetric generator: orthogonal, and
    # the identity at strength 0.
    g = rng.standard_normal(d * d).reshape(d, d)
    skew = strength * (g - g.T) / math.sqrt(2.0 * d)
    eye = np.eye(d)
    rotation = np.linalg.solve(eye - 0.5 * skew, eye + 0.5 * skew)
    shift = strength * rng.standard_normal(d)
    return rotation, shift


def generate_synthetic(cfg: GenConfig) -> TaskStream:
    """Build an imbalanced domain-incremental stream from ``cfg``.

    Draw order from one generator: class prototypes; then per domain the
    drift (rotation, shift), the frequency ranking, train samples class by
    class, test samples class by class.
    """
    cfg.validate()
    rng = RngState(cfg.seed)
    C, d = cfg.num_classes, cfg.d
    protos = rng.standard_normal(C * d).reshape(C, d)
    protos *= math.sqrt(d) / np.linalg.norm(protos, axis=1, keepdims=True)
    tasks = []
    for b in range(1, cfg.num_domains + 1):
        rotation, shift = _drift(rng, d, cfg.drift_strength)
        centers = protos @ rotation.T + shift
        ranks = rng.permutation(C) if cfg.permute_frequencies else np.arange(C)
        counts = long_tail_counts(C, cfg.n_max, cfg.rho, ranks)
        splits = []
        for per_class in (counts, np.full(C, cfg.test_per_class)):
            feats, labels = [], []
            for c in range(C):
                n = int(per_class[c])
                noise = rng.standard_normal(n * d).reshape(n, d)
                feats.append(centers[c] + cfg.noise_sigma * noise)
                labels.append(np.full(n, c, dtype=np.int64))
            splits.append(FeatureSet(np.vstack(feats), np.concatenate(labels), C))
        tasks.append(DomainTask(b, f"domain{b}", splits[0], splits[1]))
    return TaskStream(d, C, tasks, tuple(cfg.thresholds))


def write_benchmark(stream: TaskStream, out_dir, extra: dict | None = None) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    domains = []
    for task in stream.tasks:
        entry = {"name": task.name, "train": f"{task.name}_train.dilf", "test": f"{task.name}_test.dilf"}
        write_features(out_dir / entry["train"], task.train)
        write_features(out_dir / entry["test"], task.test)
        domains.append(entry)
    manifest = {
        "d": stream.d,
        "num_classes": stream.num_classes,
        "thresholds": list(stream.thresholds),
        "domains": domains,
    }
    if extra:
        manifest.update(extra)
    path = out_dir / "manifest.json"
    tmp = path.with_suffix(".json.tmp")
    with open(tmp, "w") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")
    os.replace(tmp, path)
    return path


def gen_config_dict(cfg: GenConfig) -> dict:
    out = asdict(cfg)
    out["thresholds"] = list(cfg.thresholds)
    return out
