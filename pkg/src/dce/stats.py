"""Class Gaussian statistics, OAS shrinkage and the global statistics repository."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import DomainTask


class StatsError(ValueError):
    pass


@dataclass(frozen=True)
class ClassGaussian:
    domain: int
    cls: int
    mean: np.ndarray
    count: int


@dataclass(frozen=True)
class DomainCovariance:
    domain: int
    sigma_bar: np.ndarray
    contributing_classes: int


@dataclass
class StatsRepo:
    gaussians: dict[tuple[int, int], ClassGaussian] = field(default_factory=dict)
    domain_covs: dict[int, DomainCovariance] = field(default_factory=dict)

    @property
    def domains(self) -> list[int]:
        return sorted(self.domain_covs)

    def pairs(self) -> list[tuple[int, int]]:
        return sorted(self.gaussians)

    def num_stored_floats(self) -> int:
        means = sum(g.mean.size for g in self.gaussians.values())
        covs = sum(c.sigma_bar.size for c in self.domain_covs.values())
        return means + covs


def fit_class_gaussian(samples) -> tuple[np.ndarray, np.ndarray | None, int]:
    """Mean, unbiased covariance (``None`` when n < 2) and count."""
    X = np.asarray(samples, dtype=np.float64)
    n = X.shape[0]
    if n == 0:
        raise StatsError("cannot fit a Gaussian to zero samples")
    mean = X.mean(axis=0)
    if n < 2:
        return mean, None, n
    centered = X - mean
    cov = centered.T @ centered / (n - 1)
    return mean, 0.5 * (cov + cov.T), n


def oas_shrink(sigma_emp, n: int, d: int | None = None) -> tuple[float, np.ndarray]:
    """Oracle-approximating shrinkage toward ``tr(S)/d * I``.

    rho = ((1 - 2/d) tr(S^2) + tr(S)^2) / ((n + 1 - 2/d) (tr(S^2) - tr(S)^2 / d)),
    clamped to [0, 1].  A (numerically) spherical ``S`` has a vanishing
    denominator; the target then equals the input and rho is set to 1.
    """
    S = np.asarray(sigma_emp, dtype=np.float64)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise StatsError("covariance must be square")
    if np.max(np.abs(S - S.T), initial=0.0) > 1e-9 * (1.0 + np.max(np.abs(S), initial=0.0)):
        raise StatsError("covariance is not symmetric")
    d = S.shape[0] if d is None else d
    if d != S.shape[0]:
        raise StatsError(f"d={d} does not match covariance shape {S.shape}")
    if n < 2:
        raise StatsError("OAS needs n >= 2")
    tr = float(np.trace(S))
    tr2 = float(np.sum(S * S))  # tr(S @ S) for symmetric S
    num = (1.0 - 2.0 / d) * tr2 + tr * tr
    den = (n + 1.0 - 2.0 / d) * (tr2 - tr * tr / d)
    if den <= 1e-15 * (n + 1.0) * tr2:
        rho = 1.0
    else:
        rho = min(1.0, max(0.0, num / den))
    shrunk = (1.0 - rho) * S
    shrunk[np.diag_indices(d)] += rho * tr / d
    return rho, shrunk


def build_domain_stats(
    task: DomainTask, cov_min_samples: int = 10
) -> tuple[dict[tuple[int, int], ClassGaussian], DomainCovariance]:
    """Per-class means for every present class and the averaged OAS covariance.

    Only classes with at least ``cov_min_samples`` training samples feed the
    domain covariance.
    """
    train = task.train
    gaussians = {}
    covs = []
    for c in range(train.num_classes):
        X = train.of_class(c)
        if X.shape[0] == 0:
            continue
        mean, cov, n = fit_class_gaussian(X)
        gaussians[(task.index, c)] = ClassGaussian(task.index, c, mean, n)
        if n >= max(cov_min_samples, 2):
            covs.append(oas_shrink(cov, n, train.d)[1])
    if not covs:
        raise StatsError(
            f"insufficient data for domain covariance in domain {task.index}: "
            f"no class has >= {cov_min_samples} samples (lower cov_min_samples in the config)"
        )
    sigma_bar = np.mean(covs, axis=0)
    sigma_bar = 0.5 * (sigma_bar + sigma_bar.T)
    return gaussians, DomainCovariance(task.index, sigma_bar, len(covs))


def merge_repo(repo: StatsRepo, gaussians, domain_cov: DomainCovariance) -> StatsRepo:
    """Return a new repository holding ``repo`` plus one more domain."""
    b = domain_cov.domain
    if b in repo.domain_covs:
        raise StatsError(f"domain {b} already merged")
    if any(key[0] != b for key in gaussians):
        raise StatsError("class statistics belong to a different domain")
    merged = StatsRepo(dict(repo.gaussians), dict(repo.domain_covs))
    merged.gaussians.update(gaussians)
    merged.domain_covs[b] = domain_cov
    return merged


# --------------------------------------------------------------------------
# persistence: JSON index + raw little-endian f64 sidecar


def save_repo(repo: StatsRepo, path) -> None:
    path = Path(path)
    blob = bytearray()
    index = {"format": "dce-stats", "version": 1, "gaussians": [], "domain_covs": []}
    for key in repo.pairs():
        g = repo.gaussians[key]
        index["gaussians"].append(
            {"domain": g.domain, "class": g.cls, "count": g.count, "offset": len(blob) // 8, "d": g.mean.size}
        )
        blob += g.mean.astype("<f8").tobytes()
    for b in repo.domains:
        cov = repo.domain_covs[b]
        index["domain_covs"].append(
            {
                "domain": b,
                "contributing_classes": cov.contributing_classes,
                "offset": len(blob) // 8,
                "d": cov.sigma_bar.shape[0],
            }
        )
        blob += cov.sigma_bar.astype("<f8").tobytes()
    index["sidecar"] = path.with_suffix(".bin").name
    path.with_suffix(".bin").write_bytes(bytes(blob))
    path.write_text(json.dumps(index, indent=2) + "\n")


def load_repo(path) -> StatsRepo:
    path = Path(path)
    index = json.loads(path.read_text())
    if index.get("format") != "dce-stats":
        raise StatsError(f"{path}: not a statistics index")
    data = np.frombuffer((path.parent / index["sidecar"]).read_bytes(), dtype="<f8")
    repo = StatsRepo()
    for e in index["gaussians"]:
        mean = data[e["offset"] : e["offset"] + e["d"]].astype(np.float64)
        repo.gaussians[(e["domain"], e["class"])] = ClassGaussian(e["domain"], e["class"], mean, e["count"])
    for e in index["domain_covs"]:
        d = e["d"]
        sigma = data[e["offset"] : e["offset"] + d * d].astype(np.float64).reshape(d, d)
        repo.domain_covs[e["domain"]] = DomainCovariance(e["domain"], sigma, e["contributing_classes"])
    return repo
