"""Simulated datasets: latent lattice fields, Poisson site patterns, responses.

Sites come from a Poisson process with intensity ``exp(alpha + beta S(x))``
that is piecewise constant on the same lattice as the field ``S``. With
``beta = 0`` this is complete spatial randomness.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import CapacityError, DomainError
from .geodata import GeoDataset, cholesky, pairwise_distances
from .splits import child_seeds, quadrant_labels

DEFAULT_CELL_CAP = 4096
DEFAULT_POINT_CAP = 100_000


@dataclass
class FieldGrid:
    """Lattice values ``values[i, j]`` at cell centre ``((i + .5) / m, (j + .5) / m)``."""

    m: int
    values: np.ndarray
    sigma2: float
    phi: float
    seed: Optional[int] = None

    def __post_init__(self):
        if self.m < 2:
            raise DomainError("grid needs m >= 2")
        self.values = np.asarray(self.values, dtype=float).reshape(self.m, self.m)
        if not np.all(np.isfinite(self.values)):
            raise DomainError("field values must be finite")

    @property
    def centers(self) -> np.ndarray:
        return cell_centers(self.m)

    def cell_index(self, coords) -> tuple:
        coords = np.atleast_2d(np.asarray(coords, dtype=float))
        ij = np.clip(np.floor(coords * self.m).astype(int), 0, self.m - 1)
        return ij[:, 0], ij[:, 1]

    def at(self, coords) -> np.ndarray:
        """Value of the containing cell (boundary points go to the nearest cell)."""
        i, j = self.cell_index(coords)
        return self.values[i, j]


def cell_centers(m: int) -> np.ndarray:
    g = (np.arange(m) + 0.5) / m
    xx, yy = np.meshgrid(g, g, indexing="ij")
    return np.column_stack([xx.ravel(), yy.ravel()])


@dataclass
class OutlierSpec:
    """Additive contamination ``u * sigma`` with ``u ~ U(low, high)``.

    Either explicit 0-based ``indices`` or a spatial cluster of ``n_sites``
    neighbouring sites inside quadrant ``stratum``.
    """

    indices: Optional[list] = None
    n_sites: int = 4
    stratum: int = 3
    low: float = 6.0
    high: float = 8.0
    sigma: Optional[float] = None


@dataclass
class ScenarioConfig:
    name: str = "crs"
    mu: float = 4.0
    sigma2: float = 1.5
    phi: float = 0.15
    tau2: float = 0.25
    alpha: float = 4.605
    beta: float = 0.0
    m: int = 64
    n: Optional[int] = 82
    law: str = "gaussian"
    nu: Optional[float] = None
    outlier: Optional[OutlierSpec] = None
    seed: int = 0
    cell_cap: int = DEFAULT_CELL_CAP
    point_cap: int = DEFAULT_POINT_CAP

    def __post_init__(self):
        if isinstance(self.outlier, dict):
            self.outlier = OutlierSpec(**self.outlier)
        if not (self.sigma2 > 0 and self.phi > 0 and self.tau2 >= 0):
            raise DomainError("need sigma2 > 0, phi > 0, tau2 >= 0")
        if self.law not in ("gaussian", "student-t"):
            raise DomainError(f"unknown response law {self.law!r}")
        if self.law == "student-t" and not (self.nu and self.nu > 0):
            raise DomainError("Student-t responses need nu > 0")

    def to_dict(self) -> dict:
        return asdict(self)


PRESETS = {
    "crs": dict(name="crs", alpha=4.605, beta=0.0, n=82),
    "outlier": dict(name="outlier", alpha=4.605, beta=0.0, n=82, outlier=OutlierSpec()),
    "preferential": dict(name="preferential", alpha=2.996, beta=1.0, n=100),
    "illustrative": dict(name="illustrative", mu=2.0, sigma2=1.0, phi=0.3, tau2=0.0, alpha=math.log(52.0),
                         beta=0.0, n=52, law="student-t", nu=3.0, m=8),
}


def scenario_config(name: str, **overrides) -> ScenarioConfig:
    if name not in PRESETS:
        raise DomainError(f"unknown scenario {name!r}; expected one of {sorted(PRESETS)}")
    kw = dict(PRESETS[name])
    if isinstance(kw.get("outlier"), OutlierSpec):
        kw["outlier"] = OutlierSpec()
    kw.update({k: v for k, v in overrides.items() if v is not None})
    return ScenarioConfig(**kw)


# ------------------------------------------------------------------ pieces


def simulate_field(m: int, sigma2: float, phi: float, rng: np.random.Generator,
                   cap: int = DEFAULT_CELL_CAP) -> FieldGrid:
    """Exact zero-mean Gaussian draw at the ``m x m`` cell centres."""
    if m < 2:
        raise DomainError("grid needs m >= 2")
    if m * m > cap:
        raise CapacityError(f"grid of {m * m} cells exceeds the dense Cholesky cap of {cap}")
    if not (sigma2 > 0 and phi > 0):
        raise DomainError("need sigma2 > 0 and phi > 0")
    pts = cell_centers(m)
    C = sigma2 * np.exp(-pairwise_distances(pts) / phi)
    L = cholesky(C)
    vals = L @ rng.standard_normal(m * m)
    return FieldGrid(m, vals.reshape(m, m), sigma2, phi)


def sample_point_process(field: FieldGrid, alpha: float, beta: float, rng: np.random.Generator,
                         n: Optional[int] = None, cap: int = DEFAULT_POINT_CAP):
    """Cell-wise Poisson draw with intensity ``exp(alpha + beta S)``.

    With ``n`` given the realized pattern is thinned uniformly at random, or
    augmented by extra draws from the realized intensity, to exactly ``n``
    points. Returns ``(coords, info)``.
    """
    m = field.m
    area = 1.0 / (m * m)
    lam = np.exp(alpha + beta * field.values).ravel()
    expected = float(lam.sum() * area)
    if not math.isfinite(expected) or expected > cap:
        raise CapacityError(f"expected point count {expected:.4g} exceeds the cap of {cap}")
    if n is not None and n > cap:
        raise CapacityError(f"requested {n} points exceeds the cap of {cap}")
    counts = rng.poisson(lam * area)
    cells = np.repeat(np.arange(m * m), counts)
    realized = len(cells)
    mode = "poisson"
    if n is not None:
        if realized > n:
            keep = np.sort(rng.choice(realized, size=n, replace=False))
            cells = cells[keep]
            mode = "thinned"
        elif realized < n:
            extra = rng.choice(m * m, size=n - realized, p=lam / lam.sum())
            cells = np.concatenate([cells, extra])
            mode = "augmented"
        else:
            mode = "exact"
    i, j = np.divmod(cells, m)
    offs = rng.random((len(cells), 2))
    coords = np.column_stack([(i + offs[:, 0]) / m, (j + offs[:, 1]) / m])
    info = {"expected_count": expected, "realized_count": realized, "mode": mode, "n": len(coords)}
    return coords, info


def observe(field: FieldGrid, locations, mu: float, tau2: float, rng: np.random.Generator,
            law: str = "gaussian", nu: Optional[float] = None) -> np.ndarray:
    """Responses at ``locations``.

    Gaussian: ``mu + S(cell) + N(0, tau2)`` independently. Student-t: a joint
    multivariate-t draw with location ``mu``, ``nu`` degrees of freedom and
    scale ``tau2 I + sigma2 R`` using the field's covariance parameters.
    """
    coords = np.atleast_2d(np.asarray(locations, dtype=float))
    if law == "gaussian":
        s = field.at(coords)
        noise = math.sqrt(tau2) * rng.standard_normal(len(coords)) if tau2 > 0 else 0.0
        return mu + s + noise
    if law != "student-t" or not (nu and nu > 0):
        raise DomainError("Student-t responses need nu > 0")
    C = field.sigma2 * np.exp(-pairwise_distances(coords) / field.phi)
    C[np.diag_indices_from(C)] += tau2
    L = cholesky(C)
    z = L @ rng.standard_normal(len(coords))
    w = rng.chisquare(nu)
    return mu + z / math.sqrt(w / nu)


def contaminate(y, indices: Sequence[int], sigma: float, rng: np.random.Generator,
                low: float = 6.0, high: float = 8.0):
    """Add ``u * sigma`` with ``u ~ U(low, high)`` at ``indices``; returns ``(y_new, u)``."""
    y = np.array(y, dtype=float)
    idx = np.asarray(list(indices), dtype=int)
    for i in idx:
        if not -len(y) <= i < len(y):
            raise IndexError(f"index {i} out of range for {len(y)} observations")
    u = rng.uniform(low, high, size=len(idx))
    y[idx] += u * sigma
    return y, u


def outlier_cluster(coords, n_sites: int = 4, stratum: int = 3) -> np.ndarray:
    """A site near the centre of quadrant ``stratum`` and its nearest neighbours there."""
    coords = np.asarray(coords, dtype=float)
    labels = quadrant_labels(coords)
    inside = np.flatnonzero(labels == stratum)
    if len(inside) < n_sites:
        raise DomainError(f"quadrant {stratum} holds only {len(inside)} sites")
    centre = np.array([0.25 + 0.5 * ((stratum - 1) % 2), 0.25 + 0.5 * ((stratum - 1) // 2)])
    anchor = inside[np.argmin(np.linalg.norm(coords[inside] - centre, axis=1))]
    dist = np.linalg.norm(coords[inside] - coords[anchor], axis=1)
    return np.sort(inside[np.argsort(dist, kind="stable")[:n_sites]])


# ------------------------------------------------------------------ full scenarios


def build_scenario(cfg: ScenarioConfig) -> tuple[GeoDataset, FieldGrid]:
    """Simulate one dataset; every random stage draws from its own child stream."""
    field_ss, point_ss, obs_ss, cont_ss = child_seeds(cfg.seed, 4)
    grid = simulate_field(cfg.m, cfg.sigma2, cfg.phi, np.random.default_rng(field_ss), cfg.cell_cap)
    coords, pinfo = sample_point_process(grid, cfg.alpha, cfg.beta, np.random.default_rng(point_ss), cfg.n,
                                         cfg.point_cap)
    y = observe(grid, coords, cfg.mu, cfg.tau2, np.random.default_rng(obs_ss), cfg.law, cfg.nu)
    meta = {"scenario": cfg.name, "seed": cfg.seed, "config": cfg.to_dict(), "point_process": pinfo}
    if cfg.outlier is not None:
        spec = cfg.outlier
        idx = np.asarray(spec.indices, dtype=int) if spec.indices is not None else \
            outlier_cluster(coords, spec.n_sites, spec.stratum)
        sigma = spec.sigma if spec.sigma is not None else math.sqrt(cfg.sigma2 + cfg.tau2)
        y_clean = y
        y, u = contaminate(y, idx, sigma, np.random.default_rng(cont_ss), spec.low, spec.high)
        meta["outliers"] = {"indices": idx.tolist(), "u": u.tolist(), "sigma": sigma,
                            "clean_values": y_clean[idx].tolist()}
    strata = quadrant_labels(coords)
    ds = GeoDataset(coords=coords, y=y, strata=strata, name=cfg.name, metadata=meta)
    return ds, grid


def simulate_scenario(name: str, seed: int, **overrides) -> GeoDataset:
    return build_scenario(scenario_config(name, seed=seed, **overrides))[0]
