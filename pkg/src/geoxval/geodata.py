"""Spatial data containers, distances, covariance construction and CSV I/O."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import scipy.linalg as sla

from .errors import DomainError, DuplicateSiteError, NotPDError, ParseError, ShapeError

JITTER_FACTOR = 1e-10


@dataclass(frozen=True)
class Location:
    x1: float
    x2: float

    def __post_init__(self):
        if not (math.isfinite(self.x1) and math.isfinite(self.x2)):
            raise DomainError(f"non-finite location ({self.x1}, {self.x2})")

    @property
    def coords(self):
        return (self.x1, self.x2)


def as_coords(locations) -> np.ndarray:
    """Return an ``(n, 2)`` float array from Locations or array-likes."""
    if isinstance(locations, np.ndarray):
        coords = np.asarray(locations, dtype=float)
    else:
        coords = np.array(
            [loc.coords if isinstance(loc, Location) else tuple(loc) for loc in locations],
            dtype=float,
        )
    if coords.ndim != 2 or coords.shape[1] != 2:
        raise ShapeError(f"locations must have shape (n, 2), got {coords.shape}")
    if not np.all(np.isfinite(coords)):
        raise DomainError("locations must be finite")
    return coords


@dataclass(eq=False)
class GeoDataset:
    """Responses observed at planar sites.

    ``covariates`` holds the non-intercept columns of the mean design; the
    intercept is always prepended by :meth:`design_matrix`. ``strata`` are
    integer labels ``1..K``.
    """

    coords: np.ndarray
    y: np.ndarray
    covariates: Optional[np.ndarray] = None
    strata: Optional[np.ndarray] = None
    name: str = ""
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.coords = as_coords(self.coords)
        self.y = np.asarray(self.y, dtype=float).reshape(-1)
        n = len(self.coords)
        if len(self.y) != n:
            raise ShapeError(f"{n} locations but {len(self.y)} responses")
        if not np.all(np.isfinite(self.y)):
            raise DomainError("responses must be finite")
        if self.covariates is not None:
            cov = np.asarray(self.covariates, dtype=float)
            if cov.ndim == 1:
                cov = cov[:, None]
            if cov.shape[0] != n:
                raise ShapeError(f"{n} locations but {cov.shape[0]} covariate rows")
            self.covariates = cov if cov.shape[1] else None
        if self.strata is not None:
            strata = np.asarray(self.strata)
            if strata.shape != (n,):
                raise ShapeError(f"{n} locations but {strata.size} stratum labels")
            if not np.all(strata == np.round(strata)) or strata.min() < 1:
                raise DomainError("stratum labels must be integers >= 1")
            self.strata = strata.astype(int)

    @property
    def n(self) -> int:
        return len(self.y)

    @property
    def locations(self) -> list[Location]:
        return [Location(float(a), float(b)) for a, b in self.coords]

    def design_matrix(self) -> np.ndarray:
        ones = np.ones((self.n, 1))
        if self.covariates is None:
            return ones
        return np.hstack([ones, self.covariates])

    @property
    def n_beta(self) -> int:
        return 1 if self.covariates is None else 1 + self.covariates.shape[1]

    @cached_property
    def distances(self) -> np.ndarray:
        if self.n == 1:
            return np.zeros((1, 1))
        return pairwise_distances(self.coords)

    @cached_property
    def median_distance(self) -> float:
        iu = np.triu_indices(self.n, k=1)
        return float(np.median(self.distances[iu]))

    def subset(self, idx) -> "GeoDataset":
        idx = np.asarray(idx, dtype=int)
        return GeoDataset(
            coords=self.coords[idx],
            y=self.y[idx],
            covariates=None if self.covariates is None else self.covariates[idx],
            strata=None if self.strata is None else self.strata[idx],
            name=self.name,
        )

    def with_strata(self, strata) -> "GeoDataset":
        return GeoDataset(self.coords, self.y, self.covariates, strata, self.name, dict(self.metadata))


def pairwise_distances(locations) -> np.ndarray:
    """Euclidean distance matrix; rejects coincident sites."""
    coords = as_coords(locations)
    if len(coords) < 2:
        raise ShapeError("need at least two locations")
    diff = coords[:, None, :] - coords[None, :, :]
    d = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    iu, ju = np.triu_indices(len(coords), k=1)
    dup = d[iu, ju] == 0.0
    if np.any(dup):
        raise DuplicateSiteError(list(zip(iu[dup], ju[dup])))
    return d


def exp_correlation(u, phi):
    """Exponential correlation ``exp(-u / phi)``."""
    if not phi > 0:
        raise DomainError(f"range parameter phi must be positive, got {phi}")
    u = np.asarray(u, dtype=float)
    if np.any(u < 0):
        raise DomainError("distances must be nonnegative")
    out = np.exp(-u / phi)
    return float(out) if out.ndim == 0 else out


def _take(x, subset):
    if subset is None:
        return x
    return x[np.ix_(subset, subset)] if x.ndim == 2 else x[subset]


def covariance_matrix(params, D, model, subset=None) -> np.ndarray:
    """``tau2 I + sigma2 R`` (M1/M2) or ``tau2 I + sigma2 Delta^-1/2 R Delta^-1/2`` (M3).

    ``params.log_delta`` may be given over all sites of ``D`` or already
    aligned with ``subset``.
    """
    from .models import ModelKind

    model = ModelKind.parse(model)
    if not params.sigma2 > 0 or not params.tau2 >= 0:
        raise DomainError("need sigma2 > 0 and tau2 >= 0")
    D = np.asarray(D, dtype=float)
    idx = None if subset is None else np.asarray(subset, dtype=int)
    Dsub = _take(D, idx)
    R = exp_correlation(Dsub, params.phi)
    R = np.atleast_2d(R)
    if model is ModelKind.M3:
        d = _scale_factors(params.log_delta, len(D), idx)
        S = params.sigma2 * (d[:, None] * R * d[None, :])
    else:
        S = params.sigma2 * R
    S[np.diag_indices_from(S)] += params.tau2
    return S


def _scale_factors(log_delta, n_full, idx):
    if log_delta is None:
        raise DomainError("M3 requires log_delta")
    log_delta = np.asarray(log_delta, dtype=float)
    m = n_full if idx is None else len(idx)
    if idx is not None and len(log_delta) == n_full:
        log_delta = log_delta[idx]
    if len(log_delta) != m:
        raise ShapeError(f"log_delta has length {len(log_delta)}, expected {m}")
    return np.exp(-0.5 * log_delta)


def cholesky(S: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor with a single diagonal jitter retry."""
    try:
        return sla.cholesky(S, lower=True, check_finite=False)
    except np.linalg.LinAlgError:
        pass
    if not np.all(np.isfinite(S)):
        raise NotPDError("matrix has non-finite entries")
    jitter = JITTER_FACTOR * float(np.mean(np.diag(S)))
    try:
        return sla.cholesky(S + jitter * np.eye(len(S)), lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise NotPDError(f"matrix not positive definite after jitter {jitter:.3g}") from exc


# --------------------------------------------------------------------- CSV I/O


@dataclass(frozen=True)
class CsvFormat:
    """Column layout ``x1,x2,y[,stratum][,cov1..covp]``."""

    stratum: bool = False
    n_covariates: int = 0

    @property
    def header(self) -> list[str]:
        cols = ["x1", "x2", "y"]
        if self.stratum:
            cols.append("stratum")
        cols += [f"cov{k + 1}" for k in range(self.n_covariates)]
        return cols

    @classmethod
    def from_header(cls, header: Sequence[str]) -> "CsvFormat":
        header = [h.strip() for h in header]
        if header[:3] != ["x1", "x2", "y"]:
            raise ParseError(f"header must start with x1,x2,y; got {','.join(header)}", row=1)
        rest = header[3:]
        stratum = bool(rest) and rest[0] == "stratum"
        if stratum:
            rest = rest[1:]
        fmt = cls(stratum=stratum, n_covariates=len(rest))
        if header != fmt.header:
            raise ParseError(f"unexpected columns {','.join(header)}; expected {','.join(fmt.header)}", row=1)
        return fmt


def read_dataset(path, fmt: Optional[CsvFormat] = None, name: str = "") -> GeoDataset:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file", row=1) from None
        found = CsvFormat.from_header(header)
        if fmt is not None and found != fmt:
            raise ParseError(f"header {','.join(header)} does not match expected {','.join(fmt.header)}", row=1)
        cols = found.header
        rows = []
        for rownum, raw in enumerate(reader, start=2):
            if not raw or all(not c.strip() for c in raw):
                continue
            if len(raw) != len(cols):
                raise ParseError(f"expected {len(cols)} fields, found {len(raw)}", row=rownum)
            vals = []
            for col, cell in zip(cols, raw):
                try:
                    v = float(cell)
                except ValueError:
                    raise ParseError(f"non-numeric value {cell!r}", row=rownum, column=col) from None
                if not math.isfinite(v):
                    raise ParseError(f"non-finite value {cell!r}", row=rownum, column=col)
                vals.append(v)
            rows.append(vals)
    if not rows:
        raise ParseError("no data rows", row=2)
    arr = np.array(rows)
    nxt = 3
    strata = None
    if found.stratum:
        strata = arr[:, 3]
        bad = np.flatnonzero((strata != np.round(strata)) | (strata < 1))
        if bad.size:
            raise ParseError("stratum labels must be integers >= 1", row=int(bad[0]) + 2, column="stratum")
        nxt = 4
    cov = arr[:, nxt:] if found.n_covariates else None
    return GeoDataset(coords=arr[:, :2], y=arr[:, 2], covariates=cov, strata=strata, name=name or path.stem)


def _fmt_float(v: float, decimals: Optional[int]) -> str:
    return repr(float(v)) if decimals is None else f"{v:.{decimals}f}"


def dataset_to_csv(dataset: GeoDataset, decimals: Optional[int] = None) -> str:
    fmt = CsvFormat(stratum=dataset.strata is not None,
                    n_covariates=0 if dataset.covariates is None else dataset.covariates.shape[1])
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(fmt.header)
    for i in range(dataset.n):
        row = [_fmt_float(dataset.coords[i, 0], decimals), _fmt_float(dataset.coords[i, 1], decimals),
               _fmt_float(dataset.y[i], decimals)]
        if dataset.strata is not None:
            row.append(str(int(dataset.strata[i])))
        if dataset.covariates is not None:
            row += [_fmt_float(v, decimals) for v in dataset.covariates[i]]
        writer.writerow(row)
    return buf.getvalue()


def write_dataset(dataset: GeoDataset, path, decimals: Optional[int] = None) -> Path:
    """Write ``dataset`` as CSV. ``decimals=None`` keeps full float precision."""
    path = Path(path)
    path.write_text(dataset_to_csv(dataset, decimals), encoding="utf-8")
    return path


def write_matrix(M: np.ndarray, path) -> Path:
    """Dense row-major, space-separated text dump for debugging."""
    path = Path(path)
    np.savetxt(path, np.atleast_2d(M), fmt="%.17g", delimiter=" ")
    return path


def read_matrix(path) -> np.ndarray:
    return np.atleast_2d(np.loadtxt(path, dtype=float))
