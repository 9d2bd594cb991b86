"""Discrepancies between replicated and observed validation responses."""

from __future__ import annotations

import enum

import numpy as np
import scipy.linalg as sla

from .errors import DomainError, NotPDError, ShapeError


class DiscrepancyKind(enum.Enum):
    MSE = "mse"
    MAHALANOBIS = "mahalanobis"

    @classmethod
    def parse(cls, value) -> "DiscrepancyKind":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            raise DomainError(f"unknown discrepancy {value!r}; expected mse or mahalanobis") from None

    @property
    def needs_covariance(self) -> bool:
        return self is DiscrepancyKind.MAHALANOBIS


def _diff(y_rep, y_v):
    a = np.asarray(y_rep, dtype=float)
    b = np.asarray(y_v, dtype=float)
    if a.shape != b.shape or a.ndim != 1 or a.size == 0:
        raise ShapeError(f"need equal-length nonempty vectors, got {a.shape} and {b.shape}")
    return a - b


def mse(y_rep_v, y_v) -> float:
    d = _diff(y_rep_v, y_v)
    return float(d @ d) / len(d)


def mahalanobis(y_rep_v, y_v, sigma_v) -> float:
    """``sqrt(d' Sigma^-1 d)`` by a Cholesky solve."""
    d = _diff(y_rep_v, y_v)
    S = np.atleast_2d(np.asarray(sigma_v, dtype=float))
    if S.shape != (len(d), len(d)):
        raise ShapeError(f"covariance has shape {S.shape}, expected {(len(d), len(d))}")
    try:
        L = sla.cholesky(S, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise NotPDError("validation covariance is not positive definite") from exc
    w = sla.solve_triangular(L, d, lower=True, check_finite=False)
    return float(np.sqrt(w @ w))


def evaluate(kind, y_rep_v, y_v, sigma_v=None) -> float:
    kind = DiscrepancyKind.parse(kind)
    if kind is DiscrepancyKind.MSE:
        return mse(y_rep_v, y_v)
    if sigma_v is None:
        raise ShapeError("Mahalanobis discrepancy needs the validation covariance")
    return mahalanobis(y_rep_v, y_v, sigma_v)


# batched forms: rows are splits, columns validation sites


def mse_batch(y_rep, y_v, groups=None) -> np.ndarray:
    """Per-row MSE; with ``groups`` (list of column slices) returns ``(rows, K)``."""
    d = np.asarray(y_rep, dtype=float) - np.asarray(y_v, dtype=float)
    sq = d * d
    if groups is None:
        return sq.mean(axis=-1)
    return np.stack([sq[..., g].mean(axis=-1) for g in groups], axis=-1)


def mahalanobis_batch(y_rep, y_v, sigma, groups=None) -> np.ndarray:
    d = np.asarray(y_rep, dtype=float) - np.asarray(y_v, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    if sigma.ndim == 2:
        sigma = np.broadcast_to(sigma, d.shape[:-1] + sigma.shape)

    def one(dd, SS):
        try:
            L = np.linalg.cholesky(SS)
        except np.linalg.LinAlgError as exc:
            raise NotPDError("validation covariance is not positive definite") from exc
        w = np.linalg.solve(L, dd[..., None])[..., 0]
        return np.sqrt(np.einsum("...i,...i->...", w, w))

    if groups is None:
        return one(d, sigma)
    return np.stack([one(d[..., g], sigma[..., g, g]) for g in groups], axis=-1)


def evaluate_batch(kind, y_rep, y_v, sigma=None, groups=None) -> np.ndarray:
    kind = DiscrepancyKind.parse(kind)
    if kind is DiscrepancyKind.MSE:
        return mse_batch(y_rep, y_v, groups)
    if sigma is None:
        raise ShapeError("Mahalanobis discrepancy needs the validation covariance")
    return mahalanobis_batch(y_rep, y_v, sigma, groups)
