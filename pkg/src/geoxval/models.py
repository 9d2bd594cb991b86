"""Likelihoods and conditional predictive laws for the three spatial models.

* M1, Gaussian: ``y ~ N(X beta, tau2 I + sigma2 R)``
* M2, Student-t: ``y ~ ST(X beta, nu, tau2 I + sigma2 R)``
* M3, Gaussian-log-Gaussian: ``y | Delta ~ N(X beta, tau2 I + sigma2 Delta^-1/2 R Delta^-1/2)``
  with ``log(delta) ~ N(-upsilon/2 1, upsilon R)``

Two routes compute the predictive law of validation responses given training
responses. :func:`conditional_moments` / :func:`predictive_sample` factor the
training covariance directly and serve one split at a time.
:class:`SplitFactor` factors the full-data covariance once per parameter value
and derives every split's training likelihood and conditional law from blocks
of the full precision matrix, which is what makes reweighting many splits
against one posterior draw cheap.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
import scipy.linalg as sla
from scipy.special import gammaln

from .errors import DomainError, NotPDError, ShapeError, SplitError
from .geodata import GeoDataset, cholesky, covariance_matrix, exp_correlation

LOG_2PI = math.log(2.0 * math.pi)


class ModelKind(enum.Enum):
    M1 = "m1"
    M2 = "m2"
    M3 = "m3"

    @classmethod
    def parse(cls, value) -> "ModelKind":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            raise DomainError(f"unknown model {value!r}; expected one of m1, m2, m3") from None

    @property
    def label(self) -> str:
        return self.name


@dataclass
class ModelParams:
    beta: np.ndarray
    sigma2: float
    tau2: float
    phi: float
    nu: Optional[float] = None
    upsilon: Optional[float] = None
    log_delta: Optional[np.ndarray] = None

    def __post_init__(self):
        self.beta = np.atleast_1d(np.asarray(self.beta, dtype=float))
        if self.log_delta is not None:
            self.log_delta = np.asarray(self.log_delta, dtype=float).reshape(-1)

    @property
    def mu(self) -> float:
        return float(self.beta[0])

    def validate(self, model, n: Optional[int] = None) -> "ModelParams":
        model = ModelKind.parse(model)
        if not (self.sigma2 > 0 and self.tau2 >= 0 and self.phi > 0):
            raise DomainError(f"invalid covariance parameters sigma2={self.sigma2}, tau2={self.tau2}, phi={self.phi}")
        if not np.all(np.isfinite(self.beta)):
            raise DomainError("mean coefficients must be finite")
        if model is ModelKind.M2 and not (self.nu is not None and self.nu > 0):
            raise DomainError("M2 requires nu > 0")
        if model is ModelKind.M3:
            if not (self.upsilon is not None and self.upsilon > 0):
                raise DomainError("M3 requires upsilon > 0")
            if self.log_delta is None or not np.all(np.isfinite(self.log_delta)):
                raise DomainError("M3 requires a finite log_delta vector")
            if n is not None and len(self.log_delta) != n:
                raise ShapeError(f"log_delta has length {len(self.log_delta)}, expected {n}")
        return self

    def copy(self, **changes) -> "ModelParams":
        out = replace(self, **changes)
        out.beta = np.array(out.beta, dtype=float)
        if out.log_delta is not None:
            out.log_delta = np.array(out.log_delta, dtype=float)
        return out


@dataclass
class PredictiveDraw:
    y_rep: np.ndarray
    valid_idx: np.ndarray
    log_delta_v: Optional[np.ndarray] = None


@dataclass
class ConditionalLaw:
    """Law of ``y_V | y_T``: Gaussian when ``dof`` is infinite, else multivariate t."""

    mean: np.ndarray
    scale: np.ndarray
    dof: float = math.inf
    valid_idx: np.ndarray = field(default=None)
    _chol: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def covariance(self) -> np.ndarray:
        if math.isinf(self.dof):
            return self.scale
        if self.dof <= 2:
            raise DomainError("covariance undefined for dof <= 2")
        return self.scale * (self.dof / (self.dof - 2.0))

    @property
    def chol(self) -> np.ndarray:
        if self._chol is None:
            self._chol = cholesky(self.scale)
        return self._chol

    def sample(self, rng: np.random.Generator, size: Optional[int] = None) -> np.ndarray:
        m = len(self.mean)
        shape = (m,) if size is None else (size, m)
        z = rng.standard_normal(shape)
        draw = z @ self.chol.T
        if not math.isinf(self.dof):
            w = rng.chisquare(self.dof, size=None if size is None else (size, 1))
            draw = draw / np.sqrt(w / self.dof)
        return self.mean + draw


# ----------------------------------------------------------- helpers


def split_indices(split, n: int):
    """Return ``(train_idx, valid_idx)`` for a SplitVector, a 0/1 vector or an index pair.

    An explicit ``(train_idx, valid_idx)`` tuple keeps the caller's site order.
    """
    if isinstance(split, tuple) and len(split) == 2:
        train, valid = (np.asarray(a, dtype=int).reshape(-1) for a in split)
        if len(np.intersect1d(train, valid)) or len(train) + len(valid) != n:
            raise ShapeError("training and validation indices must partition the sites")
        return train, valid
    if hasattr(split, "train_idx"):
        return split.train_idx, split.valid_idx
    s = np.asarray(split).reshape(-1)
    if s.shape != (n,):
        raise ShapeError(f"split has length {s.size}, expected {n}")
    return np.flatnonzero(s == 0), np.flatnonzero(s == 1)


def _require_split(train, valid):
    if len(train) == 0 or len(valid) == 0:
        raise SplitError(f"split needs nonempty training and validation sets (n_T={len(train)}, n_V={len(valid)})")


def mean_vector(params: ModelParams, data: GeoDataset, idx=None) -> np.ndarray:
    X = data.design_matrix()
    if X.shape[1] != len(params.beta):
        raise ShapeError(f"{len(params.beta)} mean coefficients for a design with {X.shape[1]} columns")
    mu = X @ params.beta
    return mu if idx is None else mu[idx]


def gaussian_logpdf_chol(resid: np.ndarray, L: np.ndarray) -> float:
    w = sla.solve_triangular(L, resid, lower=True, check_finite=False)
    logdet = 2.0 * float(np.sum(np.log(np.diag(L))))
    return -0.5 * (len(resid) * LOG_2PI + logdet + float(w @ w))


def student_t_logpdf_terms(m: int, logdet: float, quad: float, nu: float) -> float:
    return float(
        gammaln(0.5 * (nu + m)) - gammaln(0.5 * nu) - 0.5 * m * math.log(nu * math.pi)
        - 0.5 * logdet - 0.5 * (nu + m) * math.log1p(quad / nu)
    )


def gaussian_logpdf_terms(m: int, logdet: float, quad: float) -> float:
    return -0.5 * (m * LOG_2PI + logdet + quad)


# ----------------------------------------------------------- likelihood


def log_likelihood(model, params: ModelParams, data: GeoDataset, subset=None) -> float:
    """Log density of ``y[subset]`` under ``model`` restricted to ``subset``."""
    model = ModelKind.parse(model)
    n = data.n
    idx = np.arange(n) if subset is None else np.asarray(subset, dtype=int).reshape(-1)
    if idx.size == 0:
        raise ShapeError("subset must be nonempty")
    if idx.min() < 0 or idx.max() >= n:
        raise ShapeError("subset index out of range")
    if model is ModelKind.M3 and params.log_delta is not None and len(params.log_delta) not in (n, len(idx)):
        raise ShapeError(f"log_delta has length {len(params.log_delta)}; expected {n} or {len(idx)}")
    S = covariance_matrix(params, data.distances, model, idx)
    L = cholesky(S)
    resid = data.y[idx] - mean_vector(params, data, idx)
    if model is ModelKind.M2:
        w = sla.solve_triangular(L, resid, lower=True, check_finite=False)
        logdet = 2.0 * float(np.sum(np.log(np.diag(L))))
        return student_t_logpdf_terms(len(idx), logdet, float(w @ w), params.nu)
    return gaussian_logpdf_chol(resid, L)


# ----------------------------------------------------------- single split route


def conditional_moments(model, params: ModelParams, data: GeoDataset, split) -> ConditionalLaw:
    """Exact law of the validation responses given the training responses.

    M1 and M3 (given the completed ``log_delta``) are Gaussian; M2 is
    multivariate t with ``nu + n_T`` degrees of freedom and scale inflated by
    ``(nu + d1) / (nu + n_T)``, ``d1`` the training Mahalanobis term.
    """
    model = ModelKind.parse(model)
    train, valid = split_indices(split, data.n)
    _require_split(train, valid)
    if model is ModelKind.M3:
        if params.log_delta is None or len(params.log_delta) != data.n:
            raise ShapeError("M3 conditional moments need log_delta over all sites")
    order = np.concatenate([train, valid])
    S = covariance_matrix(params, data.distances, model, order)
    nt = len(train)
    L = cholesky(S[:nt, :nt])
    A = sla.solve_triangular(L, S[:nt, nt:], lower=True, check_finite=False)
    w = sla.solve_triangular(L, data.y[train] - mean_vector(params, data, train), lower=True, check_finite=False)
    mean = mean_vector(params, data, valid) + A.T @ w
    schur = S[nt:, nt:] - A.T @ A
    schur = 0.5 * (schur + schur.T)
    if model is ModelKind.M2:
        d1 = float(w @ w)
        dof = params.nu + nt
        return ConditionalLaw(mean, schur * ((params.nu + d1) / dof), dof, valid)
    return ConditionalLaw(mean, schur, math.inf, valid)


def log_delta_conditional(params: ModelParams, data: GeoDataset, split):
    """Mean and covariance of ``log delta_V | log delta_T`` under its Gaussian prior."""
    train, valid = split_indices(split, data.n)
    _require_split(train, valid)
    x = np.asarray(params.log_delta, dtype=float)
    xt = x[train] if len(x) == data.n else x
    if len(xt) != len(train):
        raise ShapeError("log_delta must cover all sites or exactly the training sites")
    m = -0.5 * params.upsilon
    Dm = data.distances
    R_tt = np.atleast_2d(exp_correlation(Dm[np.ix_(train, train)], params.phi))
    R_tv = np.atleast_2d(exp_correlation(Dm[np.ix_(train, valid)], params.phi))
    R_vv = np.atleast_2d(exp_correlation(Dm[np.ix_(valid, valid)], params.phi))
    L = cholesky(R_tt)
    A = sla.solve_triangular(L, R_tv, lower=True, check_finite=False)
    w = sla.solve_triangular(L, xt - m, lower=True, check_finite=False)
    mean = m + A.T @ w
    cov = params.upsilon * (R_vv - A.T @ A)
    return mean, 0.5 * (cov + cov.T)


def sample_log_delta_v(params: ModelParams, data: GeoDataset, split, rng, size=None) -> np.ndarray:
    mean, cov = log_delta_conditional(params, data, split)
    L = cholesky(cov)
    shape = (len(mean),) if size is None else (size, len(mean))
    return mean + rng.standard_normal(shape) @ L.T


def predictive_sample(model, params: ModelParams, data: GeoDataset, split, rng: np.random.Generator,
                      size: Optional[int] = None, log_delta_v=None) -> PredictiveDraw:
    """Draw replicated validation responses from ``[y_V | y_T, theta]``.

    Under M3 the mixing field at validation sites is first drawn from its
    prior conditional given the training sites, unless ``log_delta_v`` is
    supplied.
    """
    model = ModelKind.parse(model)
    train, valid = split_indices(split, data.n)
    _require_split(train, valid)
    if model is not ModelKind.M3:
        law = conditional_moments(model, params, data, split)
        return PredictiveDraw(law.sample(rng, size), valid)

    def completed(xv):
        full = np.empty(data.n)
        x = np.asarray(params.log_delta, dtype=float)
        full[train] = x[train] if len(x) == data.n else x
        full[valid] = xv
        return params.copy(log_delta=full)

    if log_delta_v is not None:
        xv = np.asarray(log_delta_v, dtype=float)
        law = conditional_moments(model, completed(xv), data, split)
        return PredictiveDraw(law.sample(rng, size), valid, xv)
    if size is None:
        xv = sample_log_delta_v(params, data, split, rng)
        law = conditional_moments(model, completed(xv), data, split)
        return PredictiveDraw(law.sample(rng), valid, xv)
    xvs = sample_log_delta_v(params, data, split, rng, size)
    ys = np.empty((size, len(valid)))
    for k in range(size):
        law = conditional_moments(model, completed(xvs[k]), data, split)
        ys[k] = law.sample(rng)
    return PredictiveDraw(ys, valid, xvs)


# ----------------------------------------------------------- many-split route


def _batched_cholesky(A: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        pass
    diag = np.einsum("...ii->...i", A)
    jitter = 1e-10 * diag.mean(axis=-1)
    eye = np.eye(A.shape[-1])
    try:
        return np.linalg.cholesky(A + jitter[..., None, None] * eye)
    except np.linalg.LinAlgError as exc:
        raise NotPDError("batched matrix not positive definite after jitter") from exc


def _batched_inverse_spd(A: np.ndarray):
    """Return ``(inverse, logdet)`` of a stack of SPD matrices."""
    L = _batched_cholesky(A)
    eye = np.broadcast_to(np.eye(A.shape[-1]), A.shape)
    Linv = np.linalg.solve(L, eye)
    inv = np.swapaxes(Linv, -1, -2) @ Linv
    logdet = 2.0 * np.sum(np.log(np.einsum("...ii->...i", L)), axis=-1)
    return inv, logdet


def _gather(M: np.ndarray, idx: np.ndarray) -> np.ndarray:
    return M[idx[:, :, None], idx[:, None, :]]


class SplitFactor:
    """Factorization of one parameter value shared by a batch of splits.

    With ``P`` the full-data precision matrix and ``V`` a split's validation
    block, the training covariance satisfies ``log|S_TT| = log|S| + log|P_VV|``;
    the training quadratic form is ``e'Pe - z_V' P_VV^-1 z_V`` with ``z = Pe``;
    and ``y_V | y_T`` has covariance ``P_VV^-1`` and mean ``y_V - P_VV^-1 z_V``.
    Only ``n_V x n_V`` work is done per split.

    ``valid_idx`` is an ``(I, n_V)`` integer array; every split has the same
    number of validation sites.
    """

    def __init__(self, model, params: ModelParams, data: GeoDataset, valid_idx: np.ndarray, R: Optional[np.ndarray] = None):
        self.model = model = ModelKind.parse(model)
        self.params = params
        V = np.atleast_2d(np.asarray(valid_idx, dtype=int))
        self.valid_idx = V
        n = data.n
        nv = V.shape[1]
        self.n_train = nt = n - nv
        if nt < 1 or nv < 1:
            raise SplitError("splits need nonempty training and validation sets")
        if R is None:
            R = exp_correlation(data.distances, params.phi)
        if model is ModelKind.M3:
            d = np.exp(-0.5 * params.log_delta)
            S = params.sigma2 * (d[:, None] * R * d[None, :])
        else:
            d = None
            S = params.sigma2 * R
        S[np.diag_indices(n)] += params.tau2
        L = cholesky(S)
        logdet = 2.0 * float(np.sum(np.log(np.diag(L))))
        P = sla.cho_solve((L, True), np.eye(n), check_finite=False)
        e = data.y - mean_vector(params, data)
        z = P @ e
        q = float(e @ z)
        if model is ModelKind.M2:
            self.loglik_full = student_t_logpdf_terms(n, logdet, q, params.nu)
        else:
            self.loglik_full = gaussian_logpdf_terms(n, logdet, q)

        Svv_cond, logdet_pvv = _batched_inverse_spd(_gather(P, V))
        Svv_cond = 0.5 * (Svv_cond + np.swapaxes(Svv_cond, -1, -2))
        zV = z[V]
        SzV = np.einsum("kij,kj->ki", Svv_cond, zV)
        d1 = q - np.einsum("ki,ki->k", zV, SzV)
        logdet_tt = logdet + logdet_pvv
        if model is ModelKind.M2:
            nu = params.nu
            self.loglik_train = (gammaln(0.5 * (nu + nt)) - gammaln(0.5 * nu) - 0.5 * nt * math.log(nu * math.pi)
                                 - 0.5 * logdet_tt - 0.5 * (nu + nt) * np.log1p(d1 / nu))
        else:
            self.loglik_train = -0.5 * (nt * LOG_2PI + logdet_tt + d1)
        self.d1 = d1
        mu_v = mean_vector(params, data)[V]
        self._resid_cond = e[V] - SzV  # kriging correction Sigma_VT Sigma_TT^-1 e_T
        self._mu_v = mu_v
        self.sigma_vv = _gather(S, V)

        if model is ModelKind.M3:
            self._R_vv = _gather(R, V)
            self._d_v = d[V]
            self._explained = self.sigma_vv - Svv_cond  # Sigma_VT Sigma_TT^-1 Sigma_TV
            Lr = cholesky(R)
            Q = sla.cho_solve((Lr, True), np.eye(n), check_finite=False)
            m = -0.5 * params.upsilon
            zq = Q @ (params.log_delta - m)
            Qinv_vv, _ = _batched_inverse_spd(_gather(Q, V))
            Qinv_vv = 0.5 * (Qinv_vv + np.swapaxes(Qinv_vv, -1, -2))
            self._x_mean = params.log_delta[V] - np.einsum("kij,kj->ki", Qinv_vv, zq[V])
            self._x_chol = _batched_cholesky(params.upsilon * Qinv_vv)
        else:
            self.cond_mean = mu_v + self._resid_cond
            if model is ModelKind.M2:
                dof = params.nu + nt
                self.dof = dof
                self.cond_scale = Svv_cond * ((params.nu + d1) / dof)[:, None, None]
            else:
                self.dof = math.inf
                self.cond_scale = Svv_cond
            self._chol = _batched_cholesky(self.cond_scale)

    def log_weights(self, alpha: float) -> np.ndarray:
        """``log f(y_T | theta) - alpha log f(y | theta)`` for every split."""
        return self.loglik_train - alpha * self.loglik_full

    def draw(self, rng: np.random.Generator):
        """One predictive draw per split.

        Returns ``(y_rep, sigma_v, log_delta_v)``; ``sigma_v`` is the
        validation-site covariance ``tau2 I + sigma2 R_VV`` (rescaled by the
        drawn mixing field under M3) used by the Mahalanobis discrepancy.
        """
        I, nv = self.valid_idx.shape
        if self.model is not ModelKind.M3:
            eps = rng.standard_normal((I, nv))
            y = np.einsum("kij,kj->ki", self._chol, eps)
            if self.model is ModelKind.M2:
                w = rng.chisquare(self.dof, size=(I, 1))
                y = y / np.sqrt(w / self.dof)
            return self.cond_mean + y, self.sigma_vv, None
        p = self.params
        xv = self._x_mean + np.einsum("kij,kj->ki", self._x_chol, rng.standard_normal((I, nv)))
        dn = np.exp(-0.5 * xv)
        g = dn / self._d_v
        mean = self._mu_v + g * self._resid_cond
        sig_new = p.sigma2 * (dn[:, :, None] * self._R_vv * dn[:, None, :])
        sig_new[:, np.arange(nv), np.arange(nv)] += p.tau2
        cov = sig_new - g[:, :, None] * self._explained * g[:, None, :]
        Lc = _batched_cholesky(0.5 * (cov + np.swapaxes(cov, -1, -2)))
        y = mean + np.einsum("kij,kj->ki", Lc, rng.standard_normal((I, nv)))
        return y, sig_new, xv
