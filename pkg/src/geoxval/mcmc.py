"""Priors, power posteriors and adaptive random-walk Metropolis-Hastings.

Chains target either the posterior given a training subset or the power
posterior ``g(theta) ∝ f(y | theta)^alpha pi(theta)`` on the full data.
Positive parameters move on the log scale (the Jacobian is included in the
acceptance ratio); mean coefficients and the M3 mixing field move on their
natural scale. Step sizes adapt by Robbins-Monro during burn-in only.
"""

from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np
import scipy.linalg as sla
from scipy.linalg.blas import dger

from .errors import AdaptationError, DomainError, NotPDError, SplitError
from .geodata import GeoDataset, cholesky, exp_correlation
from .models import (
    LOG_2PI,
    ModelKind,
    ModelParams,
    gaussian_logpdf_terms,
    split_indices,
    student_t_logpdf_terms,
)

TARGET_ACCEPT = 0.40
ACCEPT_BAND = (0.30, 0.50)
ADAPT_DECAY = 0.7
SERIES_NU = 100.0

# ------------------------------------------------------------------ special functions

_B2K = (1.0 / 6, -1.0 / 30, 1.0 / 42, -1.0 / 30, 5.0 / 66, -691.0 / 2730, 7.0 / 6)


def _trigamma_scalar(x: float) -> float:
    if not x > 0 or not math.isfinite(x):
        raise DomainError(f"trigamma needs a finite x > 0, got {x}")
    acc = 0.0
    while x < 10.0:
        acc += 1.0 / (x * x)
        x += 1.0
    inv = 1.0 / x
    inv2 = inv * inv
    tail = 0.0
    p = inv2 * inv
    for b in _B2K:
        tail += b * p
        p *= inv2
    return acc + inv + 0.5 * inv2 + tail


def trigamma(x):
    """Trigamma function via upward recurrence and the asymptotic series."""
    if np.ndim(x) == 0:
        return _trigamma_scalar(float(x))
    arr = np.asarray(x, dtype=float)
    return np.vectorize(_trigamma_scalar, otypes=[float])(arr)


# large-nu expansion of the Jeffreys bracket, coefficients of nu^-4 .. nu^-13
_JEFF_SERIES = (6.0, -12.0, 14.0, -12.0, 22.0, -60.0, 30.0, 276.0, 38.0, -4188.0)


def _jeffreys_bracket(nu: float) -> float:
    if nu >= SERIES_NU:
        inv = 1.0 / nu
        p = inv ** 4
        s = 0.0
        for c in _JEFF_SERIES:
            s += c * p
            p *= inv
        return s
    return trigamma(0.5 * nu) - trigamma(0.5 * (nu + 1.0)) - 2.0 * (nu + 3.0) / (nu * (nu + 1.0) ** 2)


def log_jeffreys_nu(nu: float) -> float:
    """Unnormalized log Jeffreys prior for Student-t degrees of freedom."""
    if not (nu > 0 and math.isfinite(nu)):
        return -math.inf
    br = _jeffreys_bracket(nu)
    if not br > 0:
        return -math.inf
    return 0.5 * math.log(nu / (nu + 3.0)) + 0.5 * math.log(br)


# ------------------------------------------------------------------ priors


@dataclass
class PriorConfig:
    """Hyperparameters. ``None`` for ``tau2_fixed`` puts an inverse-gamma prior on tau2."""

    a: float = 2.1
    b: float = 1.1
    tau2_mu: float = 100.0
    c: float = 1.0
    upsilon_prior: tuple = (1.0, 1.0)
    tau2_fixed: Optional[float] = 0.25
    tau2_prior: tuple = (2.1, 1.1)
    nu_fixed: Optional[float] = None
    fixed: dict = field(default_factory=dict)

    def __post_init__(self):
        self.upsilon_prior = tuple(float(v) for v in self.upsilon_prior)
        self.tau2_prior = tuple(float(v) for v in self.tau2_prior)
        vals = [self.a, self.b, self.tau2_mu, self.c, *self.upsilon_prior, *self.tau2_prior]
        if not all(v > 0 for v in vals):
            raise DomainError("prior hyperparameters must be positive")
        if self.tau2_fixed is not None and self.tau2_fixed < 0:
            raise DomainError("fixed tau2 must be nonnegative")
        if self.nu_fixed is not None and not self.nu_fixed > 0:
            raise DomainError("fixed nu must be positive")
        unknown = set(self.fixed) - set(PARAM_BLOCKS)
        if unknown:
            raise DomainError(f"unknown fixed parameters {sorted(unknown)}")

    @classmethod
    def from_dict(cls, d: Optional[dict]) -> "PriorConfig":
        return cls(**(d or {}))

    def to_dict(self) -> dict:
        fixed = {k: (np.asarray(v).tolist()) for k, v in self.fixed.items()}
        return {"a": self.a, "b": self.b, "tau2_mu": self.tau2_mu, "c": self.c,
                "upsilon_prior": list(self.upsilon_prior), "tau2_fixed": self.tau2_fixed,
                "tau2_prior": list(self.tau2_prior), "nu_fixed": self.nu_fixed, "fixed": fixed}

    def fixed_values(self) -> dict:
        out = dict(self.fixed)
        if self.tau2_fixed is not None:
            out.setdefault("tau2", self.tau2_fixed)
        if self.nu_fixed is not None:
            out.setdefault("nu", self.nu_fixed)
        return out


PARAM_BLOCKS = ("beta", "sigma2", "phi", "tau2", "nu", "upsilon", "log_delta")


def _median_distance(D) -> float:
    if isinstance(D, GeoDataset):
        return D.median_distance
    D = np.asarray(D, dtype=float)
    return float(np.median(D[np.triu_indices(len(D), k=1)]))


def _distances(D) -> np.ndarray:
    return D.distances if isinstance(D, GeoDataset) else np.asarray(D, dtype=float)


def log_inv_gamma(x: float, a: float, b: float) -> float:
    if not x > 0:
        return -math.inf
    return a * math.log(b) - math.lgamma(a) - (a + 1.0) * math.log(x) - b / x


def log_gamma_rate(x: float, shape: float, rate: float) -> float:
    if not x > 0:
        return -math.inf
    return shape * math.log(rate) - math.lgamma(shape) + (shape - 1.0) * math.log(x) - rate * x


def _lp_beta(beta, prior):
    v = prior.tau2_mu
    return float(-0.5 * len(beta) * math.log(2 * math.pi * v) - 0.5 * np.dot(beta, beta) / v)


def _lp_phi(phi, prior, med):
    return log_gamma_rate(phi, 1.0, prior.c / med)


def _lp_log_delta(x, upsilon, Rchol):
    n = len(x)
    m = -0.5 * upsilon
    w = sla.solve_triangular(Rchol, x - m, lower=True, check_finite=False)
    logdet = 2.0 * float(np.sum(np.log(np.diag(Rchol))))
    return -0.5 * (n * LOG_2PI + n * math.log(upsilon) + logdet + float(w @ w) / upsilon)


def log_prior(params: ModelParams, prior: PriorConfig, model, D, median_distance: Optional[float] = None) -> float:
    """Sum of log prior densities; ``-inf`` outside the support.

    ``D`` is a distance matrix or a dataset. tau2 and nu contribute only when
    they are not fixed by ``prior``.
    """
    model = ModelKind.parse(model)
    if not (params.sigma2 > 0 and params.phi > 0 and params.tau2 >= 0):
        return -math.inf
    med = _median_distance(D) if median_distance is None else median_distance
    lp = _lp_beta(params.beta, prior) + log_inv_gamma(params.sigma2, prior.a, prior.b)
    lp += _lp_phi(params.phi, prior, med)
    if prior.tau2_fixed is None:
        lp += log_inv_gamma(params.tau2, *prior.tau2_prior)
    if model is ModelKind.M2 and prior.nu_fixed is None:
        if params.nu is None:
            return -math.inf
        lp += log_jeffreys_nu(params.nu)
    if model is ModelKind.M3:
        if params.upsilon is None or not params.upsilon > 0 or params.log_delta is None:
            return -math.inf
        lp += log_gamma_rate(params.upsilon, *prior.upsilon_prior)
        R = np.atleast_2d(exp_correlation(_distances(D), params.phi))
        try:
            lp += _lp_log_delta(params.log_delta, params.upsilon, cholesky(R))
        except NotPDError:
            return -math.inf
    return float(lp)


def log_power_posterior(params: ModelParams, data: GeoDataset, model, alpha: float, prior: PriorConfig) -> float:
    """``alpha * log f(y | theta) + log pi(theta)``."""
    from .models import log_likelihood

    if not 0.0 <= alpha <= 1.0:
        raise DomainError(f"alpha must lie in [0, 1], got {alpha}")
    lp = log_prior(params, prior, model, data)
    if not math.isfinite(lp):
        return lp
    if alpha == 0.0:
        return lp
    return alpha * log_likelihood(model, params, data) + lp


def log_training_posterior(params: ModelParams, data: GeoDataset, model, split, prior: PriorConfig) -> float:
    """``log f(y_T | theta) + log pi(theta)``."""
    from .models import log_likelihood

    train, _ = split_indices(split, data.n)
    lp = log_prior(params, prior, model, data)
    if not math.isfinite(lp):
        return lp
    return log_likelihood(model, params, data, train) + lp


# ------------------------------------------------------------------ targets and configs


@dataclass(frozen=True, eq=False)
class TrainingPosterior:
    train_idx: np.ndarray

    @classmethod
    def from_split(cls, split, n: Optional[int] = None) -> "TrainingPosterior":
        train, _ = split_indices(split, n if n is not None else len(split.s))
        return cls(np.asarray(train, dtype=int))

    def describe(self) -> dict:
        return {"kind": "training", "train_idx": [int(i) for i in self.train_idx]}


@dataclass(frozen=True)
class PowerPosterior:
    alpha: float

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise DomainError(f"alpha must lie in [0, 1], got {self.alpha}")

    def describe(self) -> dict:
        return {"kind": "power", "alpha": self.alpha}


Target = Union[TrainingPosterior, PowerPosterior]

DEFAULT_STEPS = {"beta": 0.3, "sigma2": 0.3, "phi": 0.3, "tau2": 0.3, "nu": 0.5, "upsilon": 0.3, "log_delta": 0.5}


@dataclass
class ChainConfig:
    n_iter: int = 3000
    burn_in: int = 1000
    thin: int = 1
    step_sizes: dict = field(default_factory=dict)
    adapt: bool = True
    init: Optional[ModelParams] = None

    def __post_init__(self):
        if self.n_iter < 1 or self.thin < 1 or self.burn_in < 0:
            raise DomainError("n_iter and thin must be positive and burn_in nonnegative")
        if self.burn_in >= self.n_iter:
            raise DomainError(f"burn_in ({self.burn_in}) must be smaller than n_iter ({self.n_iter})")
        bad = [k for k, v in self.step_sizes.items() if k not in DEFAULT_STEPS or not v > 0]
        if bad:
            raise DomainError(f"invalid step sizes for {bad}")

    @property
    def n_draws(self) -> int:
        return (self.n_iter - self.burn_in) // self.thin

    def with_draws(self, J: int) -> "ChainConfig":
        """Copy whose post-burn-in output holds exactly ``J`` thinned draws."""
        return ChainConfig(self.burn_in + J * self.thin, self.burn_in, self.thin, dict(self.step_sizes),
                           self.adapt, self.init)

    def step(self, block: str) -> float:
        return float(self.step_sizes.get(block, DEFAULT_STEPS[block]))

    @classmethod
    def from_dict(cls, d: Optional[dict]) -> "ChainConfig":
        d = dict(d or {})
        return cls(**d)

    def to_dict(self) -> dict:
        return {"n_iter": self.n_iter, "burn_in": self.burn_in, "thin": self.thin,
                "step_sizes": dict(self.step_sizes), "adapt": self.adapt}


# ------------------------------------------------------------------ output


@dataclass
class PosteriorSample:
    """Post-burn-in, thinned draws stored column-wise."""

    model: ModelKind
    beta: np.ndarray
    sigma2: np.ndarray
    tau2: np.ndarray
    phi: np.ndarray
    nu: Optional[np.ndarray] = None
    upsilon: Optional[np.ndarray] = None
    log_delta: Optional[np.ndarray] = None
    state_id: Optional[np.ndarray] = None
    log_lik: Optional[np.ndarray] = None
    acceptance: dict = field(default_factory=dict)
    step_sizes: dict = field(default_factory=dict)
    target: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.sigma2)

    def __getitem__(self, j) -> ModelParams:
        return ModelParams(
            beta=self.beta[j].copy(), sigma2=float(self.sigma2[j]), tau2=float(self.tau2[j]), phi=float(self.phi[j]),
            nu=None if self.nu is None else float(self.nu[j]),
            upsilon=None if self.upsilon is None else float(self.upsilon[j]),
            log_delta=None if self.log_delta is None else self.log_delta[j].copy(),
        )

    def __iter__(self):
        return (self[j] for j in range(len(self)))

    def columns(self) -> dict:
        cols = {f"beta{k}": self.beta[:, k] for k in range(self.beta.shape[1])}
        cols.update(sigma2=self.sigma2, tau2=self.tau2, phi=self.phi)
        if self.nu is not None:
            cols["nu"] = self.nu
        if self.upsilon is not None:
            cols["upsilon"] = self.upsilon
        if self.log_delta is not None:
            for i in range(self.log_delta.shape[1]):
                cols[f"log_delta{i + 1}"] = self.log_delta[:, i]
        return cols

    def to_csv(self, include_delta: bool = True) -> str:
        cols = self.columns()
        if not include_delta:
            cols = {k: v for k, v in cols.items() if not k.startswith("log_delta")}
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["draw"] + list(cols))
        for j in range(len(self)):
            w.writerow([j + 1] + [repr(float(c[j])) for c in cols.values()])
        return buf.getvalue()

    def summary(self) -> dict:
        out = {}
        for k, v in self.columns().items():
            if k.startswith("log_delta"):
                continue
            out[k] = {"mean": float(np.mean(v)), "sd": float(np.std(v, ddof=1)) if len(v) > 1 else 0.0,
                      "mcse": mcse(v)}
        return out


def mcse(x, n_batches: Optional[int] = None) -> float:
    """Batch-means Monte Carlo standard error of the mean of ``x``."""
    x = np.asarray(x, dtype=float)
    J = len(x)
    if J < 4:
        return float("nan")
    b = n_batches or max(2, int(math.isqrt(J)))
    size = J // b
    means = x[: b * size].reshape(b, size).mean(axis=1)
    return float(np.std(means, ddof=1) / math.sqrt(b))


# ------------------------------------------------------------------ chain engine


class _Lik:
    """Likelihood over a fixed subset of sites, with a correlation cache."""

    def __init__(self, model: ModelKind, data: GeoDataset, idx: np.ndarray, weight: float):
        self.model = model
        self.idx = idx
        self.m = len(idx)
        self.y = data.y[idx]
        self.X = data.design_matrix()[idx]
        self.D = data.distances[np.ix_(idx, idx)]
        self.weight = weight
        self.active = weight != 0.0
        self._R = {}

    def corr(self, phi: float) -> np.ndarray:
        R = self._R.get(phi)
        if R is None:
            if len(self._R) > 2:
                self._R.clear()
            R = self._R[phi] = np.exp(-self.D / phi)
        return R

    def factor(self, p: ModelParams):
        """``(L, logdet, resid, quad)`` or ``None`` when not positive definite."""
        R = self.corr(p.phi)
        if self.model is ModelKind.M3:
            d = np.exp(-0.5 * p.log_delta[self.idx])
            S = p.sigma2 * (d[:, None] * R * d[None, :])
        else:
            S = p.sigma2 * R
        S[np.diag_indices(self.m)] += p.tau2
        try:
            L = cholesky(S)
        except NotPDError:
            return None
        logdet = 2.0 * float(np.sum(np.log(np.diag(L))))
        return self.with_beta(L, logdet, p.beta)

    def with_beta(self, L, logdet, beta):
        resid = self.y - self.X @ beta
        w = sla.solve_triangular(L, resid, lower=True, check_finite=False)
        return (L, logdet, resid, float(w @ w))

    def loglik(self, fac, nu) -> float:
        _, logdet, _, quad = fac
        if self.model is ModelKind.M2:
            return student_t_logpdf_terms(self.m, logdet, quad, nu)
        return gaussian_logpdf_terms(self.m, logdet, quad)


def spd_inverse(L: np.ndarray) -> np.ndarray:
    """Inverse of ``L L'`` from its lower Cholesky factor."""
    inv, info = sla.lapack.dpotri(L, lower=1)
    if info != 0:
        raise NotPDError("inverse from Cholesky factor failed")
    il = np.tril_indices(len(L), -1)
    inv[il[1], il[0]] = inv[il]
    return inv


class _PriorCache:
    """Correlation factors of the mixing-field prior, keyed by phi (current and proposed)."""

    def __init__(self, D: np.ndarray):
        self.D = D
        self._store = {}

    def _entry(self, phi: float) -> dict:
        e = self._store.get(phi)
        if e is None:
            if len(self._store) >= 2:
                self._store.pop(next(iter(self._store)))
            Lr = cholesky(np.exp(-self.D / phi))
            e = self._store[phi] = {"L": Lr}
        return e

    def chol(self, phi: float) -> np.ndarray:
        return self._entry(phi)["L"]

    def precision(self, phi: float) -> np.ndarray:
        e = self._entry(phi)
        if "Q" not in e:
            e["Q"] = spd_inverse(e["L"])
        return e["Q"]


def initial_params(model, data: GeoDataset, prior: PriorConfig, init: Optional[ModelParams] = None) -> ModelParams:
    model = ModelKind.parse(model)
    fixed = prior.fixed_values()
    if init is not None:
        p = init.copy()
    else:
        X = data.design_matrix()
        beta, *_ = np.linalg.lstsq(X, data.y, rcond=None)
        var = float(np.var(data.y - X @ beta))
        tau2 = float(fixed.get("tau2", 0.25))
        p = ModelParams(beta=beta, sigma2=max(var - tau2, 0.1 * var, 1e-3), tau2=tau2, phi=data.median_distance / 3.0)
        if model is ModelKind.M2:
            p.nu = 10.0
        if model is ModelKind.M3:
            p.upsilon = 0.5
            p.log_delta = np.full(data.n, -0.25)
    for k, v in fixed.items():
        if k == "beta":
            p.beta = np.atleast_1d(np.asarray(v, dtype=float))
        elif k == "log_delta":
            p.log_delta = np.asarray(v, dtype=float).reshape(-1)
        else:
            setattr(p, k, float(v))
    if model is ModelKind.M2 and p.nu is None:
        p.nu = 10.0
    if model is ModelKind.M3:
        if p.upsilon is None:
            p.upsilon = 0.5
        if p.log_delta is None:
            p.log_delta = np.full(data.n, -0.5 * p.upsilon)
    return p.validate(model, data.n)


def free_blocks(model, prior: PriorConfig, n_beta: int) -> list[str]:
    model = ModelKind.parse(model)
    fixed = prior.fixed_values()
    blocks = []
    if "beta" not in fixed:
        blocks += [f"beta{k}" for k in range(n_beta)]
    for name in ("sigma2", "phi", "tau2"):
        if name not in fixed:
            blocks.append(name)
    if model is ModelKind.M2 and "nu" not in fixed:
        blocks.append("nu")
    if model is ModelKind.M3:
        if "upsilon" not in fixed:
            blocks.append("upsilon")
        if "log_delta" not in fixed:
            blocks.append("log_delta")
    return blocks


class _Chain:
    def __init__(self, target: Target, model: ModelKind, data: GeoDataset, prior: PriorConfig, cfg: ChainConfig):
        self.model = model
        self.data = data
        self.prior = prior
        self.cfg = cfg
        n = data.n
        if isinstance(target, PowerPosterior):
            idx, weight = np.arange(n), float(target.alpha)
        else:
            idx, weight = np.asarray(target.train_idx, dtype=int), 1.0
        self.lik = _Lik(model, data, idx, weight)
        self.pos = np.full(n, -1)
        self.pos[idx] = np.arange(len(idx))
        self.med = data.median_distance
        self.pcache = _PriorCache(data.distances) if model is ModelKind.M3 else None
        self.blocks = free_blocks(model, prior, data.n_beta)

    # log prior pieces that depend on one block
    def lp_phi_block(self, p: ModelParams) -> float:
        lp = _lp_phi(p.phi, self.prior, self.med)
        if self.model is ModelKind.M3:
            lp += self.lp_delta(p)
        return lp

    def lp_delta(self, p: ModelParams) -> float:
        try:
            Lr = self.pcache.chol(p.phi)
        except NotPDError:
            return -math.inf
        return _lp_log_delta(p.log_delta, p.upsilon, Lr)

    def lp_block(self, block: str, p: ModelParams) -> float:
        if block.startswith("beta"):
            return _lp_beta(p.beta, self.prior)
        if block == "sigma2":
            return log_inv_gamma(p.sigma2, self.prior.a, self.prior.b)
        if block == "phi":
            return self.lp_phi_block(p)
        if block == "tau2":
            return log_inv_gamma(p.tau2, *self.prior.tau2_prior)
        if block == "nu":
            return log_jeffreys_nu(p.nu)
        if block == "upsilon":
            return log_gamma_rate(p.upsilon, *self.prior.upsilon_prior) + self.lp_delta(p)
        raise KeyError(block)

    def run(self, rng: np.random.Generator, init: ModelParams):
        cfg = self.cfg
        lik = self.lik
        p = init.copy()
        fac = lik.factor(p) if lik.active else None
        if lik.active and fac is None:
            raise NotPDError("initial covariance is not positive definite")
        ll = lik.loglik(fac, p.nu) if lik.active else 0.0
        n = self.data.n
        nblocks = [b for b in self.blocks if b != "log_delta"]
        has_delta = "log_delta" in self.blocks
        log_step = {b: math.log(cfg.step(b.rstrip("0123456789") if b.startswith("beta") else b)) for b in nblocks}
        delta_log_step = np.full(n, math.log(cfg.step("log_delta")))
        acc_burn = {b: 0 for b in self.blocks}
        acc_post = {b: 0 for b in self.blocks}
        delta_tries_post = 0
        J = cfg.n_draws
        out = {
            "beta": np.empty((J, len(p.beta))), "sigma2": np.empty(J), "tau2": np.empty(J), "phi": np.empty(J),
            "state": np.empty(J, dtype=np.int64), "ll": np.empty(J),
        }
        if self.model is ModelKind.M2:
            out["nu"] = np.empty(J)
        if self.model is ModelKind.M3:
            out["upsilon"] = np.empty(J)
            out["log_delta"] = np.empty((J, n))
        state_id = 0
        k = 0
        for t in range(1, cfg.n_iter + 1):
            burning = t <= cfg.burn_in
            gain = t ** -ADAPT_DECAY
            for b in nblocks:
                h = math.exp(log_step[b])
                eps = h * rng.standard_normal()
                u = math.log(rng.random())
                q = p.copy()
                jac = 0.0
                in_range = True
                if b.startswith("beta"):
                    q.beta[int(b[4:])] += eps
                else:
                    # moves past the float range are rejected rather than clipped
                    in_range = abs(eps) < 700.0
                    new = getattr(p, b) * math.exp(eps) if in_range else getattr(p, b)
                    in_range = in_range and 0.0 < new < math.inf
                    setattr(q, b, new)
                    jac = eps
                lp_diff = self.lp_block(b, q) - self.lp_block(b, p) if in_range else -math.inf
                accepted = False
                if lp_diff > -math.inf:
                    qfac, qll = fac, ll
                    if lik.active and b != "upsilon":
                        if b.startswith("beta"):
                            qfac = lik.with_beta(fac[0], fac[1], q.beta)
                        elif b != "nu":
                            qfac = lik.factor(q)
                        if qfac is None:
                            qll = -math.inf
                        else:
                            qll = lik.loglik(qfac, q.nu)
                    if math.isfinite(qll):
                        logr = lik.weight * (qll - ll) + lp_diff + jac
                        if u < logr:
                            p, fac, ll = q, qfac, qll
                            accepted = True
                            state_id += 1
                if burning:
                    acc_burn[b] += accepted
                    if cfg.adapt:
                        log_step[b] += gain * (accepted - TARGET_ACCEPT)
                else:
                    acc_post[b] += accepted
            if has_delta:
                accepts, nacc = self._sweep(p, fac, rng, np.exp(delta_log_step))
                if nacc:
                    state_id += 1
                    if lik.active:
                        fac = lik.factor(p)
                        if fac is None:
                            raise NotPDError("covariance lost positive definiteness during mixing-field sweep")
                        ll = lik.loglik(fac, p.nu)
                if burning:
                    acc_burn["log_delta"] += nacc
                    if cfg.adapt:
                        delta_log_step += gain * (accepts - TARGET_ACCEPT)
                else:
                    acc_post["log_delta"] += nacc
                    delta_tries_post += n
            if t == cfg.burn_in:
                dead = [b for b in self.blocks if acc_burn[b] == 0]
                if dead:
                    raise AdaptationError(f"no accepted moves during burn-in for blocks {dead}")
            if not burning and (t - cfg.burn_in) % cfg.thin == 0 and k < J:
                out["beta"][k] = p.beta
                out["sigma2"][k] = p.sigma2
                out["tau2"][k] = p.tau2
                out["phi"][k] = p.phi
                if "nu" in out:
                    out["nu"][k] = p.nu
                if "upsilon" in out:
                    out["upsilon"][k] = p.upsilon
                    out["log_delta"][k] = p.log_delta
                out["state"][k] = state_id
                out["ll"][k] = ll if lik.active else math.nan
                k += 1
        n_post = cfg.n_iter - cfg.burn_in
        rates = {b: acc_post[b] / n_post for b in nblocks}
        steps = {b: math.exp(v) for b, v in log_step.items()}
        if has_delta:
            rates["log_delta"] = acc_post["log_delta"] / max(delta_tries_post, 1)
            steps["log_delta"] = float(np.exp(np.mean(delta_log_step)))
        return out, rates, steps

    def _sweep(self, p: ModelParams, fac, rng: np.random.Generator, steps: np.ndarray):
        """Sitewise random-walk updates of ``log_delta`` (in place on ``p``)."""
        n = self.data.n
        lik = self.lik
        x = p.log_delta
        ups = p.upsilon
        Q = self.pcache.precision(p.phi)
        wq = Q @ (x + 0.5 * ups)
        eps = steps * rng.standard_normal(n)
        logu = np.log(rng.random(n))
        accepts = np.zeros(n)
        if lik.active:
            L, logdet, e, q = fac
            P = np.asfortranarray(spd_inverse(L))
            z = P @ e
            d = np.exp(-0.5 * x[lik.idx])
            args = (x, wq, Q, self.pos, eps, logu, ups, True, P, z, np.ascontiguousarray(e), d,
                    p.sigma2, p.tau2, lik.weight, q, logdet, accepts)
        else:
            dummy = np.zeros((1, 1), order="F")
            args = (x, wq, Q, self.pos, eps, logu, ups, False, dummy, np.zeros(1), np.zeros(1), np.ones(1),
                    p.sigma2, p.tau2, 0.0, 0.0, 0.0, accepts)
        nacc = sweep_kernel()(*args)
        return accepts, int(nacc)


def _sweep_numpy(x, wq, Q, pos, eps, logu, ups, active, P, z, e, d, s2, t2, wgt, q, logdet, accepts):
    """Reference sitewise sweep.

    Changing one site's mixing value is a rank-two change of the covariance:
    the likelihood ratio needs only ``P_jj``, ``z_j`` and ``e_j`` (``P`` the
    current precision, ``z = P e``), and an accepted move updates ``P`` and
    ``z`` in O(m^2). Arrays are modified in place; returns the accept count.
    """
    nacc = 0
    for i in range(len(x)):
        dx = eps[i]
        lp_diff = -0.5 * (2.0 * dx * wq[i] + dx * dx * Q[i, i]) / ups
        j = pos[i]
        if j < 0 or not active:
            if logu[i] < lp_diff:
                x[i] += dx
                wq += dx * Q[:, i]
                accepts[i] = 1.0
                nacc += 1
            continue
        dn = math.exp(-0.5 * (x[i] + dx))
        g = dn / d[j]
        Pjj = P[j, j]
        s_old = 1.0 / Pjj
        s_new = s2 * dn * dn + t2 - g * g * (s2 * d[j] * d[j] + t2 - s_old)
        if not s_new > 0:
            continue
        zj = z[j]
        r = e[j] - g * (e[j] - zj / Pjj)
        q_new = q - zj * zj / Pjj + r * r / s_new
        ld_new = logdet + math.log(s_new) - math.log(s_old)
        logr = wgt * (-0.5 * (ld_new - logdet + q_new - q)) + lp_diff
        if logu[i] < logr:
            pc = P[:, j].copy()
            tv = pc * (-g / Pjj)
            tv[j] = -1.0
            te = float(tv @ e)
            z += pc * (-zj / Pjj) + tv * (te / s_new)
            P = dger(-1.0 / Pjj, pc, pc, a=P, overwrite_a=True)
            P = dger(1.0 / s_new, tv, tv, a=P, overwrite_a=True)
            q = q_new
            logdet = ld_new
            d[j] = dn
            x[i] += dx
            wq += dx * Q[:, i]
            accepts[i] = 1.0
            nacc += 1
    return nacc


def _sweep_loops(x, wq, Q, pos, eps, logu, ups, active, P, z, e, d, s2, t2, wgt, q, logdet, accepts):
    """Same sweep as :func:`_sweep_numpy` written as explicit loops for compilation."""
    n = len(x)
    m = len(z)
    nacc = 0
    pc = np.empty(m)
    tv = np.empty(m)
    for i in range(n):
        dx = eps[i]
        lp_diff = -0.5 * (2.0 * dx * wq[i] + dx * dx * Q[i, i]) / ups
        j = pos[i]
        if j < 0 or not active:
            if logu[i] < lp_diff:
                x[i] += dx
                for k in range(n):
                    wq[k] += dx * Q[k, i]
                accepts[i] = 1.0
                nacc += 1
            continue
        dn = math.exp(-0.5 * (x[i] + dx))
        g = dn / d[j]
        Pjj = P[j, j]
        s_old = 1.0 / Pjj
        s_new = s2 * dn * dn + t2 - g * g * (s2 * d[j] * d[j] + t2 - s_old)
        if not s_new > 0:
            continue
        zj = z[j]
        r = e[j] - g * (e[j] - zj / Pjj)
        q_new = q - zj * zj / Pjj + r * r / s_new
        ld_new = logdet + math.log(s_new) - math.log(s_old)
        logr = wgt * (-0.5 * (ld_new - logdet + q_new - q)) + lp_diff
        if logu[i] < logr:
            te = 0.0
            for k in range(m):
                pc[k] = P[k, j]
                tv[k] = pc[k] * (-g / Pjj)
            tv[j] = -1.0
            for k in range(m):
                te += tv[k] * e[k]
            a1 = -1.0 / Pjj
            a2 = 1.0 / s_new
            for c in range(m):
                pcc = a1 * pc[c]
                tvc = a2 * tv[c]
                for k in range(m):
                    P[k, c] += pc[k] * pcc + tv[k] * tvc
            for k in range(m):
                z[k] += pc[k] * (-zj / Pjj) + tv[k] * (te / s_new)
            q = q_new
            logdet = ld_new
            d[j] = dn
            x[i] += dx
            for k in range(n):
                wq[k] += dx * Q[k, i]
            accepts[i] = 1.0
            nacc += 1
    return nacc


_KERNEL = None


def sweep_kernel():
    """Compiled sweep when numba is installed (and not disabled), else the numpy reference."""
    global _KERNEL
    if _KERNEL is None:
        kernel = _sweep_numpy
        if os.environ.get("GEOXVAL_NO_NUMBA", "") in ("", "0"):
            try:
                import numba
            except ImportError:
                pass
            else:
                kernel = numba.njit(cache=True, nogil=True)(_sweep_loops)
        _KERNEL = kernel
    return _KERNEL


def run_chain(target: Target, model, data: GeoDataset, prior: PriorConfig, cfg: ChainConfig,
              rng: np.random.Generator) -> PosteriorSample:
    """Adaptive random-walk Metropolis-Hastings on ``target``.

    Parameters named in ``prior.fixed`` (plus a fixed tau2 or nu) are held at
    their values; with no free block the chain returns identical draws.
    """
    model = ModelKind.parse(model)
    if isinstance(target, TrainingPosterior) and len(target.train_idx) == 0:
        raise SplitError("training posterior needs a nonempty training set")
    init = initial_params(model, data, prior, cfg.init)
    chain = _Chain(target, model, data, prior, cfg)
    out, rates, steps = chain.run(rng, init)
    return PosteriorSample(
        model=model, beta=out["beta"], sigma2=out["sigma2"], tau2=out["tau2"], phi=out["phi"],
        nu=out.get("nu"), upsilon=out.get("upsilon"), log_delta=out.get("log_delta"),
        state_id=out["state"], log_lik=out["ll"], acceptance=rates, step_sizes=steps,
        target=target.describe(),
    )
