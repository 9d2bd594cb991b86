"""MC and SIR estimators of the expected predictive discrepancy.

The MC estimator runs one training-posterior chain per split. The SIR
estimator runs ``H`` chains on the power posterior with ``alpha = n_T / n``
and reweights every draw towards each split's training posterior with
``log w = log f(y_T | theta) - alpha log f(y | theta)``.

Both estimators are computed in two stages: :func:`run_mc` / :func:`run_sir`
collect discrepancy values for every requested discrepancy kind and stratum,
and the ``*_estimate`` functions reduce them to an :class:`EstimatorOutput`.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .discrepancy import DiscrepancyKind, evaluate_batch
from .errors import ChainFailure, DegenerateWeightsError, DesignError
from .geodata import GeoDataset, covariance_matrix, exp_correlation
from .mcmc import ChainConfig, PowerPosterior, PriorConfig, TrainingPosterior, run_chain
from .models import (
    ModelKind,
    ModelParams,
    SplitFactor,
    conditional_moments,
    log_likelihood,
    sample_log_delta_v,
)
from .splits import SplitBatch, SplitVector, StratifiedDesign, as_seed_sequence, child_seeds

ESS_FLAG_FRACTION = 0.05


# ------------------------------------------------------------------ weights


def log_importance_weight(params: ModelParams, data: GeoDataset, model, split) -> float:
    """``log f(y_T | theta) - (n_T / n) log f(y | theta)``."""
    if isinstance(split, SplitVector):
        train = split.train_idx
    else:
        train = np.flatnonzero(np.asarray(split) == 0)
    alpha = len(train) / data.n
    full = log_likelihood(model, params, data)
    if len(train) == data.n:
        return full - alpha * full
    return log_likelihood(model, params, data, train) - alpha * full


def normalize_log_weights(log_w, axis: int = -1) -> np.ndarray:
    """Self-normalized weights computed with max subtraction."""
    lw = np.asarray(log_w, dtype=float)
    top = np.max(lw, axis=axis, keepdims=True)
    if np.any(~np.isfinite(top)):
        raise DegenerateWeightsError("log-weights have no finite maximum", ess=0.0)
    w = np.exp(lw - top)
    total = w.sum(axis=axis, keepdims=True)
    return w / total


def effective_sample_size(weights, axis: int = -1) -> np.ndarray:
    w = np.asarray(weights, dtype=float)
    return w.sum(axis=axis) ** 2 / np.sum(w * w, axis=axis)


@dataclass
class WeightSet:
    log_weights: np.ndarray

    def __post_init__(self):
        self.log_weights = np.asarray(self.log_weights, dtype=float).reshape(-1)
        if self.log_weights.size == 0:
            raise DegenerateWeightsError("empty weight set", ess=0.0)

    @property
    def normalized(self) -> np.ndarray:
        return normalize_log_weights(self.log_weights)

    @property
    def ess(self) -> float:
        return float(effective_sample_size(self.normalized))


def weight_diagnostics(weights) -> dict:
    """ESS, largest normalized weight and a low-ESS flag (``ESS < 0.05 J``)."""
    if isinstance(weights, WeightSet):
        w = weights.normalized
    else:
        w = np.asarray(weights, dtype=float)
        w = w / w.sum()
    J = len(w)
    ess = float(effective_sample_size(w))
    return {"ess": ess, "max_share": float(w.max()), "J": J, "flagged": ess < ESS_FLAG_FRACTION * J}


def self_normalized_mean(log_w, values) -> np.ndarray:
    """Weighted mean of ``values`` along axis 0 with weights from ``log_w``."""
    w = normalize_log_weights(log_w)
    return np.tensordot(w, np.asarray(values, dtype=float), axes=(0, 0))


# ------------------------------------------------------------------ results


@dataclass
class StratumResult:
    stratum: int
    psi_hat: float
    variance: float
    weight: float
    n_valid: int

    def to_dict(self) -> dict:
        return {"stratum": self.stratum, "psi_hat": self.psi_hat, "variance": self.variance,
                "std_error": math.sqrt(self.variance) if self.variance == self.variance else None,
                "weight": self.weight, "n_valid": self.n_valid}


@dataclass
class EstimatorOutput:
    estimator: str
    model: str
    discrepancy: str
    psi_hat: float
    variance: float
    variance_available: bool = True
    per_stratum: Optional[list] = None
    per_split: Optional[np.ndarray] = None
    diagnostics: dict = field(default_factory=dict)
    finite_population_variance: Optional[float] = None

    @property
    def std_error(self) -> float:
        return math.sqrt(self.variance) if self.variance_available else math.nan

    def to_dict(self) -> dict:
        out = {
            "estimator": self.estimator, "model": self.model, "discrepancy": self.discrepancy,
            "psi_hat": self.psi_hat,
            "variance": self.variance if self.variance_available else None,
            "std_error": self.std_error if self.variance_available else None,
            "variance_available": self.variance_available,
            "diagnostics": self.diagnostics,
        }
        if self.per_stratum is not None:
            out["per_stratum"] = [s.to_dict() for s in self.per_stratum]
            out["finite_population_variance"] = self.finite_population_variance
        return out


# ------------------------------------------------------------------ collection


def child_streams(rng, count: int) -> list:
    """Independent seed sequences for ``count`` tasks, fixed by the master seed."""
    if isinstance(rng, np.random.Generator):
        return [g.bit_generator.seed_seq for g in rng.spawn(count)]
    return child_seeds(rng, count)


def _map(fn, items, workers: int):
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


def _groups(design: Optional[StratifiedDesign], n_V: int):
    """Column slices: the full validation set, then one per stratum."""
    groups = [slice(0, n_V)]
    if design is not None:
        start = 0
        for nv in design.n_valid:
            groups.append(slice(start, start + nv))
            start += nv
    return groups


def _check_design(splits: SplitBatch, design: Optional[StratifiedDesign]):
    if design is None:
        return
    for i, s in enumerate(splits):
        if not design.conforms(s):
            raise DesignError(f"split {i} does not match the stratified design (counts {design.counts(s)})")


def _kinds(discrepancies) -> list:
    if isinstance(discrepancies, (str, DiscrepancyKind)):
        discrepancies = [discrepancies]
    return [DiscrepancyKind.parse(d) for d in discrepancies]


def _runs(state_id: np.ndarray):
    """Start/stop pairs of consecutive identical chain states."""
    J = len(state_id)
    j = 0
    while j < J:
        k = j + 1
        while k < J and state_id[k] == state_id[j]:
            k += 1
        yield j, k
        j = k


def _chain_summary(index, sample, kind):
    row = {"task": kind, "index": index}
    row.update({f"accept_{k}": v for k, v in sample.acceptance.items()})
    for name, s in sample.summary().items():
        row[f"mean_{name}"] = s["mean"]
    return row


@dataclass
class CollectedRun:
    """Discrepancy values from one estimator run.

    ``values`` is ``(D, I, J, G)`` for MC (raw ``r_ij``) and ``(D, H, I, G)``
    for SIR (weighted ``Psi_hi``); ``G`` indexes the full validation set
    followed by each stratum.
    """

    estimator: str
    model: ModelKind
    kinds: list
    values: np.ndarray
    I: int
    J: int
    H: int
    n: int
    design: Optional[StratifiedDesign] = None
    ess: Optional[np.ndarray] = None
    chains: list = field(default_factory=list)
    elapsed: float = 0.0

    def _index(self, kind) -> int:
        kind = DiscrepancyKind.parse(kind)
        try:
            return self.kinds.index(kind)
        except ValueError:
            raise KeyError(f"discrepancy {kind.value} was not collected") from None

    def _psi_var(self, d: int, g: int):
        if self.estimator == "mc":
            r = self.values[d, :, :, g]
            per_split = r.mean(axis=1)
            psi = float(per_split.mean())
            var = float(np.sum((r - psi) ** 2)) / (self.I * self.J) ** 2
            return psi, var, per_split
        v = self.values[d, :, :, g]
        per_split = v.mean(axis=0)
        psi = float(v.mean(axis=1).mean())
        var = float(np.sum((v - psi) ** 2)) / (self.H * self.I) ** 2
        return psi, var, per_split

    def _diagnostics(self) -> dict:
        diag = {"I": self.I, "J": self.J, "H": self.H, "K": 1 if self.design is None else self.design.K}
        if self.ess is not None:
            diag.update(ess_min=float(self.ess.min()), ess_mean=float(self.ess.mean()),
                        ess_median=float(np.median(self.ess)),
                        ess_flagged=int(np.sum(self.ess < ESS_FLAG_FRACTION * self.J)))
        return diag

    def estimate(self, kind) -> EstimatorOutput:
        """Unstratified estimate over the whole validation set."""
        d = self._index(kind)
        psi, var, per_split = self._psi_var(d, 0)
        return EstimatorOutput(
            estimator=self.estimator, model=self.model.label, discrepancy=self.kinds[d].value, psi_hat=psi,
            variance=var, variance_available=self.estimator == "mc" or self.H >= 2, per_split=per_split,
            diagnostics=self._diagnostics(),
        )

    def stratified(self, kind) -> EstimatorOutput:
        if self.design is None:
            raise DesignError("run was collected without a stratified design")
        d = self._index(kind)
        design = self.design
        w = np.array(design.weights)
        psis, vars_, s2 = [], [], []
        strata = []
        per_split = []
        for k, lab in enumerate(design.strata):
            psi_k, var_k, ps_k = self._psi_var(d, k + 1)
            psis.append(psi_k)
            vars_.append(var_k)
            per_split.append(ps_k)
            s2.append(float(np.var(ps_k, ddof=1)) if len(ps_k) > 1 else math.nan)
            strata.append(StratumResult(lab, psi_k, var_k, float(w[k]), design.n_valid[k]))
        psi = float(np.dot(w, psis))
        var = float(np.dot(w * w, vars_))
        fp = float(sum((w[k] / self.n) * (1.0 - design.f_Vk[k]) * s2[k] / design.n_valid[k] for k in range(design.K)))
        return EstimatorOutput(
            estimator=f"stratified-{self.estimator}", model=self.model.label, discrepancy=self.kinds[d].value,
            psi_hat=psi, variance=var, variance_available=self.estimator == "mc" or self.H >= 2,
            per_stratum=strata, per_split=np.stack(per_split, axis=1), diagnostics=self._diagnostics(),
            finite_population_variance=fp,
        )


def _prepare(data: GeoDataset, splits: SplitBatch, design):
    _check_design(splits, design)
    data.distances  # noqa: B018 - populate shared caches before threading
    data.median_distance  # noqa: B018
    V = splits.valid_matrix(design)
    return V, _groups(design, splits.n_V)


def run_mc(model, data: GeoDataset, splits: SplitBatch, J: int, discrepancies, prior: PriorConfig,
           chain_cfg: ChainConfig, rng, design: Optional[StratifiedDesign] = None, workers: int = 1) -> CollectedRun:
    """Fresh training-posterior chain plus predictive draws for every split."""
    model = ModelKind.parse(model)
    kinds = _kinds(discrepancies)
    if J < 1 or len(splits) < 1:
        raise DesignError("need I >= 1 and J >= 1")
    V, groups = _prepare(data, splits, design)
    n = data.n
    cfg = chain_cfg.with_draws(J)
    seeds = child_streams(rng, len(splits))
    need_cov = any(k.needs_covariance for k in kinds)

    def task(i):
        try:
            valid = V[i]
            train = np.setdiff1d(np.arange(n), valid)
            pair = (train, valid)
            g = np.random.default_rng(seeds[i])
            sample = run_chain(TrainingPosterior(train), model, data, prior, cfg, g)
            nv = len(valid)
            Y = np.empty((J, nv))
            Sig = np.empty((J, nv, nv)) if need_cov else None
            for a, b in _runs(sample.state_id):
                p = sample[a]
                if model is ModelKind.M3:
                    xvs = sample_log_delta_v(p, data, pair, g, size=b - a)
                    for j in range(a, b):
                        full = p.log_delta.copy()
                        full[valid] = xvs[j - a]
                        pj = p.copy(log_delta=full)
                        Y[j] = conditional_moments(model, pj, data, pair).sample(g)
                        if need_cov:
                            Sig[j] = covariance_matrix(pj, data.distances, model, valid)
                else:
                    law = conditional_moments(model, p, data, pair)
                    Y[a:b] = law.sample(g, b - a)
                    if need_cov:
                        Sig[a:b] = covariance_matrix(p, data.distances, model, valid)
            yv = data.y[valid]
            r = np.stack([evaluate_batch(k, Y, yv, Sig, groups) for k in kinds])
            return r, _chain_summary(i, sample, "split")
        except Exception as exc:  # noqa: BLE001 - surfaced with the split index
            raise ChainFailure("failure while processing split", i, exc) from exc

    t0 = time.perf_counter()
    results = _map(task, range(len(splits)), workers)
    elapsed = time.perf_counter() - t0
    values = np.stack([r for r, _ in results], axis=1)
    return CollectedRun("mc", model, kinds, values, len(splits), J, 1, n, design, None,
                        [c for _, c in results], elapsed)


def run_sir(model, data: GeoDataset, splits: SplitBatch, H: int, J: int, discrepancies, prior: PriorConfig,
            chain_cfg: ChainConfig, rng, design: Optional[StratifiedDesign] = None, workers: int = 1,
            chain_seeds: Optional[Sequence] = None) -> CollectedRun:
    """``H`` power-posterior chains, each reweighted to every split.

    ``chain_seeds`` overrides the per-chain seed streams (for tests that need
    repeated chains).
    """
    model = ModelKind.parse(model)
    kinds = _kinds(discrepancies)
    if H < 1 or J < 1:
        raise DesignError("need H >= 1 and J >= 1")
    V, groups = _prepare(data, splits, design)
    alpha = splits.n_T / data.n
    cfg = chain_cfg.with_draws(J)
    seeds = list(chain_seeds) if chain_seeds is not None else child_streams(rng, H)
    if len(seeds) != H:
        raise DesignError(f"need {H} chain seeds, got {len(seeds)}")
    seeds = [as_seed_sequence(s) for s in seeds]
    yv = data.y[V]
    I = len(splits)

    def task(h):
        try:
            chain_ss, pred_ss = child_seeds(seeds[h], 2)
            sample = run_chain(PowerPosterior(alpha), model, data, prior, cfg, np.random.default_rng(chain_ss))
            g = np.random.default_rng(pred_ss)
            LW = np.empty((I, J))
            R = np.empty((len(kinds), I, J, len(groups)))
            for a, b in _runs(sample.state_id):
                p = sample[a]
                factor = SplitFactor(model, p, data, V, R=exp_correlation(data.distances, p.phi))
                lw = factor.log_weights(alpha)
                for j in range(a, b):
                    LW[:, j] = lw
                    y, sig, _ = factor.draw(g)
                    for d, k in enumerate(kinds):
                        R[d, :, j, :] = evaluate_batch(k, y, yv, sig, groups)
            W = normalize_log_weights(LW, axis=1)
            psi_hi = np.einsum("ij,dijg->dig", W, R)
            ess = effective_sample_size(W, axis=1)
            return psi_hi, ess, _chain_summary(h, sample, "chain")
        except DegenerateWeightsError:
            raise
        except Exception as exc:  # noqa: BLE001
            raise ChainFailure("failure while processing chain", h, exc) from exc

    t0 = time.perf_counter()
    results = _map(task, range(H), workers)
    elapsed = time.perf_counter() - t0
    values = np.stack([r for r, _, _ in results], axis=1)
    ess = np.stack([e for _, e, _ in results])
    return CollectedRun("sir", model, kinds, values, I, J, H, data.n, design, ess,
                        [c for _, _, c in results], elapsed)


# ------------------------------------------------------------------ public estimators


def mc_estimate(model, data, splits, J, discrepancy, prior, chain_cfg, rng, workers=1) -> EstimatorOutput:
    run = run_mc(model, data, splits, J, [discrepancy], prior, chain_cfg, rng, workers=workers)
    return run.estimate(discrepancy)


def sir_estimate(model, data, splits, H, J, discrepancy, prior, chain_cfg, rng, workers=1,
                 chain_seeds=None) -> EstimatorOutput:
    run = run_sir(model, data, splits, H, J, [discrepancy], prior, chain_cfg, rng, workers=workers,
                  chain_seeds=chain_seeds)
    return run.estimate(discrepancy)


def stratified_mc_estimate(model, data, design, splits, J, discrepancy, prior, chain_cfg, rng,
                           workers=1) -> EstimatorOutput:
    run = run_mc(model, data, splits, J, [discrepancy], prior, chain_cfg, rng, design=design, workers=workers)
    return run.stratified(discrepancy)


def stratified_sir_estimate(model, data, design, splits, H, J, discrepancy, prior, chain_cfg, rng,
                            workers=1, chain_seeds=None) -> EstimatorOutput:
    run = run_sir(model, data, splits, H, J, [discrepancy], prior, chain_cfg, rng, design=design,
                  workers=workers, chain_seeds=chain_seeds)
    return run.stratified(discrepancy)
