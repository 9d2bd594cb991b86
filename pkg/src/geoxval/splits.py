"""Training/validation split vectors and their priors.

A split marks each site ``0`` (training) or ``1`` (validation). The uniform
prior spreads mass evenly over all splits with a fixed number of validation
sites; the stratified prior is a product of per-stratum uniform priors.
"""

from __future__ import annotations

import csv
import io
import itertools
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from .errors import DesignError, ParseError, ShapeError


def as_seed_sequence(seed) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        return seed
    if isinstance(seed, np.random.Generator):
        raise TypeError("pass an integer seed or SeedSequence so child streams can be derived")
    if seed is None:
        raise ValueError("a seed is required")
    return np.random.SeedSequence(seed)


def child_seeds(seed, count: int) -> list:
    """The first ``count`` children of ``seed``.

    Unlike ``SeedSequence.spawn`` this does not advance the parent, so the
    same parent always yields the same children.
    """
    ss = as_seed_sequence(seed)
    return [np.random.SeedSequence(ss.entropy, spawn_key=tuple(ss.spawn_key) + (k,), pool_size=ss.pool_size)
            for k in range(count)]


@dataclass(frozen=True, eq=False)
class SplitVector:
    s: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.s)
        if s.ndim != 1 or not np.all((s == 0) | (s == 1)):
            raise ShapeError("a split must be a 0/1 vector")
        s = s.astype(np.int8)
        s.setflags(write=False)
        object.__setattr__(self, "s", s)
        if self.n_V < 1 or self.n_T < 1:
            raise DesignError(f"split needs n_T >= 1 and n_V >= 1 (got n_T={self.n_T}, n_V={self.n_V})")

    @classmethod
    def from_valid(cls, n: int, valid_idx) -> "SplitVector":
        s = np.zeros(n, dtype=np.int8)
        s[np.asarray(valid_idx, dtype=int)] = 1
        return cls(s)

    @property
    def n(self) -> int:
        return len(self.s)

    @property
    def n_V(self) -> int:
        return int(self.s.sum())

    @property
    def n_T(self) -> int:
        return self.n - self.n_V

    @property
    def train_idx(self) -> np.ndarray:
        return np.flatnonzero(self.s == 0)

    @property
    def valid_idx(self) -> np.ndarray:
        return np.flatnonzero(self.s == 1)

    def __eq__(self, other):
        return isinstance(other, SplitVector) and np.array_equal(self.s, other.s)

    def __hash__(self):
        return hash(self.s.tobytes())

    def __repr__(self):
        return f"SplitVector(n={self.n}, valid={self.valid_idx.tolist()})"


# ------------------------------------------------------------------ designs


def quadrant_labels(coords, x_cut: float = 0.5, y_cut: float = 0.5) -> np.ndarray:
    """Stratum labels for axis-aligned quadrants.

    1 = lower-left, 2 = lower-right, 3 = upper-left, 4 = upper-right.
    """
    coords = np.asarray(coords, dtype=float)
    right = coords[:, 0] >= x_cut
    upper = coords[:, 1] >= y_cut
    return 1 + right.astype(int) + 2 * upper.astype(int)


def rectangle_labels(coords, rectangles: Sequence[Sequence[float]]) -> np.ndarray:
    """Label each site by the first ``(xmin, xmax, ymin, ymax)`` rectangle containing it."""
    coords = np.asarray(coords, dtype=float)
    labels = np.zeros(len(coords), dtype=int)
    for k, (x0, x1, y0, y1) in enumerate(rectangles, start=1):
        inside = (coords[:, 0] >= x0) & (coords[:, 0] <= x1) & (coords[:, 1] >= y0) & (coords[:, 1] <= y1)
        labels[(labels == 0) & inside] = k
    if np.any(labels == 0):
        raise DesignError(f"sites {np.flatnonzero(labels == 0).tolist()} fall outside every rectangle")
    return labels


def proportional_allocation(sizes: Sequence[int], n_valid: int) -> list[int]:
    """Split ``n_valid`` across strata proportionally to ``sizes``.

    Largest-remainder rounding with at least one validation site per stratum.
    """
    sizes = [int(s) for s in sizes]
    if n_valid < len(sizes):
        raise DesignError(f"n_V={n_valid} too small for {len(sizes)} strata")
    total = sum(sizes)
    quotas = [Fraction(n_valid * s, total) for s in sizes]
    alloc = [max(1, math.floor(q)) for q in quotas]
    while sum(alloc) < n_valid:
        rema = [(q - a, -k) for k, (q, a) in enumerate(zip(quotas, alloc))]
        k = -max(rema)[1]
        alloc[k] += 1
    while sum(alloc) > n_valid:
        cands = [k for k, a in enumerate(alloc) if a > 1]
        k = min(cands, key=lambda k: (quotas[k] - alloc[k], k))
        alloc[k] -= 1
    return alloc


@dataclass(frozen=True, eq=False)
class StratifiedDesign:
    """Strata membership and per-stratum validation counts."""

    labels: np.ndarray
    n_valid: tuple

    def __post_init__(self):
        labels = np.asarray(self.labels).astype(int)
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)
        strata = np.unique(labels)
        nv = tuple(int(v) for v in self.n_valid)
        object.__setattr__(self, "n_valid", nv)
        if len(nv) != len(strata):
            raise DesignError(f"{len(strata)} strata but {len(nv)} validation counts")
        for k, lab in enumerate(strata):
            nk = int(np.sum(labels == lab))
            if nv[k] < 1:
                raise DesignError(f"stratum {lab} needs at least one validation site")
            if nv[k] >= nk:
                raise DesignError(f"stratum {lab} has n_k={nk} sites but n_Vk={nv[k]}; training set would be empty")

    @classmethod
    def proportional(cls, labels, n_valid_total: int) -> "StratifiedDesign":
        labels = np.asarray(labels).astype(int)
        sizes = [int(np.sum(labels == lab)) for lab in np.unique(labels)]
        return cls(labels, tuple(proportional_allocation(sizes, n_valid_total)))

    @property
    def strata(self) -> list[int]:
        return [int(v) for v in np.unique(self.labels)]

    @property
    def K(self) -> int:
        return len(self.n_valid)

    @property
    def n(self) -> int:
        return len(self.labels)

    @property
    def members(self) -> list[np.ndarray]:
        return [np.flatnonzero(self.labels == lab) for lab in self.strata]

    @property
    def sizes(self) -> list[int]:
        return [len(m) for m in self.members]

    @property
    def n_train(self) -> list[int]:
        return [nk - nv for nk, nv in zip(self.sizes, self.n_valid)]

    @property
    def n_V(self) -> int:
        return sum(self.n_valid)

    @property
    def n_T(self) -> int:
        return self.n - self.n_V

    @property
    def weight_fractions(self) -> list[Fraction]:
        return [Fraction(v, self.n_V) for v in self.n_valid]

    @property
    def weights(self) -> list[float]:
        return [float(w) for w in self.weight_fractions]

    @property
    def f_V(self) -> float:
        return self.n_V / self.n

    @property
    def f_T(self) -> list[float]:
        return [t / nk for t, nk in zip(self.n_train, self.sizes)]

    @property
    def f_Vk(self) -> list[float]:
        return [v / nk for v, nk in zip(self.n_valid, self.sizes)]

    def table(self) -> list[dict]:
        return [
            {"stratum": lab, "n_k": nk, "n_Tk": nt, "n_Vk": nv, "w_k": w}
            for lab, nk, nt, nv, w in zip(self.strata, self.sizes, self.n_train, self.n_valid, self.weights)
        ]

    def describe(self) -> dict:
        return {"kind": "stratified", "strata": self.strata, "n_k": self.sizes, "n_Vk": list(self.n_valid)}

    def counts(self, split: SplitVector) -> list[int]:
        return [int(split.s[m].sum()) for m in self.members]

    def conforms(self, split: SplitVector) -> bool:
        return split.n == self.n and self.counts(split) == list(self.n_valid)


# ------------------------------------------------------------------ samplers


def _partial_fisher_yates(pool: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    pool = np.array(pool, copy=True)
    m = len(pool)
    for i in range(k):
        j = int(rng.integers(i, m))
        pool[i], pool[j] = pool[j], pool[i]
    return pool[:k]


def sample_uniform_split(n: int, n_V: int, rng: np.random.Generator) -> SplitVector:
    """Uniform draw over splits of ``n`` sites with exactly ``n_V`` validation sites."""
    if not 1 <= n_V < n:
        raise DesignError(f"need 1 <= n_V < n, got n_V={n_V}, n={n}")
    return SplitVector.from_valid(n, _partial_fisher_yates(np.arange(n), n_V, rng))


def sample_stratified_split(design: StratifiedDesign, rng: np.random.Generator) -> SplitVector:
    """Independent uniform subsets of size ``n_Vk`` within every stratum."""
    chosen = [_partial_fisher_yates(m, nv, rng) for m, nv in zip(design.members, design.n_valid)]
    return SplitVector.from_valid(design.n, np.concatenate(chosen))


def split_log_prior(split: SplitVector, design: Optional[StratifiedDesign] = None) -> float:
    if design is None:
        return -math.log(math.comb(split.n, split.n_V))
    if not design.conforms(split):
        return -math.inf
    return -sum(math.log(math.comb(nk, nt)) for nk, nt in zip(design.sizes, design.n_train))


def enumerate_splits(n: int, n_V: int) -> Iterator[SplitVector]:
    for valid in itertools.combinations(range(n), n_V):
        yield SplitVector.from_valid(n, valid)


def enumerate_stratified_splits(design: StratifiedDesign) -> Iterator[SplitVector]:
    per = [itertools.combinations(m.tolist(), nv) for m, nv in zip(design.members, design.n_valid)]
    for combo in itertools.product(*[list(p) for p in per]):
        yield SplitVector.from_valid(design.n, [i for part in combo for i in part])


# ------------------------------------------------------------------ batches


@dataclass
class SplitBatch:
    splits: list
    seed: Optional[int] = None
    design: Optional[StratifiedDesign] = None
    descriptor: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.splits:
            raise DesignError("a split batch needs at least one split")
        n = self.splits[0].n
        nv = self.splits[0].n_V
        for i, s in enumerate(self.splits):
            if s.n != n or s.n_V != nv:
                raise DesignError(f"split {i} has (n, n_V)=({s.n}, {s.n_V}); expected ({n}, {nv})")
            if self.design is not None and not self.design.conforms(s):
                raise DesignError(f"split {i} does not match the stratified design counts")

    def __len__(self):
        return len(self.splits)

    def __iter__(self):
        return iter(self.splits)

    def __getitem__(self, i):
        return self.splits[i]

    @property
    def n(self) -> int:
        return self.splits[0].n

    @property
    def n_V(self) -> int:
        return self.splits[0].n_V

    @property
    def n_T(self) -> int:
        return self.n - self.n_V

    def valid_matrix(self, design: Optional[StratifiedDesign] = None) -> np.ndarray:
        """``(I, n_V)`` validation indices; grouped by stratum when a design is given."""
        design = design if design is not None else self.design
        if design is None:
            return np.stack([s.valid_idx for s in self.splits])
        rows = []
        for s in self.splits:
            v = s.valid_idx
            lab = design.labels[v]
            rows.append(v[np.lexsort((v, lab))])
        return np.stack(rows)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["split"] + [f"s{l + 1}" for l in range(self.n)])
        for i, s in enumerate(self.splits):
            w.writerow([i + 1] + s.s.tolist())
        return buf.getvalue()

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_csv(), encoding="utf-8")
        return path

    @classmethod
    def read_csv(cls, path, design: Optional[StratifiedDesign] = None) -> "SplitBatch":
        path = Path(path)
        with path.open(newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        if not rows or rows[0][0] != "split":
            raise ParseError("split file must start with a 'split,s1,...' header", row=1)
        n = len(rows[0]) - 1
        splits = []
        for r, raw in enumerate(rows[1:], start=2):
            if len(raw) != n + 1:
                raise ParseError(f"expected {n + 1} fields, found {len(raw)}", row=r)
            try:
                s = np.array([int(v) for v in raw[1:]])
            except ValueError:
                raise ParseError("split entries must be 0 or 1", row=r) from None
            try:
                splits.append(SplitVector(s))
            except (ShapeError, DesignError) as exc:
                raise ParseError(str(exc), row=r) from None
        return cls(splits, design=design, descriptor={"source": str(path)})


def sample_split_batch(I: int, seed, n: Optional[int] = None, n_V: Optional[int] = None,
                       design: Optional[StratifiedDesign] = None) -> SplitBatch:
    """Draw ``I`` independent splits; each uses its own derived seed stream."""
    if I < 1:
        raise DesignError("need at least one split")
    ss = as_seed_sequence(seed)
    children = child_seeds(ss, I)
    if design is None:
        if n is None or n_V is None:
            raise DesignError("uniform splits need n and n_V")
        splits = [sample_uniform_split(n, n_V, np.random.default_rng(c)) for c in children]
        desc = {"kind": "uniform", "n": n, "n_V": n_V}
    else:
        splits = [sample_stratified_split(design, np.random.default_rng(c)) for c in children]
        desc = design.describe()
    return SplitBatch(splits, seed=seed if isinstance(seed, int) else None, design=design, descriptor=desc)
