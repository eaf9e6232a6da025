"""Replicated power studies for the simple and composite simulation models.

Simple model:     Y = c x^2 / 2 + f0(x) + e,           f0(x) = 5 (x^2 - x + 1/6)
Composite model:  Y = 5 x + c (x^2 - x + 1/6) + e

with ``X ~ Unif(0, 1)`` and ``e ~ N(0, 1)``. Procedures:

* ``S1``: second-order statistic at the separation-minimising bandwidth;
* ``S2``: likelihood-ratio statistic against ``f0`` at the same bandwidth;
* ``S3`` / ``S4``: as ``S1`` / ``S2`` with the GCV bandwidth of each dataset;
* ``C1``: composite statistic at the composite separation-minimising bandwidth;
* ``C2``: likelihood-ratio statistic against the fitted line at the GCV bandwidth.

Every cutoff is calibrated by Monte Carlo conditional on the design.
"""

from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import bounds as bd
from . import eigenbasis as eb
from . import rng
from . import testing as tst
from .errors import DegenerateDesignError, IllPosedError, InvalidArgumentError
from .spline import Dataset

SIMPLE = "simple"
COMPOSITE = "composite"
SIMPLE_PROCEDURES = ("S1", "S2", "S3", "S4")
COMPOSITE_PROCEDURES = ("C1", "C2")
MAX_RETRIES = 3


def f0(x):
    """Null function of the simple model; it integrates to zero on [0, 1]."""
    x = np.asarray(x, dtype=float)
    return 5.0 * (x**2 - x + 1.0 / 6.0)


def _key(seed) -> tuple:
    return tuple(seed) if isinstance(seed, (tuple, list)) else (seed,)


def _draw(n: int, seed) -> Tuple[np.ndarray, np.ndarray]:
    if int(n) != n or n < 2:
        raise InvalidArgumentError(f"n must be an integer >= 2, got {n!r}")
    key = _key(seed)
    x = rng.uniforms(rng.stream(*key, "x"), int(n))
    e = rng.normals(rng.stream(*key, "eps"), int(n))
    return x, e


def gen_simple(n: int, c: float, seed) -> Dataset:
    """``Y = c X^2 / 2 + f0(X) + e`` with design and noise from independent streams."""
    x, e = _draw(n, seed)
    return Dataset(x, 0.5 * c * x**2 + f0(x) + e)


def gen_composite(n: int, c: float, seed) -> Dataset:
    """``Y = 5 X + c (X^2 - X + 1/6) + e``; the quadratic part is orthogonal to lines."""
    x, e = _draw(n, seed)
    return Dataset(x, 5.0 * x + c * (x**2 - x + 1.0 / 6.0) + e)


# ---------------------------------------------------------------------------
# configuration and results
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StudyConfig:
    hypothesis: str = SIMPLE
    n_list: Tuple[int, ...] = (50, 100, 200, 300, 400)
    c_list: Tuple[float, ...] = (0.0, 1.0, 2.0, 3.0)
    replicates: int = 500
    alpha: float = 0.05
    beta: float = 0.05
    procedures: Optional[Tuple[str, ...]] = None
    N_mc: int = tst.DEFAULT_N_MC
    base_seed: int = 20240101
    m: int = 2
    N: Optional[int] = None
    c_0: float = 1.0
    gcv_h_min: float = 0.02
    gcv_h_max: float = 1.0
    gcv_points: int = 60
    h_fs_terms: str = bd.LEADING

    def __post_init__(self):
        if self.hypothesis not in (SIMPLE, COMPOSITE):
            raise InvalidArgumentError(f"hypothesis must be 'simple' or 'composite', got {self.hypothesis!r}")
        allowed = SIMPLE_PROCEDURES if self.hypothesis == SIMPLE else COMPOSITE_PROCEDURES
        procs = allowed if self.procedures is None else tuple(self.procedures)
        if not procs:
            raise InvalidArgumentError("at least one procedure is required")
        bad = [p for p in procs if p not in allowed]
        if bad:
            raise InvalidArgumentError(f"procedures {bad} do not belong to the {self.hypothesis} study")
        # canonical order so that the table layout does not depend on the input order
        object.__setattr__(self, "procedures", tuple(p for p in allowed if p in procs))
        n_list = tuple(int(n) for n in self.n_list)
        if not n_list or any(n < 8 for n in n_list):
            raise InvalidArgumentError("n_list must be nonempty with every n >= 8")
        object.__setattr__(self, "n_list", n_list)
        c_list = tuple(float(c) for c in self.c_list)
        if not c_list or not all(math.isfinite(c) for c in c_list):
            raise InvalidArgumentError("c_list must be nonempty and finite")
        object.__setattr__(self, "c_list", c_list)
        if int(self.replicates) != self.replicates or self.replicates < 1:
            raise InvalidArgumentError("replicates must be a positive integer")
        if int(self.N_mc) != self.N_mc or self.N_mc < 100:
            raise InvalidArgumentError("N_mc must be an integer >= 100")
        bd.ErrorBudget(self.alpha, self.beta)  # validates the levels
        if int(self.m) != self.m or self.m < 1:
            raise InvalidArgumentError("m must be a positive integer")
        if not 0 < self.gcv_h_min < self.gcv_h_max:
            raise InvalidArgumentError("need 0 < gcv_h_min < gcv_h_max")
        if self.h_fs_terms not in (bd.FULL, bd.LEADING):
            raise InvalidArgumentError("h_fs_terms must be 'full' or 'leading'")

    @property
    def regime(self) -> str:
        return bd.SECOND_ORDER if self.hypothesis == SIMPLE else bd.COMPOSITE

    def lambda_grid(self) -> np.ndarray:
        return tst.default_lambda_grid(self.m, self.gcv_points, self.gcv_h_min, self.gcv_h_max)

    def as_dict(self) -> Dict[str, object]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class StudyTable:
    hypothesis: str
    procedures: Tuple[str, ...]
    rows: List[Dict[str, float]]
    metadata: Dict[str, object] = field(default_factory=dict)

    @property
    def h_column(self) -> str:
        return "h_fs" if self.hypothesis == SIMPLE else "h_fs_com"

    @property
    def header(self) -> List[str]:
        return ["n", "c", self.h_column, "h_gcv_mean", "h_gcv_sd"] + [f"rp_{p.lower()}" for p in self.procedures]

    def row(self, n: int, c: float) -> Dict[str, float]:
        for r in self.rows:
            if r["n"] == n and r["c"] == float(c):
                return r
        raise KeyError((n, c))

    def rp(self, procedure: str, n: int, c: float) -> float:
        return self.row(n, c)[f"rp_{procedure.lower()}"]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.header)
            for r in self.rows:
                w.writerow([_fmt(r[h]) for h in self.header])

    def write_metadata(self, path) -> None:
        with open(path, "w") as fh:
            for key in sorted(self.metadata):
                fh.write(f"{key} = {_fmt_meta(self.metadata[key])}\n")


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    return "nan" if math.isnan(v) else f"{v:.17g}"


def _fmt_meta(v) -> str:
    if isinstance(v, (tuple, list)):
        return "[" + ", ".join(_fmt_meta(u) for u in v) + "]"
    if isinstance(v, float):
        return f"{v:.17g}"
    if v is None:
        return "null"
    return str(v)


def read_study_csv(path) -> List[Dict[str, float]]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return [{k: (int(v) if k == "n" else float(v)) for k, v in row.items()} for row in reader]


# ---------------------------------------------------------------------------
# replicate evaluation
# ---------------------------------------------------------------------------

_SIMPLE_SPECS = {
    # procedure: (statistic, bandwidth source)
    "S1": (tst.SECOND, "fs"),
    "S2": (tst.PLRT, "fs"),
    "S3": (tst.SECOND, "gcv"),
    "S4": (tst.PLRT, "gcv"),
}
_COMPOSITE_SPECS = {"C1": (tst.COMPOSITE, "fs"), "C2": (tst.PLRT, "gcv")}


def design_free_h_fs(config: StudyConfig, n: int) -> float:
    """Separation-minimising bandwidth for sample size ``n``.

    The separation function does not involve the data; its kernel constants are
    taken from the spline basis of the equispaced design of size ``n``. By
    default the remainder-free separation is minimised: with the explicit
    remainders the minimiser is governed by the concentration constants alone
    (they exceed the leading term by several orders of magnitude at these
    sample sizes).
    """
    x = (np.arange(n) + 0.5) / n
    sys = eb.build_empirical_basis(x, config.m, N=config.N)
    budget = bd.ErrorBudget(config.alpha, config.beta, config.regime)
    return bd.select_h_fs(budget, n, sys, config.regime, c_0=config.c_0, terms=config.h_fs_terms).argmin_h


@dataclass(frozen=True)
class ReplicateOutcome:
    rejects: Dict[str, bool]
    h_gcv: Optional[float]
    attempts: int


def run_replicate(config: StudyConfig, n: int, c: float, rep: int, h_fs: float) -> Optional[ReplicateOutcome]:
    """One dataset and every configured procedure; ``None`` if all retries fail."""
    gen = gen_simple if config.hypothesis == SIMPLE else gen_composite
    specs = _SIMPLE_SPECS if config.hypothesis == SIMPLE else _COMPOSITE_SPECS
    null = tst.NullModel.simple(f0) if config.hypothesis == SIMPLE else tst.NullModel.linear()
    budget = bd.ErrorBudget(config.alpha, config.beta, config.regime)
    for attempt in range(MAX_RETRIES + 1):
        key = (config.base_seed, n, float(c), rep) + (("retry", attempt) if attempt else ())
        try:
            data = gen(n, c, key)
            sys = eb.build_empirical_basis(data.x, config.m, N=config.N)
            h_gcv = None
            rejects = {}
            for proc in config.procedures:
                kind, source = specs[proc]
                if source == "gcv" and h_gcv is None:
                    h_gcv, _ = tst.select_h(data, kind, budget, "gcv", sys, lambda_grid=config.lambda_grid())
                h_value = h_fs if source == "fs" else h_gcv
                res = tst.run_test(
                    data,
                    null,
                    kind,
                    budget,
                    h_source="fs" if source == "fs" else h_value,
                    sys=sys,
                    N_mc=config.N_mc,
                    seed=key + (source,),
                    c_0=config.c_0,
                    h_fs=h_fs,
                )
                rejects[proc] = bool(res.reject)
            return ReplicateOutcome(rejects, h_gcv, attempt + 1)
        except (DegenerateDesignError, IllPosedError):
            continue
    return None


def resolve_threads(threads: Optional[int] = None) -> int:
    if threads is None:
        env = os.environ.get("NPTEST_THREADS")
        if env:
            try:
                threads = int(env)
            except ValueError:
                raise InvalidArgumentError(f"NPTEST_THREADS must be an integer, got {env!r}") from None
        else:
            threads = os.cpu_count() or 1
    if threads < 1:
        raise InvalidArgumentError("threads must be positive")
    return int(threads)


def run_study(config: StudyConfig, threads: Optional[int] = None, progress: Optional[Callable[[int, int], None]] = None) -> StudyTable:
    """Rejection proportions over ``n_list x c_list``.

    Replicates run on a thread pool; results are gathered by index, so the table
    does not depend on the number of threads.
    """
    threads = resolve_threads(threads)
    h_fs = {n: design_free_h_fs(config, n) for n in config.n_list}
    cells = [(n, c) for n in config.n_list for c in config.c_list]
    tasks = [(n, c, r) for (n, c) in cells for r in range(config.replicates)]
    outcomes: List[Optional[ReplicateOutcome]] = [None] * len(tasks)

    def work(i):
        n, c, r = tasks[i]
        return i, run_replicate(config, n, c, r, h_fs[n])

    done = 0
    if threads == 1:
        results = map(work, range(len(tasks)))
        for i, out in results:
            outcomes[i] = out
            done += 1
            if progress:
                progress(done, len(tasks))
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            for i, out in pool.map(work, range(len(tasks))):
                outcomes[i] = out
                done += 1
                if progress:
                    progress(done, len(tasks))

    rows = []
    missing = {}
    retried = 0
    for n, c in cells:
        outs = [outcomes[j] for j, t in enumerate(tasks) if t[0] == n and t[1] == c]
        valid = [o for o in outs if o is not None]
        retried += sum(1 for o in valid if o.attempts > 1)
        missing[f"{n}:{c:g}"] = len(outs) - len(valid)
        row = {"n": n, "c": c}
        row["h_fs" if config.hypothesis == SIMPLE else "h_fs_com"] = h_fs[n]
        hg = np.array([o.h_gcv for o in valid if o.h_gcv is not None], dtype=float)
        row["h_gcv_mean"] = float(hg.mean()) if hg.size else math.nan
        row["h_gcv_sd"] = float(hg.std(ddof=1)) if hg.size > 1 else math.nan
        for p in config.procedures:
            row[f"rp_{p.lower()}"] = float(np.mean([o.rejects[p] for o in valid])) if valid else math.nan
        rows.append(row)

    meta = {f"config.{k}": v for k, v in config.as_dict().items()}
    meta["missing_replicates_total"] = int(sum(missing.values()))
    meta["missing_replicates_by_cell"] = ", ".join(f"{k}={v}" for k, v in missing.items())
    meta["retried_replicates"] = retried
    meta["calibration"] = tst.MONTE_CARLO
    meta["basis"] = eb.EMPIRICAL
    return StudyTable(config.hypothesis, config.procedures, rows, meta)
