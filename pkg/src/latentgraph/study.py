"""Replicated simulate -> predict -> estimate -> test pipelines.

Every replicate draws from its own stream ``(seed, grid index, q index,
replicate)``, so results do not depend on how replicates are spread over
worker processes.
"""

from __future__ import annotations

import copy
import csv
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .covest import (BlockPartition, arrange, conditional_residuals, conditional_scatter,
                     gaussian_approx_ml, predict_random_components, sample_covariance)
from .dispersion import MglmmSpec, simulate_mglmm
from .elliptical import EllipticalSpec, SpecError, make_rng, sample_elliptical
from .gtests import estimate_kappa, elliptical_test, gaussian_exact_test, ks_uniform_test
from .plotting import power_plot

METHODS = ("gaussian", "elliptical")


@dataclass(frozen=True)
class Hypothesis:
    """Tested coordinates (0-based, in block order), block sizes and conditioning set."""

    coords: tuple
    sizes: tuple
    cond: tuple = ()

    def __post_init__(self):
        if sum(self.sizes) != len(self.coords):
            raise SpecError("block sizes must add up to the number of tested coordinates")
        if set(self.coords) & set(self.cond):
            raise SpecError("tested and conditioning coordinates overlap")

    @property
    def partition(self):
        return BlockPartition(self.sizes, len(self.cond))

    @classmethod
    def parse(cls, coords, sizes, condition, dim):
        """``coords`` 1-based; ``condition`` is "rest", "none" or 1-based indices."""
        coords = [int(c) - 1 for c in coords]
        if any(c < 0 or c >= dim for c in coords):
            raise SpecError(f"tested coordinates must lie in 1..{dim}")
        if sizes is None:
            sizes = [1] * len(coords)
        if condition in (None, "rest"):
            cond = [k for k in range(dim) if k not in coords]
        elif condition == "none":
            cond = []
        else:
            if isinstance(condition, str):
                condition = [c for c in condition.split(",") if c.strip()]
            cond = [int(c) - 1 for c in condition]
            if any(c < 0 or c >= dim for c in cond):
                raise SpecError(f"conditioning coordinates must lie in 1..{dim}")
        return cls(tuple(coords), tuple(int(s) for s in sizes), tuple(cond))


def run_tests(rows, hyp: Hypothesis, methods=METHODS, divisor="q-1", sigma=None, engine="mc"):
    """Apply the requested tests to ``rows`` (q x d) or to a supplied covariance.

    The kurtosis estimate for the elliptical test is computed from the
    residuals of the tested coordinates given the conditioning ones.
    """
    rows = np.asarray(rows, dtype=float)
    q = rows.shape[0]
    part = hyp.partition
    if sigma is None:
        sigma = sample_covariance(rows, divisor)
    arranged = arrange(sigma, hyp.coords, hyp.cond)
    out = {}
    for method in methods:
        if method == "gaussian":
            out[method] = gaussian_exact_test(arranged, part, q, engine)
        elif method == "elliptical":
            a_cond = conditional_scatter(arranged, part)
            resid = conditional_residuals(rows[:, list(hyp.coords) + list(hyp.cond)], part)
            kappa = max(estimate_kappa(resid, sample_covariance(resid, "q")), -0.99)
            out[method] = elliptical_test(a_cond, part, q, kappa)
        else:
            raise SpecError(f"unknown method {method!r}")
    return out


@dataclass
class StudyConfig:
    hypothesis: Hypothesis
    model: MglmmSpec | None = None
    elliptical: EllipticalSpec | None = None
    grid_entry: tuple | None = None
    grid: tuple = (None,)
    q_schedule: tuple = (200,)
    n_sims: int = 200
    alpha: float = 0.05
    seed: int = 0
    methods: tuple = METHODS
    estimator: str = "sample"
    divisor: str = "q-1"
    label: str = ""
    raw: dict = field(default_factory=dict, repr=False)

    @classmethod
    def from_dict(cls, obj, seed=None):
        obj = copy.deepcopy(obj)
        if ("model" in obj) == ("elliptical" in obj):
            raise SpecError("config needs exactly one of 'model' or 'elliptical'")
        q_schedule = tuple(int(q) for q in obj.get("q_schedule", [obj.get("model", {}).get("q", 200)]))
        if not q_schedule or min(q_schedule) < 2:
            raise SpecError("q_schedule needs cluster counts >= 2")
        model = ell = None
        if "model" in obj:
            obj["model"].setdefault("q", q_schedule[0])
            model = MglmmSpec.from_dict(obj["model"])
            dim = model.dim
        else:
            ell = EllipticalSpec.from_dict(obj["elliptical"])
            dim = ell.dim
        h = obj.get("hypothesis", {})
        hyp = Hypothesis.parse(h.get("coords", [1, 2]), h.get("blocks"), h.get("condition", "rest"), dim)
        grid = obj.get("grid")
        entry, values = None, (None,)
        if grid is not None:
            entry = tuple(int(i) - 1 for i in grid["entry"])
            if len(entry) != 2 or entry[0] == entry[1] or max(entry) >= dim or min(entry) < 0:
                raise SpecError("grid entry must name two distinct coordinates")
            values = tuple(float(v) for v in grid["values"])
        n_sims = int(obj.get("n_sims", 200))
        if n_sims < 1:
            raise SpecError("n_sims must be at least 1")
        methods = tuple(obj.get("methods", METHODS))
        for m in methods:
            if m not in METHODS:
                raise SpecError(f"unknown method {m!r}")
        estimator = obj.get("estimator", "sample")
        if estimator not in ("sample", "ml-gaussian"):
            raise SpecError("estimator must be 'sample' or 'ml-gaussian'")
        cfg = cls(hyp, model, ell, entry, values, q_schedule, n_sims, float(obj.get("alpha", 0.05)),
                  int(obj.get("seed", 0) if seed is None else seed), methods, estimator,
                  obj.get("divisor", "q-1"), obj.get("label", ""), obj)
        for v in values:
            cfg.law(v)  # reject non-PD grid points up front
        return cfg

    def law(self, value):
        base = self.model.random_components if self.model is not None else self.elliptical
        if value is None:
            return base
        raw = self.raw["model"]["random_components"] if self.model is not None else self.raw["elliptical"]
        key = "scatter" if "scatter" in raw else "covariance"
        mat = np.array(raw[key], dtype=float)
        i, j = self.grid_entry
        mat[i, j] = mat[j, i] = value
        obj = dict(raw, **{key: mat.tolist()})
        try:
            return EllipticalSpec.from_dict(obj)
        except SpecError as exc:
            raise SpecError(f"grid value {value}: {exc}") from None


def run_replicate(cfg: StudyConfig, gi, qi, rep):
    """P-values of each method for one simulated data set."""
    value, q = cfg.grid[gi], cfg.q_schedule[qi]
    law = cfg.law(value)
    stream = (gi, qi, rep)
    if cfg.model is not None:
        spec = MglmmSpec(cfg.model.margins, q, cfg.model.replicates, law)
        data, _ = simulate_mglmm(spec, cfg.seed, stream)
        preds = predict_random_components(data, spec.margins)
        rows = preds.bhat
        sigma = None
        if cfg.estimator == "ml-gaussian":
            sigma = gaussian_approx_ml(preds).matrix
    else:
        rows = sample_elliptical(law, q, make_rng(cfg.seed, *stream))
        sigma = None
    res = run_tests(rows, cfg.hypothesis, cfg.methods, cfg.divisor, sigma)
    return {m: res[m].pvalue for m in cfg.methods}


def _run_chunk(args):
    cfg, tasks = args
    return [run_replicate(cfg, *t) for t in tasks]


def run_study(cfg: StudyConfig, threads=1):
    """Return a list of per-replicate records ``(value, q, method, rep, pvalue)``."""
    tasks = [(gi, qi, rep) for gi in range(len(cfg.grid)) for qi in range(len(cfg.q_schedule))
             for rep in range(cfg.n_sims)]
    if threads <= 1:
        results = [run_replicate(cfg, *t) for t in tasks]
    else:
        size = max(1, len(tasks) // (threads * 4))
        chunks = [tasks[i:i + size] for i in range(0, len(tasks), size)]
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = [r for part in pool.map(_run_chunk, [(cfg, c) for c in chunks]) for r in part]
    records = []
    for (gi, qi, rep), res in zip(tasks, results):
        for m in cfg.methods:
            records.append((cfg.grid[gi], cfg.q_schedule[qi], m, rep, res[m]))
    return records


def summarise(cfg: StudyConfig, records):
    """Rejection rate and KS uniformity per (grid value, q, method)."""
    groups = {}
    for value, q, m, _, p in records:
        groups.setdefault((value, q, m), []).append(p)
    rows = []
    for gi, value in enumerate(cfg.grid):
        for q in cfg.q_schedule:
            for m in cfg.methods:
                p = np.array(groups[(value, q, m)])
                rej = int(np.sum(p < cfg.alpha))
                ks_d, ks_p = ks_uniform_test(p) if p.size >= 5 else (None, None)
                rows.append({"grid_value": value, "q": q, "method": m, "n_sims": int(p.size),
                             "rejections": rej, "rejection_rate": rej / p.size, "ks_D": ks_d, "ks_p": ks_p})
    return rows


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_outputs(cfg: StudyConfig, records, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = summarise(cfg, records)
    cols = ["grid_value", "q", "method", "n_sims", "rejections", "rejection_rate", "ks_D", "ks_p"]
    with open(out / "power.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in cols])
    with open(out / "pvalues.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["grid_value", "q", "method", "replicate", "pvalue"])
        for value, q, m, rep, p in records:
            w.writerow([_fmt(value), q, m, rep + 1, repr(float(p))])
    series = {}
    by_q = len(cfg.grid) == 1 and len(cfg.q_schedule) > 1
    tag = f"{cfg.label} " if cfg.label else ""
    for r in rows:
        if by_q:
            key, x = f"{tag}{r['method']}", r["q"]
        else:
            key = f"{tag}{r['method']}" + (f" q={r['q']}" if len(cfg.q_schedule) > 1 else "")
            x = r["grid_value"] if r["grid_value"] is not None else 0.0
        xs, ys = series.setdefault(key, ([], []))
        xs.append(x)
        ys.append(r["rejection_rate"])
    power_plot(series, out / "power.svg", xlabel="q" if by_q else "off-diagonal value", alpha=cfg.alpha)
    with open(out / "summary.json", "w") as fh:
        json.dump(rows, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return rows
