"""Command-line front end.

Exit codes: 0 success, 2 usage or configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import graphs
from .covest import (BlockPartition, EstimationError, PredictionSet, arrange, conditional_residuals,
                     conditional_scatter, elliptical_approx_ml, gaussian_approx_ml,
                     predict_random_components, sample_covariance)
from .dispersion import LongDataset, MglmmSpec, simulate_mglmm
from .elliptical import EllipticalSpec, SpecError
from .gtests import (CORRECTIONS, SeriesError, elliptical_test, estimate_kappa, gaussian_exact_test,
                     ks_uniform_test, pairwise_edge_tests)
from .plotting import qq_plot
from .study import Hypothesis, StudyConfig, run_study, write_outputs

EXIT_USAGE = 2
EXIT_NUMERIC = 3


class UsageError(Exception):
    pass


def _load_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read JSON from {path}: {exc}") from None


def _dump_json(obj, path=None):
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def _seed(args):
    if args.seed is not None:
        return args.seed
    env = os.environ.get("LATENTGRAPH_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"LATENTGRAPH_SEED must be an integer, got {env!r}") from None
    return 0


def _int_list(text, name):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"--{name} expects comma-separated integers, got {text!r}") from None


def _read_covariates(path):
    if path is None:
        return None
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    return np.array([[float(v) for v in r] for r in rows[1:]], dtype=float)


def _read_rows(path):
    """Numeric rows from a predictions CSV (b columns) or a plain headed CSV."""
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if not rows:
        raise UsageError(f"{path} is empty")
    if rows[0][0] == "cluster":
        return PredictionSet.read_csv(path).bhat
    try:
        return np.array([[float(v) for v in r] for r in rows[1:]], dtype=float)
    except ValueError:
        raise UsageError(f"{path}: non-numeric data") from None


def cov_document(matrix, q, divisor, labels=None, extra=None):
    d = matrix.shape[0]
    doc = {"dim": d, "q": int(q), "labels": labels or [graphs.latent_label(j) for j in range(d)],
           "matrix": np.asarray(matrix).tolist(), "divisor": divisor}
    if extra:
        doc.update(extra)
    return doc


def _read_cov(path):
    doc = _load_json(path)
    try:
        m = np.array(doc["matrix"], dtype=float)
        return m, int(doc["q"]), doc.get("labels")
    except (KeyError, TypeError, ValueError) as exc:
        raise UsageError(f"{path}: malformed covariance document ({exc})") from None


# ---------------------------------------------------------------------------
# commands

def cmd_simulate(args):
    spec = MglmmSpec.from_dict(_load_json(args.spec), _read_covariates(args.covariates))
    data, b = simulate_mglmm(spec, _seed(args))
    data.write_csv(args.out)
    truth = args.truth or str(Path(args.out).with_suffix("")) + "_truth.csv"
    with open(truth, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cluster"] + [f"b{j + 1}" for j in range(spec.dim)])
        for c, row in enumerate(b):
            w.writerow([c + 1] + [repr(float(v)) for v in row])


def _predict(args):
    if args.spec is None:
        raise UsageError("--spec is required to predict from long data")
    spec_obj = _load_json(args.spec)
    spec_obj.setdefault("q", 2)
    spec = MglmmSpec.from_dict(spec_obj)
    data = LongDataset.read_csv(args.data)
    return predict_random_components(data, spec.margins)


def cmd_predict(args):
    _predict(args).write_csv(args.out)


def cmd_estimate_cov(args):
    if (args.data is None) == (args.preds is None):
        raise UsageError("give exactly one of --data or --preds")
    preds = _predict(args) if args.data is not None else PredictionSet.read_csv(args.preds)
    extra = {"method": args.method}
    if args.method == "sample":
        matrix, divisor = sample_covariance(preds.bhat, args.divisor), args.divisor
    elif args.method == "ml-gaussian":
        est = gaussian_approx_ml(preds)
        matrix, divisor = est.matrix, "ml"
        extra["loglik"] = est.loglik
    else:
        d = preds.dim
        if args.nodes**d >= 1_000_000:
            raise UsageError(f"grid too large: {args.nodes}^{d} quadrature points")
        family = EllipticalSpec(args.family, np.eye(d), args.nu)
        est = elliptical_approx_ml(preds, family, args.nodes)
        matrix, divisor = est.matrix, "ml"
        extra.update(loglik=est.loglik, family=args.family, nu=args.nu, nodes=args.nodes)
    _dump_json(cov_document(matrix, preds.q, divisor, extra=extra), args.out)


def _hypothesis(args, dim):
    sizes = _int_list(args.blocks, "blocks")
    coords = _int_list(args.coords, "coords") if args.coords else list(range(1, sum(sizes) + 1))
    return Hypothesis.parse(coords, sizes, args.condition, dim)


def cmd_test(args):
    sigma, q, _ = _read_cov(args.cov)
    q = args.q or q
    hyp = _hypothesis(args, sigma.shape[0])
    part = hyp.partition
    arranged = arrange(sigma, hyp.coords, hyp.cond)
    if args.method == "gaussian":
        res = gaussian_exact_test(arranged, part, q, args.engine)
    else:
        a_cond = conditional_scatter(arranged, part)
        if args.kappa is not None:
            kappa = args.kappa
        elif args.rows is not None:
            rows = _read_rows(args.rows)
            resid = conditional_residuals(rows[:, list(hyp.coords) + list(hyp.cond)], part)
            kappa = estimate_kappa(resid, sample_covariance(resid, "q"))
        else:
            raise UsageError("elliptical method needs --kappa or --rows")
        res = elliptical_test(a_cond, part, q, kappa)
    doc = res.to_dict()
    doc["coords"] = [c + 1 for c in hyp.coords]
    doc["condition"] = [c + 1 for c in hyp.cond]
    doc["q"] = q
    _dump_json(doc, args.out)


def cmd_graph(args):
    if args.fixture == "figure2":
        g = graphs.figure2_bcg()
        doc = {"fixture": "figure2"}
    elif args.cov is not None:
        sigma, q, labels = _read_cov(args.cov)
        if args.method == "elliptical" and args.kappa is None:
            raise UsageError("elliptical method needs --kappa")
        raw, adj, _ = pairwise_edge_tests(sigma, q, args.method, args.alpha, args.correction,
                                          args.kappa, args.engine)
        ug = graphs.build_ug(adj, args.alpha, labels)
        g = graphs.build_bcg([ug], sigma.shape[0]) if args.moral else ug
        doc = {"pvalues": raw.tolist(), "adjusted": adj.tolist(), "alpha": args.alpha,
               "correction": args.correction, "method": args.method}
    else:
        raise UsageError("give --cov or --fixture")
    if args.moral:
        g = graphs.moralize(g)
    doc["graph"] = g.to_dict()
    dot = graphs.export_dot(g)
    if args.dot:
        Path(args.dot).write_text(dot)
    _dump_json(doc, args.out)


def cmd_power_study(args):
    obj = _load_json(args.config)
    seed = _seed(args) if args.seed is not None or "seed" not in obj else None
    cfg = StudyConfig.from_dict(obj, seed=seed)
    records = run_study(cfg, args.threads)
    rows = write_outputs(cfg, records, args.out)
    for r in rows:
        print(f"{'-' if r['grid_value'] is None else r['grid_value']}\t{r['q']}\t{r['method']}\t{r['rejection_rate']:.4f}")


def _read_pvalues(path):
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if rows and rows[0]:
        try:
            float(rows[0][-1])
        except ValueError:
            rows = rows[1:]
    try:
        return np.array([float(r[-1]) for r in rows], dtype=float)
    except ValueError:
        raise UsageError(f"{path}: non-numeric p-value") from None


def cmd_uniformity(args):
    p = _read_pvalues(args.pvalues)
    if p.size < 5:
        raise UsageError(f"need at least 5 p-values, got {p.size}")
    try:
        d, pks = ks_uniform_test(p)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    _dump_json({"n": int(p.size), "D": d, "pvalue": pks}, args.out)
    if args.qq:
        label = args.label or Path(args.pvalues).stem
        qq_plot({label: p}, args.qq, ks={label: pks})


# ---------------------------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="RNG seed (falls back to $LATENTGRAPH_SEED)")
    common.add_argument("--threads", type=int, default=1, help="worker processes for replicated runs")

    parser = argparse.ArgumentParser(prog="latentgraph", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="simulate an MGLMM data set")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--truth", help="CSV for the latent random components (default <out>_truth.csv)")
    p.add_argument("--covariates", help="CSV covariate table, q*replicates rows")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("predict", parents=[common], help="predict random components from long data")
    p.add_argument("--data", required=True)
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("estimate-cov", parents=[common], help="estimate the random-component covariance")
    p.add_argument("--data")
    p.add_argument("--spec")
    p.add_argument("--preds")
    p.add_argument("--method", choices=["sample", "ml-gaussian", "ml-elliptical"], default="sample")
    p.add_argument("--divisor", choices=["q-1", "q"], default="q-1")
    p.add_argument("--family", choices=["gaussian", "t"], default="gaussian")
    p.add_argument("--nu", type=float)
    p.add_argument("--nodes", type=int, default=20)
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_estimate_cov)

    p = sub.add_parser("test", parents=[common], help="test (conditional) block un-correlation")
    p.add_argument("--cov", required=True)
    p.add_argument("--blocks", default="1,1", help='block sizes "d1,d2,..."')
    p.add_argument("--coords", help="1-based tested coordinates in block order")
    p.add_argument("--condition", default="rest", help='"rest", "none" or 1-based indices')
    p.add_argument("--method", choices=["gaussian", "elliptical"], default="gaussian")
    p.add_argument("--engine", choices=["mc", "series"], default="mc")
    p.add_argument("--kappa", type=float)
    p.add_argument("--rows", help="data rows or predictions CSV for the kurtosis estimate")
    p.add_argument("--q", type=int)
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_test)

    p = sub.add_parser("graph", parents=[common], help="pairwise edge induction and graph export")
    p.add_argument("--cov")
    p.add_argument("--fixture", choices=["figure2"])
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--correction", choices=CORRECTIONS, default="holm")
    p.add_argument("--method", choices=["gaussian", "elliptical"], default="gaussian")
    p.add_argument("--engine", choices=["mc", "series"], default="mc")
    p.add_argument("--kappa", type=float)
    p.add_argument("--moral", action="store_true", help="add responses and moralize")
    p.add_argument("--dot")
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_graph)

    p = sub.add_parser("power-study", parents=[common], help="replicated power / size study")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_power_study)

    p = sub.add_parser("uniformity", parents=[common], help="KS uniformity check and QQ plot")
    p.add_argument("--pvalues", required=True)
    p.add_argument("--out", default="-")
    p.add_argument("--qq")
    p.add_argument("--label")
    p.set_defaults(func=cmd_uniformity)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except (UsageError, SpecError, FileNotFoundError) as exc:
        print(f"latentgraph {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (EstimationError, SeriesError, np.linalg.LinAlgError, ArithmeticError) as exc:
        print(f"latentgraph {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"latentgraph {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return 0


if __name__ == "__main__":
    sys.exit(main())
