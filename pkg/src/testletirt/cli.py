"""Command-line entry point: simulate, estimate, convert, study, diagnose.

Exit codes: 0 success, 2 usage, 3 I/O, 4 numerical non-convergence.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import harness
from .datagen import GenConfig, default_design, read_responses, simulate, table1_fixture, write_responses, write_truth
from .errors import DegenerateData, DegenerateLoading, HeywoodError, InvalidDesign, NonConvergence
from .liminfo import fit_liminfo
from .mcmc import ChainSpec, fit_mcmc
from .mmle import EmSettings, QuadratureSpec, fit_mmle
from .model import FactorParams, TestletDesign, factor_to_irt, irt_to_factor, rescale_unstandardized

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("testletirt")


class UsageError(Exception):
    pass


class UnreadableInput(Exception):
    pass


def _seed(args) -> int:
    seed = args.seed if args.seed is not None else int(np.random.SeedSequence().entropy % 2**63)
    print(f"seed: {seed}", file=sys.stderr)
    return seed


def _read_json(path) -> dict:
    with open(path) as fh:
        return json.load(fh)


def _write_json(path, doc) -> None:
    text = json.dumps(doc, indent=2) + "\n"
    if path is None or str(path) == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def _load_design(path, n_items: int | None = None) -> TestletDesign:
    if path is None:
        design = default_design()
    else:
        d = _read_json(path)
        try:
            design = TestletDesign.from_dict(d)
        except (KeyError, TypeError) as exc:
            raise UsageError(f"design file {path}: expected {{n_items, testlets}} ({exc})") from exc
    if n_items is not None and design.n_items != n_items:
        raise UsageError(f"design has {design.n_items} items but the data have {n_items}")
    return design


# simulate

def cmd_simulate(args) -> int:
    if args.n <= 0:
        raise UsageError(f"--n must be positive, got {args.n}")
    if not np.isfinite(args.tv) or args.tv < 0:
        raise UsageError(f"--tv (testlet variance) must be >= 0, got {args.tv}")
    seed = _seed(args)
    design = _load_design(args.design)
    items = None if args.random_items else table1_fixture()
    if items is not None and len(items) != design.n_items:
        raise UsageError("the fixed item table has 30 items; use --random-items for other designs")
    cfg = GenConfig(args.n, design, args.tv, items, seed=seed)
    items, _, y = simulate(cfg)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_responses(out / "responses.csv", y)
    write_truth(out / "truth.json", items, cfg.sigma2, design)
    print(f"wrote {y.shape[0]}x{y.shape[1]} responses to {out / 'responses.csv'}", file=sys.stderr)
    return EXIT_OK


# estimate

def _chains(args, seed: int) -> ChainSpec:
    base = ChainSpec.paper_scale() if args.paper_scale else ChainSpec()
    kw = {"seed": seed}
    if args.iterations:
        kw["min_iterations"] = args.iterations
    if args.chains:
        kw["n_chains"] = args.chains
    return replace(base, **kw)


def run_estimator(name: str, y, design: TestletDesign, args, seed: int):
    if name == "mmle":
        return fit_mmle(y, design, QuadratureSpec(args.quad_nodes), EmSettings(max_iterations=args.max_iterations))
    if name == "dwls":
        return fit_liminfo(y, design, seed=seed)
    if name == "mcmc":
        fit, _ = fit_mcmc(y, design, chains=_chains(args, seed))
        return fit
    raise UsageError(f"unknown estimator {name!r}")


def side_by_side(fits: dict) -> str:
    names = list(fits)
    head = f"{'item':>4} " + " ".join(f"{n + '.a':>9} {n + '.b':>9}" for n in names)
    rows = [head]
    j = len(next(iter(fits.values())).irt.a)
    for i in range(j):
        rows.append(f"{i + 1:>4} " + " ".join(f"{f.irt.a[i]:9.3f} {f.irt.b[i]:9.3f}" for f in fits.values()))
    for d in range(next(iter(fits.values())).design.n_testlets):
        rows.append(f"{'s2_' + str(d + 1):>4} " + " ".join(f"{f.sigma2[d]:9.3f} {'':>9}" for f in fits.values()))
    return "\n".join(rows)


def cmd_estimate(args) -> int:
    seed = _seed(args)
    try:
        y = read_responses(args.data)
    except ValueError as exc:
        raise UnreadableInput(f"{args.data}: {exc}") from exc
    design = _load_design(args.design, y.shape[1])
    names = list(harness.ESTIMATORS) if args.estimator == "all" else [args.estimator]
    fits = {}
    for name in names:
        try:
            fits[name] = run_estimator(name, y, design, args, seed)
        except NonConvergence as exc:
            if exc.result is None:
                raise
            fits[name] = exc.result
    if len(fits) == 1:
        doc = next(iter(fits.values())).to_dict()
    else:
        doc = {"seed": seed, "fits": {k: f.to_dict() for k, f in fits.items()}}
        print(side_by_side(fits), file=sys.stderr if args.out in (None, "-") else sys.stdout)
    _write_json(args.out, doc)
    failed = [k for k, f in fits.items() if not f.converged]
    if failed:
        print(f"not converged: {', '.join(failed)}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


# convert

def _vec(doc, key, n=None):
    if key not in doc:
        raise UsageError(f"parameter file lacks {key!r}")
    v = np.asarray(doc[key], dtype=float)
    if n is not None and v.size != n:
        raise UsageError(f"{key!r} has {v.size} entries, expected {n}")
    return v


def convert_document(doc: dict, to: str, rescale: bool = False) -> dict:
    """Convert a parameter document between the factor and IRT metrics."""
    if "design" in doc:
        design = TestletDesign.from_dict(doc["design"])
        sigma2 = _vec(doc, "sigma2", design.n_testlets)
    else:
        key = "lambda" if to == "irt" else "a"
        design = TestletDesign.unidimensional(len(doc.get(key, [])))
        sigma2 = np.zeros(0)
    n = design.n_items
    out = {}
    if to == "irt":
        lam, tau = _vec(doc, "lambda", n), _vec(doc, "tau", n)
        if rescale:
            lam, tau = rescale_unstandardized(lam, tau, design.item_sigma2(sigma2))
            out["lambda"], out["tau"] = lam.tolist(), tau.tolist()
        irt = factor_to_irt(FactorParams(lam, tau, sigma2), design)
        out["a"], out["b"] = irt.a.tolist(), irt.b.tolist()
    elif to == "factor":
        if rescale:
            raise UsageError("--rescale applies to factor-metric input only")
        lam, tau = irt_to_factor(_vec(doc, "a", n), _vec(doc, "b", n), design.item_sigma2(sigma2))
        out["lambda"], out["tau"] = lam.tolist(), tau.tolist()
    else:
        raise UsageError(f"unknown target metric {to!r}")
    out["sigma2"] = sigma2.tolist()
    if "design" in doc:
        out["design"] = design.to_dict()
    return out


def cmd_convert(args) -> int:
    doc = _read_json(args.input)
    _write_json(args.out, convert_document(doc, args.to, args.rescale))
    return EXIT_OK


# study

def cmd_study(args) -> int:
    cfg = harness.StudyConfig.from_dict(_read_json(args.config)) if args.config else harness.StudyConfig()
    if args.seed is None:
        args.seed = cfg.seed
    kw = {"seed": _seed(args)}
    if args.reps is not None:
        kw["n_replications"] = args.reps
    if args.estimators:
        kw["estimators"] = tuple(e.strip() for e in args.estimators.split(",") if e.strip())
    if args.paper_scale:
        kw["chains"] = replace(ChainSpec.paper_scale(), seed=cfg.chains.seed)
    if args.workers:
        kw["workers"] = args.workers
    cfg = replace(cfg, **kw)

    def progress(key, recs):
        log.info("%s rep %d: %s", key[0], key[1], ", ".join(f"{r.estimator}={r.status}" for r in recs))

    report = harness.run_study(cfg, progress=progress)
    report.write(args.out_dir, persist_runs=args.persist_runs)
    for row in report.convergence:
        print(f"{row['condition']:>14} {row['estimator']:>5}  converged {row['converged']:>3}  "
              f"heywood {row['heywood']:>3}  nonconverged {row['nonconverged']:>3}")
    print(f"report written to {args.out_dir} ({report.wall_time:.1f} s)", file=sys.stderr)
    return EXIT_OK


# diagnose

def diagnose_records(path) -> list[dict]:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(path)
    if p.is_file():
        d = _read_json(p)
        d.setdefault("path", str(p))
        return [d]
    if (p / "runs").is_dir():
        p = p / "runs"
    return harness.scan_runs(p)


def cmd_diagnose(args) -> int:
    recs = diagnose_records(args.path)
    if not recs:
        raise UsageError(f"no fit records under {args.path}")
    bad = []
    for r in recs:
        flags = []
        if r.get("heywood"):
            flags.append("HEYWOOD")
        if not r.get("converged", False) and not r.get("heywood"):
            flags.append("NONCONVERGED")
        extra = f" psrf_max={r['psrf_max']:.3f}" if r.get("psrf_max") is not None else ""
        if r.get("ppp") is not None:
            extra += f" ppp={r['ppp']:.3f}"
        if r.get("error"):
            extra += f" error={r['error']}"
        where = f"{r.get('condition', '-')} rep {r.get('replication', '-')} {r.get('estimator', '?')}"
        print(f"{where}: {' '.join(flags) or 'ok'}{extra}")
        if flags:
            bad.append(where)
    print(f"{len(recs) - len(bad)}/{len(recs)} fits converged", file=sys.stderr)
    if bad:
        print("problem replications: " + "; ".join(bad), file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="testletirt", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate a response matrix and its truth file")
    s.add_argument("--n", type=int, default=500, help="number of persons")
    s.add_argument("--tv", type=float, default=0.25, help="testlet variance")
    s.add_argument("--design", help="design JSON {n_items, testlets}; default 6 testlets of 5")
    s.add_argument("--random-items", action="store_true", help="draw a, b instead of using the fixed item table")
    s.add_argument("--seed", type=int)
    s.add_argument("--out-dir", default=".")
    s.set_defaults(func=cmd_simulate)

    e = sub.add_parser("estimate", help="fit one or all estimators to a response matrix")
    e.add_argument("--data", required=True, help="headerless 0/1 CSV")
    e.add_argument("--design")
    e.add_argument("--estimator", choices=[*harness.ESTIMATORS, "all"], default="mmle")
    e.add_argument("--out", help="output JSON (default stdout)")
    e.add_argument("--seed", type=int)
    e.add_argument("--quad-nodes", type=int, default=21)
    e.add_argument("--max-iterations", type=int, default=500, help="EM iteration cap")
    e.add_argument("--chains", type=int)
    e.add_argument("--iterations", type=int, help="minimum MCMC iterations per chain")
    e.add_argument("--paper-scale", action="store_true", help="4 chains x 20000 iterations")
    e.set_defaults(func=cmd_estimate)

    c = sub.add_parser("convert", help="convert parameters between factor and IRT metrics")
    c.add_argument("input", help="parameter JSON")
    c.add_argument("--to", choices=["irt", "factor"], default="irt")
    c.add_argument("--rescale", action="store_true", help="input loadings are in the unit-residual metric")
    c.add_argument("--out")
    c.set_defaults(func=cmd_convert)

    st = sub.add_parser("study", help="run a Monte Carlo recovery study")
    st.add_argument("--config", help="study config JSON")
    st.add_argument("--reps", type=int)
    st.add_argument("--estimators", help="comma-separated subset of mmle,mcmc,dwls")
    st.add_argument("--seed", type=int)
    st.add_argument("--workers", type=int)
    st.add_argument("--paper-scale", action="store_true")
    st.add_argument("--persist-runs", action="store_true")
    st.add_argument("--out-dir", default="study_out")
    st.set_defaults(func=cmd_study)

    d = sub.add_parser("diagnose", help="summarize convergence of saved fits")
    d.add_argument("path", help="fit JSON, runs/ directory or study output directory")
    d.set_defaults(func=cmd_diagnose)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (json.JSONDecodeError, UnreadableInput) as exc:
        print(f"error: cannot read input: {exc}", file=sys.stderr)
        return EXIT_IO
    except (UsageError, InvalidDesign, DegenerateData, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (HeywoodError, DegenerateLoading, NonConvergence, ArithmeticError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
