"""Reproduce the reading-passage conversion check from the fixture file.

Converts the WLSMV standardized (lambda, tau) to logistic (a, b) and maps the
MLR unit-residual estimates onto the standardized metric, then prints the
per-item differences against the tabulated values.

    python3 scripts/table6_conversion.py [--fixture tests/fixtures/table6.json]
"""
import argparse
import json
from pathlib import Path

import numpy as np

from testletirt.model import FactorParams, TestletDesign, factor_to_irt, rescale_unstandardized

DEFAULT_FIXTURE = Path(__file__).resolve().parent.parent / "tests" / "fixtures" / "table6.json"


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--fixture", type=Path, default=DEFAULT_FIXTURE)
    ap.add_argument("--tol", type=float, default=0.02)
    args = ap.parse_args(argv)

    doc = json.loads(args.fixture.read_text())
    w, m = doc["wlsmv"], doc["mlr"]
    design = TestletDesign.from_testlets(len(w["lambda"]), doc["passages"])
    ip = factor_to_irt(FactorParams(np.array(w["lambda"]), np.array(w["tau"]),
                                    np.array(doc["sigma2"]["wlsmv"])), design)
    lam, tau = rescale_unstandardized(m["lambda"], m["tau"], design.item_sigma2(doc["sigma2"]["mlr"]))

    print("item testlet     a   a_tab      b   b_tab  lam(mlr) lam_tab  tau(mlr) tau_tab")
    for j in range(design.n_items):
        print(f"{j + 1:>4} {design.testlet_of[j] + 1:>7} {ip.a[j]:6.3f} {w['a'][j]:6.3f} "
              f"{ip.b[j]:6.3f} {w['b'][j]:6.3f}   {lam[j]:6.3f}  {w['lambda'][j]:6.3f}   "
              f"{tau[j]:6.3f}  {w['tau'][j]:6.3f}")
    worst = {
        "a": np.abs(ip.a - w["a"]).max(),
        "b": np.abs(ip.b - w["b"]).max(),
        "lambda": np.abs(lam - w["lambda"]).max(),
        "tau": np.abs(tau - w["tau"]).max(),
    }
    print("max abs diff: " + ", ".join(f"{k} {v:.4f}" for k, v in worst.items()))
    return 0 if max(worst.values()) <= args.tol else 1


if __name__ == "__main__":
    raise SystemExit(main())
