"""Command-line front end: ``crgeo <command> [options]``.

Every command prints one JSON report on standard output and a short human
summary on standard error.  Exit codes: 0 success or all verdicts true,
1 some verdict false, 2 input or resource error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from fractions import Fraction
from typing import Sequence

import numpy as np

from . import __version__

__all__ = ["main", "build_parser", "SCHEMA", "default_seed"]

SCHEMA = "crgeo.report/1"
POINT_SCALE = 0.1


class InputError(ValueError):
    pass


def default_seed() -> int:
    raw = os.environ.get("CRGEO_SEED")
    if raw is None or raw == "":
        return 0
    try:
        return int(raw)
    except ValueError:
        raise InputError(f"CRGEO_SEED must be an integer, got {raw!r}") from None


def _digest(inputs: dict) -> str:
    return hashlib.sha256(json.dumps(inputs, sort_keys=True).encode()).hexdigest()[:16]


def _report(command: str, inputs: dict, result: dict, runtime: float | None) -> dict:
    out = {"schema": SCHEMA, "version": __version__, "command": command, "inputs": inputs,
           "inputs_digest": _digest(inputs), "result": result}
    if runtime is not None:
        out["runtime"] = round(runtime, 3)
    return out


def _say(msg: str) -> None:
    print(msg, file=sys.stderr)


# --------------------------------------------------------------------------
# Point parsing


def _scalar(v):
    """JSON scalar or ``[re, im]`` pair to an exact value when possible."""
    if isinstance(v, list):
        if len(v) != 2:
            raise InputError(f"complex values are [re, im] pairs, got {v!r}")
        re, im = _scalar(v[0]), _scalar(v[1])
        if isinstance(re, complex) or isinstance(im, complex):
            raise InputError("nested complex value")
        if isinstance(re, float) or isinstance(im, float):
            return complex(float(re), float(im))
        return (re, im)
    if isinstance(v, bool):
        raise InputError("booleans are not numbers")
    if isinstance(v, int):
        return v
    if isinstance(v, float):
        return v
    if isinstance(v, str):
        try:
            return Fraction(v)
        except ValueError:
            try:
                return complex(v.replace(" ", "").replace("i", "j"))
            except ValueError:
                raise InputError(f"not a number: {v!r}") from None
    raise InputError(f"not a number: {v!r}")


def _point_from_json(data: dict, n: int, d: int) -> tuple:
    try:
        zv = [_scalar(x) for x in data["z"]]
        wv = [_scalar(x) for x in data["w"]]
        pv = [[_scalar(x) for x in row] for row in data["p"]]
    except KeyError as e:
        raise InputError(f"point is missing {e.args[0]!r}") from None
    if len(zv) != n or len(wv) != d or len(pv) != d or any(len(r) != n for r in pv):
        raise InputError(f"point shape does not match n={n}, d={d}")
    if "pbar" in data:
        pb = [[complex(*x) if isinstance(x, list) else complex(x) for x in row] for row in data["pbar"]]
        return zv, wv, pv, pb
    return zv, wv, pv


def _load_points(path: str, n: int, d: int):
    """``--point`` file: one point, a list of points, or JetPoint records."""
    from .crtableau import JetPoint
    with open(path) as fh:
        data = json.load(fh)
    items = data if isinstance(data, list) else [data]
    out = []
    for item in items:
        if "dF" in item:
            jet = JetPoint.from_json(item)
            if (jet.n, jet.d) != (n, d):
                raise InputError(f"jet has n={jet.n}, d={jet.d}; expected n={n}, d={d}")
            out.append(jet)
        else:
            out.append(_point_from_json(item, n, d))
    return out


def _random_points(n: int, d: int, count: int, seed: int, scale: float) -> list:
    from .crtableau import sample_point
    rng = np.random.default_rng(seed)
    return [sample_point(n, d, rng, scale) for _ in range(count)]


def _point_to_json(pt) -> dict:
    enc = lambda x: [float(complex(x).real), float(complex(x).imag)] if not isinstance(x, tuple) \
        else [str(x[0]), str(x[1])]  # noqa: E731
    if hasattr(pt, "to_json"):
        return {"z": [enc(x) for x in pt.z], "w": [enc(x) for x in pt.w]}
    zv, wv, pv = pt[:3]
    conv = lambda x: enc(x) if not isinstance(x, (int, Fraction)) else str(x)  # noqa: E731
    return {"z": [conv(x) for x in zv], "w": [conv(x) for x in wv], "p": [[conv(x) for x in r] for r in pv]}


# --------------------------------------------------------------------------
# Commands


def _system_from_args(args):
    from .crtableau import PDESystem
    n, d = args.n, args.d
    consts = {}
    if args.k is not None:
        consts["k"] = args.k
    if args.F_zero:
        if args.F or args.system:
            raise InputError("--F-zero excludes --F and --system")
        return PDESystem.zero(n, d), {"F": "0"}
    if args.system:
        with open(args.system) as fh:
            data = json.load(fh)
        F = data["F"]
        consts.update(data.get("constants", {}))
        return PDESystem(n, d, F, consts or None), {"F": F}
    if not args.F:
        raise InputError("give --F, --F-zero or --system")
    if len(args.F) > n * d:
        raise InputError(f"at most n*d = {n * d} entries for --F")
    flat = list(args.F) + ["0"] * (n * d - len(args.F))
    F = [flat[i * n:(i + 1) * n] for i in range(d)]
    return PDESystem(n, d, F, consts or None), {"F": F}


def _test_one(job):
    from .crtableau import cr_tableau_test
    system, pt, tol = job
    v = cr_tableau_test(pt, tol=tol) if hasattr(pt, "dF") else cr_tableau_test(system, pt, tol=tol)
    return v.to_json()


def cmd_tableau_test(args) -> tuple[dict, int, str]:
    from .symexpr import SymexprError
    try:
        system, desc = _system_from_args(args)
    except SymexprError as e:
        raise InputError(str(e)) from None
    if args.point:
        points = _load_points(args.point, args.n, args.d)
        src = {"point_file": os.path.basename(args.point)}
    else:
        points = _random_points(args.n, args.d, args.points, args.seed, args.scale)
        src = {"points": args.points, "seed": args.seed, "scale": args.scale}
    jobs = [(system, pt, args.tol) for pt in points]
    if args.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(args.jobs) as ex:
            verdicts = list(ex.map(_test_one, jobs))
    else:
        verdicts = [_test_one(j) for j in jobs]
    results = [dict(point=_point_to_json(pt), **v) for pt, v in zip(points, verdicts)]
    n_true = sum(v["cr_tableau"] for v in verdicts)
    inputs = {"n": args.n, "d": args.d, "tol": args.tol, "k": args.k, **desc, **src}
    result = {"all_true": n_true == len(verdicts), "n_true": n_true, "n_points": len(verdicts),
              "max_residual": max((v["residual"] for v in verdicts), default=0.0), "verdicts": results}
    code = 0 if result["all_true"] else 1
    return _report("tableau-test", inputs, result, None), code, \
        f"tableau-test: {n_true}/{len(verdicts)} points have Cauchy-Riemann tableau"


def cmd_verify_structure(args) -> tuple[dict, int, str]:
    from .grassmann import verify_structure_equations
    sol = verify_structure_equations(args.n, args.d, args.notation)
    result = {"residual_zero": sol.residual_zero, "residual_terms": sol.residual_terms(),
              "symmetric": sol.symmetric}
    inputs = {"n": args.n, "d": args.d, "notation": args.notation}
    code = 0 if sol.residual_zero else 1
    return _report("verify-structure", inputs, result, None), code, \
        f"verify-structure ({args.notation}, n={args.n}, d={args.d}): residual " + \
        ("exactly zero" if sol.residual_zero else f"has {sol.residual_terms()} terms")


def classification(n: int, d: int, dim: int) -> str:
    if n == 1:
        return "unconstrained at this level (out of scope)"
    if dim == 0:
        return "rigid (CR only)"
    if d == 1:
        return "hypersurface family"
    return "second-level torsion family"


def cmd_classify(args) -> tuple[dict, int, str]:
    from .crtableau import second_level_solution_space
    space = second_level_solution_space(args.n, args.d)
    label = classification(args.n, args.d, space.dimension)
    result = {"second_level_dim": space.dimension, "field": "complex", "unknowns": len(space.unknowns),
              "classification": label}
    return _report("classify", {"n": args.n, "d": args.d}, result, None), 0, \
        f"classify n={args.n}, d={args.d}: {space.dimension} complex dimensions, {label}"


def cmd_legendre(args) -> tuple[dict, int, str]:
    from .legendre import LegendreFibration, perturb_jet, random_hypersurface_equation
    from .crtableau import cr_tableau_test
    if args.fibration:
        with open(args.fibration) as fh:
            fib = LegendreFibration.from_json(json.load(fh))
        inputs = {"fibration": fib.to_json()}
    elif args.flat:
        fib = LegendreFibration.flat(args.flat)
        inputs = {"fibration": fib.to_json()}
    else:
        fib = None
        inputs = {"random": True, "n": args.n, "degree": args.degree}
    n = fib.n if fib is not None else args.n
    inputs.update(samples=args.samples, seed=args.seed, perturb=args.perturb)
    rng = np.random.default_rng([args.seed, 1])
    n_true = n_sym = n_pert_false = 0
    max_inv = 0.0
    rows = []
    for s in random_hypersurface_equation(n, args.seed, args.degree, args.samples, fib):
        n_true += s.verdict.cr_tableau
        n_sym += s.symmetric
        inv = float(np.max(np.abs(s.invariants["t_Pbar"]))) if s.invariants["t_Pbar"].size else 0.0
        max_inv = max(max_inv, inv)
        row = {"cr_tableau": s.verdict.cr_tableau, "residual": s.verdict.residual, "invariant_norm": inv,
               "symmetric": s.symmetric}
        if args.perturb:
            pv = cr_tableau_test(perturb_jet(s.jet, rng, args.perturb))
            n_pert_false += not pv.cr_tableau
            row["perturbed_cr_tableau"] = pv.cr_tableau
        rows.append(row)
    result = {"n_samples": len(rows), "n_true": n_true, "all_true": n_true == len(rows),
              "all_symmetric": n_sym == len(rows), "max_invariant_norm": max_inv,
              "invariants_zero": max_inv < 1e-12, "samples": rows}
    ok = result["all_true"] and result["all_symmetric"]
    if args.perturb:
        result["perturbed_false"] = n_pert_false
        ok = ok and n_pert_false == len(rows)
    msg = f"legendre: {n_true}/{len(rows)} induced jets have Cauchy-Riemann tableau, " \
          f"max second-level invariant {max_inv:.3g}"
    if args.perturb:
        msg += f"; {n_pert_false}/{len(rows)} perturbed jets rejected"
    return _report("legendre", inputs, result, None), 0 if ok else 1, msg


def cmd_characters(args) -> tuple[dict, int, str]:
    from .involution import cartan_characters, cr_tableau, hypersurface_moduli_generality
    if args.moduli:
        rep = hypersurface_moduli_generality(args.n, args.trials, args.seed)
        result = rep.to_json()
        result.pop("independence")
        inputs = {"target": "moduli", "n": args.n, "trials": args.trials, "seed": args.seed}
        code = 0 if rep.matches else 1
        msg = f"characters (hypersurface moduli, n={args.n}): {rep.report.characters}, " \
              f"generality {tuple(rep.generality)}; expected {tuple(rep.expected)}" + \
              ("" if rep.matches else " -- MISMATCH")
        return _report("characters", inputs, result, None), code, msg
    if args.d is None:
        raise InputError("--cr needs --d")
    rep = cartan_characters(cr_tableau(args.n, args.d), args.trials, args.seed)
    inputs = {"target": "cr", "n": args.n, "d": args.d, "trials": args.trials, "seed": args.seed}
    msg = f"characters (CR tableau, n={args.n}, d={args.d}): s={tuple(rep.characters)}, " \
          f"involutive={rep.involutive}, generality {tuple(rep.generality)}"
    return _report("characters", inputs, rep.to_json(), None), 0 if rep.involutive else 1, msg


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="crgeo", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"crgeo {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="random seed (default: $CRGEO_SEED or 0)")
    common.add_argument("--jobs", type=int, default=1, help="worker processes for per-point work")
    common.add_argument("--timing", action="store_true", help="include the runtime in the JSON report")
    common.add_argument("--output", "-o", help="write the JSON report to this file instead of stdout")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify-structure", parents=[common], help="check the structure equations exactly")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--d", type=int, required=True)
    p.add_argument("--notation", choices=["real", "complex"], default="real")
    p.set_defaults(func=cmd_verify_structure)

    p = sub.add_parser("tableau-test", parents=[common], help="decide Cauchy-Riemann tableau at points")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--d", type=int, required=True)
    p.add_argument("--F", action="append", default=[],
                   help="entry F^i_mubar; repeat to fill row-major, missing entries are 0")
    p.add_argument("--F-zero", action="store_true", help="the flat system F = 0")
    p.add_argument("--system", help="JSON file with F (d x n strings) and optional constants")
    p.add_argument("--k", type=float, help="value of the constant k in F")
    p.add_argument("--point", help="JSON file with a point, a list of points, or JetPoint records")
    p.add_argument("--points", type=int, default=10, help="number of random points")
    p.add_argument("--scale", type=float, default=POINT_SCALE, help="scale of random points")
    p.add_argument("--tol", type=float, default=1e-8)
    p.set_defaults(func=cmd_tableau_test)

    p = sub.add_parser("classify", parents=[common], help="dimension of the second-level torsion")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--d", type=int, required=True)
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("legendre", parents=[common], help="equations from Legendre fibrations")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--fibration", help="JSON file with n and f[mu][nu]")
    g.add_argument("--flat", type=int, metavar="N", help="the flat fibration f = 0 in dimension N")
    p.add_argument("--n", type=int, default=2, help="dimension for random fibrations")
    p.add_argument("--degree", type=int, default=2, help="degree bound for random fibrations")
    p.add_argument("--samples", type=int, default=100)
    p.add_argument("--perturb", type=float, default=0.0, metavar="NORM",
                   help="also test jets perturbed off the absorbable image by this norm")
    p.set_defaults(func=cmd_legendre)

    p = sub.add_parser("characters", parents=[common], help="Cartan characters and generality")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--cr", action="store_true", help="the Cauchy-Riemann tableau")
    g.add_argument("--moduli", action="store_true", help="the hypersurface torsion tableau")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--d", type=int)
    p.add_argument("--trials", type=int, default=8)
    p.set_defaults(func=cmd_characters)
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    from .crtableau import NotOnEquationError
    from .grassmann import ResourceLimitError
    from .legendre import FibrationError, TransversalityError
    from .symexpr import SymexprError

    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.seed is None:
            args.seed = default_seed()
        if args.jobs < 1:
            raise InputError("--jobs must be positive")
        t0 = time.perf_counter()
        report, code, summary = args.func(args)
        if args.timing:
            report["runtime"] = round(time.perf_counter() - t0, 3)
    except ResourceLimitError as e:
        _say(f"crgeo: resource limit: {e}")
        return 2
    except (InputError, FibrationError, TransversalityError, NotOnEquationError, SymexprError,
            OSError, json.JSONDecodeError, KeyError, ValueError) as e:
        _say(f"crgeo: error: {e}")
        return 2
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.output:
        with open(args.output, "w") as fh:
            fh.write(text + "\n")
    else:
        print(text)
    _say(summary)
    return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
