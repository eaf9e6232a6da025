"""Command-line interface: ``nptest {test,select-h,ess,krr,simulate}``.

Settings come from command-line flags, then from an optional ``--config`` file
of ``key = value`` lines, then from built-in defaults. Exit codes: 0 success,
2 invalid input, 3 infeasible configuration, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import math
import sys
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from . import bounds as bd
from . import eigenbasis as eb
from . import sim
from . import testing as tst
from .errors import (
    InvalidArgumentError,
    NoFeasibleBandwidthError,
    NoSolutionError,
    NPTestError,
    OutOfRangeError,
)
from .spline import read_dataset_csv

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_INFEASIBLE = 3
EXIT_NUMERICAL = 4

C0_SENSITIVITY = (0.5, 1.0, 2.0)


class InfeasibleConfiguration(NPTestError):
    pass


def _g(v: float) -> str:
    return f"{float(v):.17g}"


def _r(v: float) -> str:
    return f"{float(v):.3f}"


# ---------------------------------------------------------------------------
# value parsers
# ---------------------------------------------------------------------------

def _positive_int(s: str) -> int:
    v = int(s)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {s}")
    return v


def _positive_float(s: str) -> float:
    v = float(s)
    if not (v > 0 and math.isfinite(v)):
        raise argparse.ArgumentTypeError(f"expected a positive number, got {s}")
    return v


def _level(s: str) -> float:
    v = float(s)
    if not 0 < v < 1:
        raise argparse.ArgumentTypeError(f"expected a level in (0, 1), got {s}")
    return v


def _int_list(s: str) -> List[int]:
    try:
        vals = [int(t) for t in s.replace(" ", "").split(",") if t]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {s!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def _float_list(s: str) -> List[float]:
    try:
        vals = [float(t) for t in s.replace(" ", "").split(",") if t]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {s!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def _bool(s) -> bool:
    if isinstance(s, bool):
        return s
    t = str(s).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {s!r}")


def parse_f0(spec: str) -> Callable:
    """Null function from a textual spec.

    ``zero``; ``const:a``; ``poly:a0,a1,...`` (``a0 + a1 x + ...``); ``model`` for
    ``5 (x^2 - x + 1/6)``.
    """
    spec = spec.strip()
    if spec == "zero":
        return lambda x: np.zeros_like(np.asarray(x, dtype=float))
    if spec == "model":
        return sim.f0
    kind, _, rest = spec.partition(":")
    try:
        if kind == "const":
            a = float(rest)
            return lambda x: np.full_like(np.asarray(x, dtype=float), a)
        if kind == "poly":
            coefs = [float(t) for t in rest.split(",") if t.strip()]
            if not coefs:
                raise ValueError
            return lambda x: np.polynomial.polynomial.polyval(np.asarray(x, dtype=float), coefs)
    except ValueError:
        pass
    raise InvalidArgumentError(f"cannot parse f0 spec {spec!r}; use zero, model, const:a or poly:a0,a1,...")


def parse_kernel(spec: str):
    """``poly:m``, ``finite:k`` or ``gauss`` -> (name, parameter, eigenvalue function)."""
    kind, _, rest = spec.partition(":")
    if kind == "gauss" and not rest:
        def gauss(N):
            with np.errstate(over="ignore"):
                return np.exp(np.arange(1, N + 1, dtype=float) ** 2)

        return "gauss", None, gauss
    try:
        p = int(rest)
    except ValueError:
        p = 0
    if kind == "poly" and p >= 1:
        return "poly", p, lambda N: np.arange(1, N + 1, dtype=float) ** (2 * p)
    if kind == "finite" and p >= 1:
        return "finite", p, lambda N: np.ones(p)
    raise InvalidArgumentError(f"cannot parse kernel {spec!r}; use poly:m, finite:k or gauss")


# ---------------------------------------------------------------------------
# config files
# ---------------------------------------------------------------------------

def read_config(path: str) -> Dict[str, str]:
    out = {}
    try:
        fh = open(path)
    except OSError as exc:
        raise InvalidArgumentError(f"cannot read config file {path}: {exc.strerror}") from None
    with fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep or not key.strip():
                raise InvalidArgumentError(f"{path}, line {lineno}: expected 'key = value'")
            out[key.strip().replace("-", "_")] = value.strip()
    return out


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

class _Formatter(argparse.ArgumentDefaultsHelpFormatter):
    pass


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", default=None, help="file of 'key = value' lines; flags take precedence")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nptest", description="Finite-sample spline tests.", formatter_class=_Formatter)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("test", help="test a hypothesis on a CSV dataset", formatter_class=_Formatter)
    _add_common(p)
    p.add_argument("data", nargs="?", default=None, help="CSV file with header x,y")
    p.add_argument("--null", choices=["simple", "linear"], default="simple", help="null hypothesis")
    p.add_argument("--f0", default="zero", help="null function: zero, model, const:a, poly:a0,a1,...")
    p.add_argument("--kind", choices=["first", "second", "composite", "plrt"], default="second", help="statistic")
    p.add_argument("--h", default="fs", help="bandwidth: fs, gcv or a positive number")
    p.add_argument("--calibration", choices=["closed", "mc"], default="mc", help="cutoff calibration")
    p.add_argument("--mode", choices=["noiseless-fit", "exact-coefficients"], default="noiseless-fit", help="null centring of the second-order statistic")
    p.add_argument("--alpha", type=_level, default=0.05, help="type I level")
    p.add_argument("--beta", type=_level, default=0.05, help="type II level (bandwidth selection)")
    p.add_argument("--m", type=_positive_int, default=2, help="penalty order")
    p.add_argument("--N-mc", dest="N_mc", type=_positive_int, default=tst.DEFAULT_N_MC, help="Monte Carlo null draws")
    p.add_argument("--c0", type=_positive_float, default=1.0, help="packing constant c_0")
    p.add_argument("--fs-terms", dest="fs_terms", choices=[bd.FULL, bd.LEADING], default=bd.FULL, help="separation terms minimised for --h fs")
    p.add_argument("--seed", type=int, default=0, help="Monte Carlo seed")
    p.add_argument("--require-feasible", dest="require_feasible", type=_bool, nargs="?", const=True, default=False, help="exit 3 when a deviation condition is violated")
    p.add_argument("--out", default=None, help="write the machine-readable CSV row here instead of stdout")

    p = sub.add_parser("select-h", help="separation profile and its minimiser", formatter_class=_Formatter)
    _add_common(p)
    p.add_argument("--n", type=_positive_int, default=100, help="sample size")
    p.add_argument("--m", type=_positive_int, default=2, help="penalty order")
    p.add_argument("--alpha", type=_level, default=0.05, help="type I level")
    p.add_argument("--beta", type=_level, default=0.05, help="type II level")
    p.add_argument("--regime", choices=[bd.SECOND_ORDER, bd.COMPOSITE], default=bd.SECOND_ORDER, help="separation function")
    p.add_argument("--terms", choices=[bd.FULL, bd.LEADING], default=bd.FULL, help="include the remainders or only leading terms")
    p.add_argument("--basis", choices=["empirical", "trig"], default="empirical", help="eigen-system for the kernel constants (empirical: equispaced design of size n)")
    p.add_argument("--N", type=_positive_int, default=None, help="trigonometric basis size (odd); default max(101, n)")
    p.add_argument("--c0", type=_positive_float, default=1.0, help="packing constant c_0")
    p.add_argument("--n-grid", dest="n_grid", type=_positive_int, default=200, help="log-spaced grid points")
    p.add_argument("--out", default=None, help="profile CSV (h,rho_n,feasible); stdout when omitted")

    p = sub.add_parser("ess", help="effective sample size for a known alternative", formatter_class=_Formatter)
    _add_common(p)
    p.add_argument("--norm", type=_positive_float, default=None, help="RKHS norm of the alternative (required)")
    p.add_argument("--alpha", type=_level, default=0.05, help="type I level")
    p.add_argument("--beta", type=_level, default=0.05, help="type II level")
    p.add_argument("--m", type=_positive_int, default=2, help="penalty order")
    p.add_argument("--rho-k", dest="rho_k", type=_positive_float, default=1.0, help="kernel constant rho_K")
    p.add_argument("--zeta-k", dest="zeta_k", type=_positive_float, default=1.0, help="kernel constant zeta_K")

    p = sub.add_parser("krr", help="kernel ridge penalty equation", formatter_class=_Formatter)
    _add_common(p)
    p.add_argument("--kernel", default="poly:2", help="eigenvalue decay: poly:m, finite:k or gauss")
    p.add_argument("--n", type=_positive_float, default=1e4, help="sample size")
    p.add_argument("--n-list", dest="n_list", type=_float_list, default=None, help="comma-separated sample sizes; reports the fitted log-log slope")
    p.add_argument("--M", type=_positive_float, default=1.0, help="type I budget M")
    p.add_argument("--zeta-k", dest="zeta_k", type=_positive_float, default=1.0, help="kernel constant zeta_K")
    p.add_argument("--n-eigen", dest="n_eigen", type=_positive_int, default=20000, help="eigenvalues retained for poly kernels")

    p = sub.add_parser("simulate", help="replicated power study", formatter_class=_Formatter)
    _add_common(p)
    p.add_argument("--hypothesis", choices=[sim.SIMPLE, sim.COMPOSITE], default=sim.SIMPLE, help="simulation model")
    p.add_argument("--n-list", dest="n_list", type=_int_list, default="50,100,200,300,400", help="sample sizes")
    p.add_argument("--c-list", dest="c_list", type=_float_list, default="0,1,2,3", help="signal levels")
    p.add_argument("--replicates", type=_positive_int, default=500, help="datasets per cell")
    p.add_argument("--procedures", default=None, help="comma-separated subset of S1-S4 or C1-C2; all by default")
    p.add_argument("--alpha", type=_level, default=0.05, help="type I level")
    p.add_argument("--beta", type=_level, default=0.05, help="type II level")
    p.add_argument("--N-mc", dest="N_mc", type=_positive_int, default=tst.DEFAULT_N_MC, help="Monte Carlo null draws")
    p.add_argument("--m", type=_positive_int, default=2, help="penalty order")
    p.add_argument("--c0", type=_positive_float, default=1.0, help="packing constant c_0")
    p.add_argument("--fs-terms", dest="fs_terms", choices=[bd.FULL, bd.LEADING], default=bd.LEADING, help="separation terms minimised for h_fs")
    p.add_argument("--seed", type=int, default=20240101, help="base seed")
    p.add_argument("--threads", type=_positive_int, default=None, help="worker threads; NPTEST_THREADS or the core count when omitted")
    p.add_argument("--out", default=None, help="study CSV path; stdout when omitted")
    p.add_argument("--metadata", default=None, help="metadata path; <out>.meta by default")
    return parser


def _subparser(parser: argparse.ArgumentParser, name: str) -> argparse.ArgumentParser:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise KeyError(name)


def parse_args(argv: Sequence[str]) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config is None:
        return args
    values = read_config(args.config)
    sp = _subparser(parser, args.command)
    known = {a.dest: a for a in sp._actions if a.dest not in ("help", "config")}
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise InvalidArgumentError(f"unknown config keys for '{args.command}': {', '.join(unknown)}")
    defaults = {}
    for key, raw in values.items():
        action = known[key]
        conv = action.type or (lambda s: s)
        try:
            val = conv(raw)
        except (argparse.ArgumentTypeError, ValueError) as exc:
            raise InvalidArgumentError(f"config key {key}: {exc}") from None
        if action.choices is not None and val not in action.choices:
            raise InvalidArgumentError(f"config key {key}: {val!r} not in {sorted(action.choices)}")
        defaults[key] = val
    sp.set_defaults(**defaults)
    return parser.parse_args(argv)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

_KIND = {"first": tst.FIRST, "second": tst.SECOND, "composite": tst.COMPOSITE, "plrt": tst.PLRT}


def _emit(text: str, path: Optional[str], out) -> None:
    if path is None:
        out.write(text)
    else:
        with open(path, "w", newline="") as fh:
            fh.write(text)


def _a_sensitivity(h: float, k: bd.BoundConstants) -> str:
    parts = []
    for c0 in C0_SENSITIVITY:
        kk = bd.BoundConstants(k.c_K, k.rho_K, k.zeta_K, k.m, c0, k.c_phi, k.trace)
        parts.append(f"c_0={c0:g}: {_r(bd.a_h(h, kk))}")
    return "A(h) sensitivity: " + ", ".join(parts)


def cmd_test(args, out) -> int:
    if args.data is None:
        raise InvalidArgumentError("a dataset path is required")
    data = read_dataset_csv(args.data)
    kind = _KIND[args.kind]
    null = tst.NullModel.simple(parse_f0(args.f0)) if args.null == "simple" else tst.NullModel.linear()
    if args.null == "linear" and kind not in (tst.COMPOSITE, tst.PLRT):
        raise InvalidArgumentError("the linear null supports --kind composite or plrt")
    if args.null == "simple" and kind == tst.COMPOSITE:
        raise InvalidArgumentError("--kind composite needs --null linear")
    regime = tst.regime_for(kind, null)
    budget = bd.ErrorBudget(args.alpha, args.beta, regime)
    sys_ = eb.build_empirical_basis(data.x, args.m)
    h_source = args.h
    h_fs = None
    if h_source == "fs" and kind != tst.FIRST:
        h_fs = bd.select_h_fs(budget, data.n, sys_, regime, c_0=args.c0, terms=args.fs_terms).argmin_h
    elif h_source not in ("fs", "gcv"):
        try:
            h_source = float(h_source)
        except ValueError:
            raise InvalidArgumentError(f"--h must be fs, gcv or a number, got {args.h!r}") from None
    calibration = tst.CLOSED_FORM if args.calibration == "closed" else tst.MONTE_CARLO
    res = tst.run_test(
        data, null, kind, budget, h_source=h_source, calibration=calibration, sys=sys_, N_mc=args.N_mc,
        seed=args.seed, mode=args.mode, c_0=args.c0, h_fs=h_fs,
    )
    k = bd.BoundConstants.from_system(sys_, res.cfg, c_0=args.c0)
    flags = ";".join(res.feasibility_flags)
    lines = [
        f"statistic={_r(res.statistic)} cutoff={_r(res.cutoff)} reject={str(res.reject).lower()}",
        f"kind={res.kind} calibration={res.calibration} n={data.n}",
        f"h={_r(res.h)} (source={res.h_source}) lambda={res.cfg.lam:.3e}",
        f"feasibility_flags={flags or 'none'}",
        _a_sensitivity(res.h, k),
    ]
    out.write("\n".join(lines) + "\n")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["statistic", "cutoff", "reject", "h", "h_source", "kind", "calibration", "flags"])
    w.writerow([_g(res.statistic), _g(res.cutoff), int(res.reject), _g(res.h), res.h_source, res.kind, res.calibration, flags])
    if args.out is None:
        out.write("\n")
    _emit(buf.getvalue(), args.out, out)
    if args.require_feasible and res.feasibility_flags:
        raise InfeasibleConfiguration(f"deviation conditions violated: {flags}")
    return EXIT_OK


def _basis_for(args, n: int) -> eb.EigenSystem:
    if args.basis == "trig":
        N = args.N if args.N is not None else eb.default_truncation(n)
        return eb.build_trig_basis(args.m, N)
    x = (np.arange(n) + 0.5) / n
    return eb.build_empirical_basis(x, args.m)


def cmd_select_h(args, out) -> int:
    sys_ = _basis_for(args, args.n)
    budget = bd.ErrorBudget(args.alpha, args.beta, args.regime)
    prof = bd.select_h_fs(budget, args.n, sys_, args.regime, c_0=args.c0, n_grid=args.n_grid, terms=args.terms)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["h", "rho_n", "feasible"])
    for h, v, f in zip(prof.h_grid, prof.rho_values, prof.feasible):
        w.writerow([_g(h), _g(v), int(bool(f))])
    _emit(buf.getvalue(), args.out, out)
    i_min = int(np.flatnonzero(prof.h_grid == prof.argmin_h)[0])
    cfg = eb.FitConfig.from_h(args.m, args.n, prof.argmin_h)
    k = bd.BoundConstants.from_system(sys_, cfg, c_0=args.c0)
    fo = bd.ErrorBudget(args.alpha, args.beta, bd.FIRST_ORDER)
    lines = [
        f"argmin_h={_g(prof.argmin_h)} rho_n={_g(prof.rho_values[i_min])} row={i_min + 1} feasible={int(bool(prof.feasible[i_min]))}",
        f"h_star={_r(bd.h_star(fo, cfg, k))} h_star_star={_r(bd.h_star_star(budget.M, args.n, k, args.m))}",
        f"regime={args.regime} terms={args.terms} basis={args.basis}",
        _a_sensitivity(prof.argmin_h, k),
    ]
    target = out if args.out is not None else sys.stderr
    target.write("\n".join(lines) + "\n")
    return EXIT_OK


def cmd_ess(args, out) -> int:
    if args.norm is None:
        raise InvalidArgumentError("--norm is required")
    if args.zeta_k > 1:
        raise InvalidArgumentError("--zeta-k must not exceed 1")
    budget = bd.ErrorBudget(args.alpha, args.beta, bd.SECOND_ORDER)
    k = bd.BoundConstants(c_K=1.0, rho_K=args.rho_k, zeta_K=args.zeta_k, m=args.m)
    n = bd.effective_sample_size(args.norm, budget, k, args.m)
    prev = bd.ess_rhs(n - 1, budget, k, args.m) if n > 2 else math.inf
    cur = bd.ess_rhs(n, budget, k, args.m)
    out.write(f"n={n}\n")
    out.write(f"rhs(n-1)={_g(prev)} rhs(n)={_g(cur)} norm={_g(args.norm)}\n")
    out.write(f"check: rhs(n) <= norm: {str(cur <= args.norm).lower()}; rhs(n-1) > norm: {str(prev > args.norm).lower()}\n")
    return EXIT_OK


def _krr_eigen(kernel: str, n_eigen: int) -> tuple:
    name, p, fn = parse_kernel(kernel)
    if name == "poly":
        return name, p, fn(n_eigen)
    if name == "finite":
        return name, p, fn(p)
    return name, p, fn(64)


def cmd_krr(args, out) -> int:
    name, p, rho = _krr_eigen(args.kernel, args.n_eigen)
    if name == "poly":
        rate = f"{-4 * p}/{4 * p + 1}"
    elif name == "finite":
        rate = "-1"
    else:
        rate = "-1 (times a power of log n)"
    ns = args.n_list if args.n_list else [args.n]
    lams = []
    for n in ns:
        sol = bd.krr_lambda_star(rho, n, args.M, args.zeta_k, full=True)
        lams.append(sol.lam)
        out.write(f"n={_g(n)} lambda_star={_g(sol.lam)} residual={sol.residual:.3e}\n")
    out.write(f"kernel={args.kernel} rate_exponent={rate}\n")
    if len(ns) > 1:
        slope = float(np.polyfit(np.log(ns), np.log(lams), 1)[0])
        out.write(f"fitted_slope={_g(slope)}\n")
    return EXIT_OK


def cmd_simulate(args, out) -> int:
    procs = None
    if args.procedures:
        procs = tuple(t.strip().upper() for t in args.procedures.split(",") if t.strip())
    config = sim.StudyConfig(
        hypothesis=args.hypothesis,
        n_list=tuple(args.n_list),
        c_list=tuple(args.c_list),
        replicates=args.replicates,
        alpha=args.alpha,
        beta=args.beta,
        procedures=procs,
        N_mc=args.N_mc,
        base_seed=args.seed,
        m=args.m,
        c_0=args.c0,
        h_fs_terms=args.fs_terms,
    )
    table = sim.run_study(config, threads=sim.resolve_threads(args.threads))
    if args.out is None:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(table.header)
        for r in table.rows:
            w.writerow([sim._fmt(r[h]) for h in table.header])
        out.write(buf.getvalue())
        if args.metadata:
            table.write_metadata(args.metadata)
    else:
        table.to_csv(args.out)
        table.write_metadata(args.metadata or args.out + ".meta")
    return EXIT_OK


_COMMANDS = {"test": cmd_test, "select-h": cmd_select_h, "ess": cmd_ess, "krr": cmd_krr, "simulate": cmd_simulate}


def main(argv: Optional[Sequence[str]] = None, out=None) -> int:
    out = sys.stdout if out is None else out
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
    except SystemExit as exc:  # argparse: --help exits 0, usage errors exit 2
        return int(exc.code or 0)
    except InvalidArgumentError as exc:
        sys.stderr.write(f"nptest: error: {exc}\n")
        return EXIT_INPUT
    try:
        return _COMMANDS[args.command](args, out)
    except (InfeasibleConfiguration, NoFeasibleBandwidthError, OutOfRangeError) as exc:
        sys.stderr.write(f"nptest: infeasible: {exc}\n")
        return EXIT_INFEASIBLE
    except InvalidArgumentError as exc:
        sys.stderr.write(f"nptest: error: {exc}\n")
        return EXIT_INPUT
    except OSError as exc:
        sys.stderr.write(f"nptest: error: {exc}\n")
        return EXIT_INPUT
    except (NoSolutionError, NPTestError, ArithmeticError, np.linalg.LinAlgError) as exc:
        sys.stderr.write(f"nptest: numerical failure: {exc}\n")
        return EXIT_NUMERICAL
    except Exception as exc:  # never surface a traceback to the shell
        sys.stderr.write(f"nptest: internal failure: {type(exc).__name__}: {exc}\n")
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
