"""``gtare-lab`` command line: solve, compare and validate.

Exit codes: 0 pass, 1 bad input, 2 iteration cap, 3 rank deficiency,
4 check failed (certificate on an exact run, or L outside the admissible
set), 5 inconclusive L validation.
"""

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .errors import GtareLabError, InvalidL, MaxIterations, RankDeficient
from .exact_solvers import gtare_residual
from .game_model import BUILTIN_MODELS, GameModel, load_builtin
from .nested_iteration import run_nested_iteration, validate_l
from .rl_drivers import LEARNERS, PRIOR_FOR
from .sde_lab import Environment, ExplorationSpec, SimConfig

log = logging.getLogger("gtare_lab")

EXIT_OK, EXIT_INPUT, EXIT_MAXITER, EXIT_RANK, EXIT_CHECK, EXIT_INCONCLUSIVE = range(6)
ALGORITHMS = ("nested", "onpolicy", "offpolicy", "modelfree")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


class BadInput(Exception):
    pass


def build_parser():
    parser = _Parser(prog="gtare-lab",
                     description="Solve, compare and validate two-player stochastic LQ games.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--model", required=True,
                       help=f"model JSON file or builtin name ({', '.join(BUILTIN_MODELS)})")
        p.add_argument("--L", dest="L", default=None,
                       help="initial gain for player 2, rows separated by ';' (default 0)")
        p.add_argument("-v", "--verbose", action="store_true")

    def run_flags(p, algorithms):
        p.add_argument("--algorithm", choices=algorithms, default=algorithms[0])
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--tol", type=float, default=None)
        p.add_argument("--max-outer", type=int, default=200)
        p.add_argument("--max-inner", type=int, default=500)
        p.add_argument("--dt", type=float, default=0.05)
        p.add_argument("--substeps", type=int, default=100)
        p.add_argument("--rollouts", type=int, default=512)
        p.add_argument("--windows", type=int, default=60)
        p.add_argument("--explore-amp", type=float, default=0.1)
        p.add_argument("--batch-mode", choices=("mc", "exact"), default="mc")
        p.add_argument("--out", default="gtare_out")

    p_solve = sub.add_parser("solve", help="run one algorithm")
    common(p_solve)
    run_flags(p_solve, ALGORITHMS)
    p_cmp = sub.add_parser("compare", help="run every algorithm and tabulate deviations")
    common(p_cmp)
    run_flags(p_cmp, ("all",))
    p_val = sub.add_parser("validate", help="check an initial gain L for admissibility")
    common(p_val)
    p_val.add_argument("--out", default=None)
    return parser


def load_model(spec):
    path = Path(spec)
    try:
        if path.is_file():
            return GameModel.from_json(path)
        if spec in BUILTIN_MODELS:
            return load_builtin(spec)
    except (OSError, ValueError, KeyError, TypeError, GtareLabError) as exc:
        raise BadInput(f"cannot read model {spec!r}: {exc}") from exc
    raise BadInput(f"cannot read model {spec!r}: no such file or builtin model")


def parse_gain(text, rows, cols):
    if text is None:
        return np.zeros((rows, cols))
    try:
        L = np.array([[float(v) for v in row.split(",")] for row in text.split(";")])
    except ValueError as exc:
        raise BadInput(f"cannot parse L={text!r}") from exc
    if L.shape != (rows, cols):
        raise BadInput(f"L must be {rows}x{cols}, got {L.shape}")
    return L


def sim_config(args):
    return SimConfig(
        dt_window=args.dt, substeps=args.substeps, n_windows=args.windows,
        rollouts=args.rollouts, seed=0 if args.seed is None else args.seed,
        exploration=ExplorationSpec.sinusoids(args.explore_amp),
    )


def config_echo(args, model):
    keys = ("model", "algorithm", "seed", "tol", "max_outer", "max_inner", "dt", "substeps",
            "rollouts", "windows", "explore_amp", "batch_mode", "L")
    echo = {k: getattr(args, k) for k in keys}
    echo["model_matrices"] = model.to_dict()
    return echo


def _needs_seed(args, algorithm):
    return algorithm != "nested" and args.batch_mode == "mc"


def run_algorithm(name, model, L, args):
    """Run one algorithm; returns ``(report, error)`` with the certificate attached."""
    if name == "nested":
        tol = 1e-10 if args.tol is None else args.tol
        try:
            report = run_nested_iteration(model, L, tol=tol, max_outer=args.max_outer,
                                          max_inner=args.max_inner)
        except MaxIterations as exc:
            return exc.report, exc
        return report, None
    env = Environment(model, sim_config(args), mode=args.batch_mode)
    try:
        report = LEARNERS[name](env, PRIOR_FOR[name](model), tol=args.tol,
                                max_outer=args.max_outer, max_inner=args.max_inner, L=L)
    except (MaxIterations, RankDeficient) as exc:
        if exc.report is not None:
            exc.report.algorithm = name
        return exc.report, exc
    report.certificate = gtare_residual(model, report.P_final)
    return report, None


def _json_safe(obj):
    if isinstance(obj, dict):
        return {str(k): _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _json_safe(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else str(v)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_json(path, data):
    path.write_text(json.dumps(_json_safe(data), indent=2, sort_keys=True) + "\n")


def report_payload(report, error, args, model):
    body = report.to_dict() if report is not None else {"algorithm": args.algorithm}
    body["config"] = config_echo(args, model)
    if isinstance(error, RankDeficient):
        body["error"] = {"type": "RankDeficient", "message": str(error),
                         "rank": error.rank_report.to_dict() if error.rank_report else None}
    elif error is not None:
        body["error"] = {"type": type(error).__name__, "message": str(error)}
    if report is not None:
        body["diagnostics"] = report.diagnostics
    return body


TRACE_HEADER = ["algorithm", "kind", "k", "j", "norm", "rank_achieved", "rank_required", "condition"]


def trace_rows(report):
    rows = []
    name = report.algorithm
    for k, trace in enumerate(report.inner_traces):
        for j, dz in enumerate(trace, start=2):
            rows.append([name, "inner_dZ", k, j, dz, "", "", ""])
    for k, dP in report.outer_trace:
        rows.append([name, "outer_dP", k, "", dP, "", "", ""])
    for d in report.diagnostics:
        rows.append([name, d.get("kind", ""), d.get("k", ""), d.get("j", ""), "",
                     d.get("achieved", ""), d.get("required", ""), d.get("condition", "")])
    return rows


def write_traces(path, reports):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRACE_HEADER)
        for rep in reports:
            if rep is None:
                continue
            for row in trace_rows(rep):
                writer.writerow([repr(v) if isinstance(v, float) else v for v in row])


def exit_code(report, error, name, args):
    if isinstance(error, RankDeficient):
        return EXIT_RANK
    if isinstance(error, MaxIterations):
        return EXIT_MAXITER
    exact_run = name == "nested" or args.batch_mode == "exact"
    if exact_run and not report.certificate.passes:
        return EXIT_CHECK
    return EXIT_OK


def _prepare(args):
    model = load_model(args.model)
    L = parse_gain(args.L, model.m2, model.n)
    return model, L


def _check_l(model, L):
    result = validate_l(model, L)
    if result.verdict != "InA":
        raise InvalidL(f"L is not admissible ({result.verdict}): {result.reason}")


def cmd_solve(args):
    model, L = _prepare(args)
    if _needs_seed(args, args.algorithm) and args.seed is None:
        raise BadInput("--seed is required for Monte Carlo batches")
    _check_l(model, L)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    report, error = run_algorithm(args.algorithm, model, L, args)
    elapsed = time.perf_counter() - t0
    write_json(out / "report.json", report_payload(report, error, args, model))
    write_traces(out / "traces.csv", [report])
    write_json(out / "timing.json", {args.algorithm: elapsed})
    code = exit_code(report, error, args.algorithm, args)
    if report is not None:
        print(f"{args.algorithm}: outer={report.iterations[0]} inner={report.iterations[1]}")
        print(np.array2string(np.asarray(report.P_final), precision=8))
        if report.certificate is not None:
            c = report.certificate
            print(f"residual={c.residual_norm:.3e} stabilizing={c.stabilizing} passes={c.passes}")
    if error is not None:
        print(f"{type(error).__name__}: {error}", file=sys.stderr)
    return code


def cmd_compare(args):
    model, L = _prepare(args)
    if args.batch_mode == "mc" and args.seed is None:
        raise BadInput("--seed is required for Monte Carlo batches")
    _check_l(model, L)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    reports, timing, table, code = {}, {}, [], EXIT_OK
    for name in ALGORITHMS:
        t0 = time.perf_counter()
        report, error = run_algorithm(name, model, L, args)
        timing[name] = time.perf_counter() - t0
        reports[name] = report
        this = exit_code(report, error, name, args)
        if this != EXIT_OK and code == EXIT_OK:
            code = this
        if error is not None:
            print(f"{name}: {type(error).__name__}: {error}", file=sys.stderr)
    ref = reports["nested"].P_final
    for name in ALGORITHMS:
        rep = reports[name]
        if rep is None:
            continue
        P = np.asarray(rep.P_final)
        dev = np.abs(P - ref)
        cert = rep.certificate
        table.append({
            "algorithm": name, "P_final": P, "max_abs_deviation": float(dev.max()),
            "max_rel_deviation": float((dev / np.maximum(np.abs(ref), 1e-300)).max()),
            "iterations": list(rep.iterations), "converged": rep.converged,
            "certificate": cert.to_dict() if cert is not None else None,
        })
    write_json(out / "compare.json", {"config": config_echo(args, model), "table": table})
    with open(out / "compare.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["algorithm", "P_final", "max_abs_deviation", "max_rel_deviation",
                         "residual", "stabilizing"])
        for row in table:
            cert = row["certificate"] or {}
            writer.writerow([row["algorithm"], json.dumps(row["P_final"].tolist()),
                             repr(row["max_abs_deviation"]), repr(row["max_rel_deviation"]),
                             repr(cert.get("residual_norm", float("nan"))), cert.get("stabilizing")])
    write_traces(out / "traces.csv", list(reports.values()))
    write_json(out / "timing.json", timing)
    for row in table:
        print(f"{row['algorithm']:>10}  max|dP|={row['max_abs_deviation']:.3e}  "
              f"rel={row['max_rel_deviation']:.3%}  P={row['P_final'].round(6).tolist()}")
    return code


def cmd_validate(args):
    model, L = _prepare(args)
    result = validate_l(model, L).to_dict()
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_json(out / "validate.json", result)
    print(f"verdict: {result['verdict']} ({result['reason']})")
    print(f"A_L spectral abscissa: {result['A_L_spectral_abscissa']:.6g}")
    return {"InA": EXIT_OK, "NotInA": EXIT_CHECK}.get(result["verdict"], EXIT_INCONCLUSIVE)


COMMANDS = {"solve": cmd_solve, "compare": cmd_compare, "validate": cmd_validate}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "tol", None) is not None and args.tol <= 0:
        print("gtare-lab: error: --tol must be positive", file=sys.stderr)
        return EXIT_INPUT
    try:
        return COMMANDS[args.command](args)
    except BadInput as exc:
        print(f"gtare-lab: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except InvalidL as exc:
        print(f"gtare-lab: {exc}", file=sys.stderr)
        return EXIT_CHECK
    except GtareLabError as exc:
        print(f"gtare-lab: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
