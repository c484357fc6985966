import sys
import argparse

from contextlib import ExitStack
from pathlib import Path

from dotenv import load_dotenv

from utils.apa import ProviderError
from utils.bench import BenchSpec, run_bench, write_bench_csv
from utils.converter import env_int, parse_float_list
from utils.girsanov import InapplicableError
from utils.logger import log, GREEN, YELLOW, RED, ENDC
from utils.methods import METHODS, estimate_sensitivity
from utils.model import BUILTIN_MODELS, ModelError, load_model, validate
from utils.oracle import OracleError
from utils.sim import RngStream, SimulationError, simulate
from utils.stats import DEFAULT_N_MAX, DEFAULT_N_MIN, write_reports_csv

load_dotenv()

SEED = env_int("STOCHSENS_SEED", 0)
WORKERS = env_int("STOCHSENS_WORKERS", 1)

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_NOT_CONVERGED = 3

FAILURES = (ModelError, InapplicableError, OracleError, SimulationError, ProviderError, ValueError)


def load_checked_model(name_or_path):
    """Load a model file and refuse it when the regularity conditions fail."""
    model = load_model(name_or_path)
    violations = validate(model.network)
    if violations:
        for violation in violations:
            log(f"{RED}{violation}{ENDC}")
        raise ModelError(f"{name_or_path}: {len(violations)} regularity violation(s)")
    return model


def cmd_simulate(args):
    model = load_checked_model(args.model)
    net = model.network if args.theta is None else model.network.with_theta(args.theta)
    T = model.T if args.T is None else args.T
    for path_id in range(args.paths):
        traj = simulate(net, net.theta, T, RngStream(args.seed, path_id))
        if args.out is None:
            traj.write_csv(sys.stdout)
            continue
        out = Path(args.out)
        if args.paths > 1:
            out = out.with_name(f"{out.stem}_{path_id}{out.suffix or '.csv'}")
        with out.open("w", encoding="utf-8", newline="") as stream:
            traj.write_csv(stream)
        log(f"Wrote {traj.n_jumps} jumps to {out}")
    return EXIT_OK


def cmd_sensitivity(args):
    model = load_checked_model(args.model)
    T = model.T if args.T is None else args.T
    params = args.param or [model.network.params.sensitive]
    reports = []
    with ExitStack() as stack:
        on_note = None
        if args.diagnostics:
            notes = stack.enter_context(open(args.diagnostics, "w", encoding="utf-8"))

            def on_note(line):
                notes.write(line + "\n")
        for param in params:
            net = model.network.with_sensitive(param)
            if args.theta is not None:
                net = net.with_theta(args.theta)
            log(f"Estimating ∂E f(X(T))/∂{param} at {param} = {net.theta:g}, T = {T:g} with {args.method}")
            reports.append(estimate_sensitivity(
                args.method, net, model.observable, T, args.seed, rel_target=args.rel_ci,
                n_min=args.n_min, n_max=args.n_max, workers=args.workers, M=args.M, kappa=args.kappa, h=args.h,
                on_note=on_note,
            ))

    if args.out is None:
        for report in reports:
            print(report.to_json(args.timing))
    elif Path(args.out).suffix == ".csv":
        with open(args.out, "w", encoding="utf-8", newline="") as stream:
            write_reports_csv(reports, stream, args.timing)
    else:
        with open(args.out, "w", encoding="utf-8") as stream:
            for report in reports:
                stream.write(report.to_json(args.timing) + "\n")

    if not all(report.converged for report in reports):
        log(f"{YELLOW}Relative target {args.rel_ci} not reached within {args.n_max} samples{ENDC}")
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def cmd_bench(args):
    spec = BenchSpec.default(args.table, args.scale)
    if args.thetas or args.Ts:
        spec = BenchSpec(
            table=spec.table,
            theta_grid=tuple(parse_float_list(args.thetas)) if args.thetas else spec.theta_grid,
            T_grid=tuple(parse_float_list(args.Ts)) if args.Ts else spec.T_grid,
            methods=spec.methods,
            scale=spec.scale,
            h_grid=spec.h_grid,
        )
    rows = run_bench(spec, seed=args.seed, workers=args.workers)
    if args.out is None:
        write_bench_csv(rows, sys.stdout)
    else:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        out = out_dir / f"table{spec.table}.csv"
        with out.open("w", encoding="utf-8", newline="") as stream:
            write_bench_csv(rows, stream)
        log(f"{GREEN}Wrote {len(rows)} rows to {out}{ENDC}")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        description="Simulate reaction networks and estimate parameter sensitivities.",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    subparsers = parser.add_subparsers(dest="command", required=True)
    model_help = f"Model file, or one of the built-in models: {', '.join(BUILTIN_MODELS)}."

    simulate_parser = subparsers.add_parser(
        "simulate", help="Write SSA trajectories as CSV.", formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    simulate_parser.add_argument("model", help=model_help)
    simulate_parser.add_argument("--T", type=float, default=None, help="Horizon (defaults to the model's T).")
    simulate_parser.add_argument("--seed", type=int, default=SEED, help="Random seed.")
    simulate_parser.add_argument("--paths", type=int, default=1, help="Number of trajectories.")
    simulate_parser.add_argument("--theta", type=float, default=None, help="Override the sensitive parameter.")
    simulate_parser.add_argument(
        "--out", "-o", default=None,
        help="Output CSV (suffixed _<i> per path when --paths > 1); stdout when omitted.",
    )
    simulate_parser.set_defaults(handler=cmd_simulate)

    sens_parser = subparsers.add_parser(
        "sensitivity", help="Estimate ∂E f(X(T))/∂θ with the adaptive stopping rule.",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    sens_parser.add_argument("model", help=model_help)
    sens_parser.add_argument("--method", "-m", choices=METHODS + ("auto",), default="apa", help="Estimator.")
    sens_parser.add_argument("--T", type=float, default=None, help="Horizon (defaults to the model's T).")
    sens_parser.add_argument("--rel-ci", type=float, default=0.05, help="Target CI half-length relative to |estimate|.")
    sens_parser.add_argument("--n-min", type=int, default=DEFAULT_N_MIN, help="Samples before the first check.")
    sens_parser.add_argument("--n-max", type=int, default=DEFAULT_N_MAX, help="Sample cap.")
    sens_parser.add_argument("--h", type=float, default=None, help="Finite-difference perturbation.")
    sens_parser.add_argument("--M", type=int, default=50, help="Auxiliary paths per APA sample.")
    sens_parser.add_argument("--kappa", type=float, default=3.0, help="Auxiliary path extension factor.")
    sens_parser.add_argument("--seed", type=int, default=SEED, help="Random seed.")
    sens_parser.add_argument("--workers", "-w", type=int, default=WORKERS, help="Worker processes.")
    sens_parser.add_argument("--theta", type=float, default=None, help="Override the sensitive parameter.")
    sens_parser.add_argument(
        "--param", "-p", action="append", default=None,
        help="Sensitive parameter (repeatable); defaults to the model's.",
    )
    sens_parser.add_argument("--out", "-o", default=None, help="Report file (.csv for CSV, JSON lines otherwise).")
    sens_parser.add_argument("--diagnostics", default=None, help="Per-sample APA diagnostics as JSON lines.")
    sens_parser.add_argument("--timing", action="store_true", help="Include wall-clock seconds in the report.")
    sens_parser.set_defaults(handler=cmd_sensitivity)

    bench_parser = subparsers.add_parser(
        "bench", help="Reproduce a comparison table as CSV.", formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    bench_parser.add_argument("--table", "-t", type=int, choices=(1, 2, 3, 4), required=True, help="Table number.")
    bench_parser.add_argument("--scale", "-s", type=float, default=1.0, help="Multiplier on sample counts and caps.")
    bench_parser.add_argument("--thetas", default=None, help="Comma-separated θ grid overriding the default.")
    bench_parser.add_argument("--Ts", default=None, help="Comma-separated T grid overriding the default.")
    bench_parser.add_argument("--seed", type=int, default=SEED, help="Random seed.")
    bench_parser.add_argument("--workers", "-w", type=int, default=WORKERS, help="Worker processes.")
    bench_parser.add_argument("--out", "-o", default=None, help="Output directory; stdout when omitted.")
    bench_parser.set_defaults(handler=cmd_bench)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except FAILURES as e:
        log(f"{RED}{e}{ENDC}")
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
