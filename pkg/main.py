import argparse
import json
import sys
from pathlib import Path

from src import process
from src.exceptions import DataValidationError, MCICJMError
from src.logging_conf import setup_logging
from src.retry import get_error_location
from src.run_config import RunConfig, apply_overrides, load_run_config

EXIT_OK = 0
EXIT_USAGE = 1


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = Parser(prog="mcicjm", description="Joint model of PSA and competing progression risks")
    parser.add_argument("--log-level", default=None)
    commands = parser.add_subparsers(dest="command", required=True, parser_class=Parser)

    def command(name: str, help: str, config: bool = True) -> argparse.ArgumentParser:
        sub = commands.add_parser(name, help=help)
        if config:
            sub.add_argument("--config", type=Path, help="TOML run config or a config_echo.json")
        return sub

    sim = command("simulate", "simulate datasets from the joint model")
    sim.add_argument("--seed", type=int)
    sim.add_argument("--out", type=Path)
    sim.add_argument("--n-datasets", type=int)
    sim.add_argument("--n-subjects", type=int)
    sim.add_argument("--rho", type=float, help="true biopsy sensitivity")
    sim.add_argument("--workers", type=int)

    fit = command("fit", "fit the model to a dataset directory")
    fit.add_argument("--data", type=Path)
    fit.add_argument("--out", type=Path)
    fit.add_argument("--sensitivity", help="fixed:RHO, uniform:LO,HI or beta:A,B")
    fit.add_argument("--seed", type=int)
    fit.add_argument("--chains", type=int)
    fit.add_argument("--iterations", type=int)
    fit.add_argument("--thin", type=int)
    fit.add_argument("--adapt", type=int)
    fit.add_argument("--knots", type=int, help="B-spline knot count for both baseline hazards")
    fit.add_argument("--checkpoints", type=Path)
    fit.add_argument("--resume", action="store_true")
    fit.add_argument("--workers", type=int)

    ll = command("loglik", "evaluate the log posterior for one parameter state")
    ll.add_argument("--data", type=Path)
    ll.add_argument("--params", type=Path, required=True)
    ll.add_argument("--sensitivity")
    ll.add_argument("--out", type=Path)

    ev = command("evaluate", "bias, coverage and width across posterior directories", config=False)
    ev.add_argument("--truth", type=Path, required=True, help="config echo written by simulate")
    ev.add_argument("--posteriors", type=Path, nargs="+", required=True)
    ev.add_argument("--out", type=Path, required=True)
    ev.add_argument("--workers", type=int)

    aj = command("aj", "Aalen-Johansen cumulative incidence of a dataset", config=False)
    aj.add_argument("--data", type=Path, required=True)
    aj.add_argument("--out", type=Path, required=True)

    val = command("validate", "validate a dataset directory", config=False)
    val.add_argument("--data", type=Path, required=True)

    cmp_ = command("compare", "fit every sensitivity scenario on each dataset")
    cmp_.add_argument("--data", type=Path, nargs="+", required=True)
    cmp_.add_argument("--out", type=Path, required=True)
    cmp_.add_argument("--scenarios", nargs="+")
    cmp_.add_argument("--seed", type=int)
    cmp_.add_argument("--chains", type=int)
    cmp_.add_argument("--iterations", type=int)
    cmp_.add_argument("--thin", type=int)
    cmp_.add_argument("--adapt", type=int)
    cmp_.add_argument("--workers", type=int)
    return parser


def _required(value, flag: str):
    if value is None:
        raise argparse.ArgumentTypeError(f"{flag} is required (flag or [paths] in the config)")
    return value


def resolve_config(args: argparse.Namespace) -> RunConfig:
    config = load_run_config(getattr(args, "config", None))
    get = lambda name: getattr(args, name, None)  # noqa: E731
    overrides = {
        "sampler.seed": get("seed"),
        "sampler.n_chains": get("chains"),
        "sampler.n_iterations": get("iterations"),
        "sampler.thin": get("thin"),
        "sampler.n_adapt": get("adapt"),
        "model.sensitivity": get("sensitivity"),
        "model.n_knots": get("knots"),
        "simulate.n_datasets": get("n_datasets"),
        "paths.data": get("data") if args.command in ("fit", "loglik") else None,
        "paths.out": get("out") if args.command in ("simulate", "fit") else None,
        "paths.checkpoints": get("checkpoints"),
    }
    if get("n_subjects") is not None or get("rho") is not None:
        truth = config.simulate.truth.model_dump(mode="json")
        if get("n_subjects") is not None:
            truth["n_subjects"] = get("n_subjects")
        if get("rho") is not None:
            truth["rho_true"] = get("rho")
        overrides["simulate.truth"] = truth
    return apply_overrides(config, overrides)


def run(args: argparse.Namespace) -> dict:
    if args.command == "evaluate":
        return process.evaluate(args.truth, args.posteriors, args.out, workers=args.workers)
    if args.command == "aj":
        return process.cumulative_incidence(args.data, args.out)
    if args.command == "validate":
        return process.validate(args.data)

    config = resolve_config(args)
    if args.command == "simulate":
        return process.simulate(config, _required(config.paths.out, "--out"), workers=args.workers)
    if args.command == "fit":
        return process.fit(
            config,
            _required(config.paths.data, "--data"),
            _required(config.paths.out, "--out"),
            workers=args.workers,
            resume=args.resume,
        )
    if args.command == "loglik":
        result = process.loglik(config, _required(config.paths.data, "--data"), args.params, args.out)
        return {k: v for k, v in result.items() if k != "subjects"} if args.out else result
    return process.compare(config, args.data, args.out, scenarios=args.scenarios, workers=args.workers)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.log_level)
    try:
        result = run(args)
    except argparse.ArgumentTypeError as e:
        parser.print_usage(sys.stderr)
        print(f"{parser.prog}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DataValidationError as e:
        print(f"{e.error_type}: {e}", file=sys.stderr)
        return e.exit_code
    except MCICJMError as e:
        print(f"{e.error_type} at {get_error_location(e)}: {e}", file=sys.stderr)
        return e.exit_code

    print(json.dumps(result, indent=2, default=str))
    converged = result.get("converged", True) if isinstance(result, dict) else True
    if not converged:
        print("warning: split R-hat above threshold; see diagnostics.json", file=sys.stderr)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
