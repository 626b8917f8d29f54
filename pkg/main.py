import argparse
import sys

from experiment_controller import COMMANDS, ExperimentController


def _times(text: str) -> list[float]:
    try:
        return [float(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"--times expects a comma-separated list of numbers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sfde",
        description="Stability analysis and simulation of stochastic functional differential equations.",
    )
    parser.add_argument("command", help=f"one of: {', '.join(COMMANDS)}")
    parser.add_argument("--config", metavar="PATH", help="JSON run configuration")
    parser.add_argument("--preset", metavar="NAME", help="built-in configuration (see 'presets')")
    parser.add_argument("--seed", type=int, metavar="U64", help="seed of the noise path")
    parser.add_argument("--master-seed", dest="master_seed", type=int, help="master seed of an ensemble")
    parser.add_argument("--T", dest="T", type=float, metavar="REAL", help="time horizon")
    parser.add_argument("--times", type=_times, metavar="CSV-LIST", help="comma-separated times")
    parser.add_argument("--replicas", type=int, metavar="N", help="ensemble size")
    parser.add_argument("--workers", type=int, default=4, help="threads for ensembles")
    parser.add_argument("--sigma", type=float, help="noise intensity (replaces the noise matrix by sigma*I)")
    parser.add_argument("--gamma", type=float, default=0.1, help="exponent of the temperedness profile")
    parser.add_argument("--out", metavar="PATH", help="output file (default: standard output)")
    parser.add_argument("--gnuplot", metavar="PATH", help="also write a gnuplot script (synchronize)")
    parser.add_argument("--quiet", action="store_true", help="no progress messages")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    controller = ExperimentController(quiet=args.quiet)
    return controller.run(args.command, args)


if __name__ == "__main__":
    sys.exit(main())
