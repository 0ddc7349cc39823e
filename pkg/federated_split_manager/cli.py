"""Command line interface for running and inspecting federated split experiments."""

import argparse
import ast
import json
import logging
import sys

from pathlib import Path

import federated_split_manager as fsm


def is_int(s):
    """Check if string is actually int."""
    try:
        int(s)
        return True
    except (ValueError, TypeError):
        return False


def is_float(s):
    """Check if string is actually float."""
    try:
        float(s)
        return True
    except (ValueError, TypeError):
        return False


def is_None(s):
    """Check if string is actually None."""
    if s == "None":
        return True
    else:
        return False


def convert(value: str):
    """Turn a command line string into the Python value it spells."""
    # JSON lists, e.g. label_scheme=[[80,20],[50,50],[20,80]]
    if value.startswith("[") and value.endswith("]"):
        try:
            return json.loads(value)
        except json.JSONDecodeError:
            return value.strip("][").split(",")
    # change numbers to numbers but with attention to decimals and negative numbers
    if is_int(value):
        return int(value)
    elif is_float(value):
        return float(value)
    elif is_None(value):
        return None
    elif value in ["True", "False"]:
        return ast.literal_eval(value)
    return value


# https://sumit-ghosh.com/articles/parsing-dictionary-key-value-pairs-kwargs-argparse-python/
class ParseKwargs(argparse.Action):
    """With can user can input dicts on CLI."""

    def __call__(self, parser, namespace, values, option_string=None):
        """With can user can input dicts on CLI."""
        setattr(namespace, self.dest, dict())
        for value in values:
            if "=" not in value:
                parser.error(f"expected key=value, got {value!r}")
            # maxsplit helps in case righthand side of input has = in it, like filenames can have
            key, value = value.split("=", maxsplit=1)
            getattr(namespace, self.dest)[key] = convert(value)


def parse_vary(text: str):
    """``name=v1,v2,...`` to (name, [values])."""
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected name=v1,v2,..., got {text!r}")
    name, values = text.split("=", maxsplit=1)
    return name, [convert(v) for v in values.split(",") if v]


def _attach_log(output_dir):
    """Send package logs to ``<output_dir>/run.log``."""
    Path(output_dir).mkdir(parents=True, exist_ok=True)
    # Create a file handler
    file_handler = logging.FileHandler(Path(output_dir) / "run.log")

    # Create a formatter and add it to the handler
    formatter = logging.Formatter(
        "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
    )
    file_handler.setFormatter(formatter)
    logging.getLogger("federated_split_manager").addHandler(file_handler)
    return file_handler


def _detach_log(file_handler):
    # Remove the handler at the end of the run
    logging.getLogger("federated_split_manager").removeHandler(file_handler)
    file_handler.close()


def cmd_run(args) -> int:
    cfg = fsm.load_config(args.config, **args.kwargs)

    if args.dry_run:
        print(json.dumps(cfg.params, indent=2, sort_keys=True, default=str))
        return 0

    file_handler = _attach_log(cfg.output_dir)
    try:
        run = fsm.run_experiment(cfg)
    finally:
        _detach_log(file_handler)
    uniform, weighted = run.final_averages()
    print(f"mean test metric {uniform:.4f} (weighted {weighted:.4f}), {run.totals['bytes']} bytes")
    print(run.output_dir)
    return 0


def cmd_gradcheck(args) -> int:
    m = fsm.load_manager(args.config, **args.kwargs)
    worst = m.gradcheck(probes=args.probes, threshold=args.threshold)
    print(f"max relative error {worst:.3e}")
    return 0 if worst <= args.threshold else 1


def cmd_partition(args) -> int:
    m = fsm.load_manager(args.config, **args.kwargs)
    print(m.partition().to_string())
    return 0


def cmd_inspect(args) -> int:
    params = fsm.load_checkpoint(args.checkpoint)
    for name, value in params.items():
        print(f"{name}\t{tuple(value.shape)}\t{value.dtype}")
    print(f"{len(params)} tensors, {params.numel()} parameters")
    return 0


def cmd_sweep(args) -> int:
    name, values = args.vary
    cfg = fsm.load_config(args.config, **args.kwargs)
    file_handler = _attach_log(cfg.output_dir)
    try:
        frame = fsm.sweep(args.config, name, values, **args.kwargs)
    finally:
        _detach_log(file_handler)
    print(frame.to_string(index=False))
    return 0


def cmd_plot(args) -> int:
    from .plotting import plot_summary

    print(plot_summary(args.run_dir))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fsm", description=__doc__)
    subparsers = parser.add_subparsers(dest="command", required=True)

    kwargs_help = (
        "Override configuration parameters, e.g. `critical_layer=2 quantize=True`. "
        "Lists use JSON, e.g. label_scheme='[[80,20],[50,50],[20,80]]'."
    )

    run = subparsers.add_parser("run", help="Train and write metrics, ledger and checkpoints.")
    run.add_argument("config", help="JSON experiment file.")
    run.add_argument("kwargs", nargs="*", action=ParseKwargs, help=kwargs_help)
    run.add_argument(
        "--dry-run",
        help="Return configuration parameters without running the model.",
        action=argparse.BooleanOptionalAction,
        default=False,
    )
    run.set_defaults(func=cmd_run)

    gradcheck = subparsers.add_parser(
        "gradcheck", help="Compare analytic and finite-difference gradients (64-bit)."
    )
    gradcheck.add_argument("config")
    gradcheck.add_argument("kwargs", nargs="*", action=ParseKwargs, help=kwargs_help)
    gradcheck.add_argument("--probes", type=int, default=200)
    gradcheck.add_argument("--threshold", type=float, default=1e-5)
    gradcheck.set_defaults(func=cmd_gradcheck)

    partition = subparsers.add_parser(
        "partition", help="Print client shard histograms without training."
    )
    partition.add_argument("config")
    partition.add_argument("kwargs", nargs="*", action=ParseKwargs, help=kwargs_help)
    partition.set_defaults(func=cmd_partition)

    inspect = subparsers.add_parser("inspect", help="List the tensors of a checkpoint.")
    inspect.add_argument("checkpoint")
    inspect.set_defaults(func=cmd_inspect)

    sweep = subparsers.add_parser("sweep", help="Run once per value of one parameter.")
    sweep.add_argument("config")
    sweep.add_argument("kwargs", nargs="*", action=ParseKwargs, help=kwargs_help)
    sweep.add_argument(
        "--vary",
        type=parse_vary,
        required=True,
        help="Parameter and values, e.g. c=0,2,4 (c is short for critical_layer).",
    )
    sweep.set_defaults(func=cmd_sweep)

    plot = subparsers.add_parser("plot", help="Plot summary.csv of a run directory.")
    plot.add_argument("run_dir")
    plot.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    """Parser method.

    Example
    -------

    >>> fsm run experiment.json critical_layer=2 quantize=True
    """
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (fsm.ConfigError, fsm.PartitionError, fsm.SplitError) as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return 2
    except (fsm.DivergenceError, fsm.NonFiniteError) as err:
        print(f"training diverged: {err}", file=sys.stderr)
        return 3
    except (fsm.PayloadFormatError, OSError) as err:
        print(f"i/o error: {err}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
