"""
CLI del simulador: run, verify, inspect, bench
Exit codes: 0 ok, 1 validación, 2 ejecución, 3 verificación fallida
"""
import argparse
import json
import sys
from typing import List, Optional

from dotenv import load_dotenv
from pydantic import ValidationError

from fluorosense import __version__, experiments
from fluorosense.logger import log_error, log_info, setup_logging

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2
EXIT_VERIFY_FAILED = 3


def _describe_validation(error: ValidationError) -> str:
    """Una línea por campo inválido: ruta, mensaje"""
    lines = [f"{error.error_count()} invalid field(s) in {error.title}:"]
    for item in error.errors():
        location = ".".join(str(part) for part in item["loc"]) or "<root>"
        lines.append(f"  - {location}: {item['msg']}")
    return "\n".join(lines)


def _print_json(payload) -> None:
    print(json.dumps(payload, indent=2, sort_keys=True, default=str))


def _cmd_run(args) -> int:
    config = experiments.load_config(args.config)
    manifest = experiments.run(config, output_root=args.output_root)
    run_dir = experiments.run_directory(config, args.output_root)
    checks = experiments.read_checks(run_dir)
    _print_json({
        "run_dir": str(run_dir),
        "kind": manifest.kind,
        "files": len(manifest.files),
        "checks_passed": all(check.passed for check in checks),
    })
    return EXIT_OK


def _cmd_verify(args) -> int:
    report = experiments.verify(args.run_dir)
    _print_json(report.model_dump())
    return EXIT_OK if report.passed else EXIT_VERIFY_FAILED


def _cmd_inspect(args) -> int:
    _print_json(experiments.inspect(args.tagfile))
    return EXIT_OK


def _cmd_bench(args) -> int:
    _print_json(experiments.bench(duration=args.duration, rate=args.rate, bin_width=args.bin_width))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fluorosense",
        description="NV fluorescence RF-sensing simulator: experiments, verification and tag-file tools",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", default=None, help="logging level (default from FLUORO_LOG_LEVEL)")
    commands = parser.add_subparsers(dest="command", required=True)

    run = commands.add_parser("run", help="run the experiment described by a JSON config")
    run.add_argument("config", help="experiment config (JSON)")
    run.add_argument("--output-root", default=None, help="output root (default FLUORO_OUTPUT_ROOT)")
    run.set_defaults(handler=_cmd_run)

    verify = commands.add_parser("verify", help="re-check checksums and acceptance criteria of a run")
    verify.add_argument("run_dir", help="run directory holding manifest.json")
    verify.set_defaults(handler=_cmd_verify)

    inspect = commands.add_parser("inspect", help="dump the header of a binary tag file")
    inspect.add_argument("tagfile", help="tag file (.tags)")
    inspect.set_defaults(handler=_cmd_inspect)

    bench = commands.add_parser("bench", help="binning + PSD throughput on a synthetic stream")
    bench.add_argument("--duration", type=float, default=60.0, help="stream duration in seconds")
    bench.add_argument("--rate", type=float, default=72_000.0, help="count rate in photons/s")
    bench.add_argument("--bin-width", type=float, default=1e-7, help="bin width in seconds")
    bench.set_defaults(handler=_cmd_bench)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)
    setup_logging(level=args.log_level)
    log_info(f"fluorosense {__version__}: {args.command}")
    try:
        return args.handler(args)
    except ValidationError as e:
        message = _describe_validation(e)
        log_error("Validation error")
        print(message, file=sys.stderr)
        return EXIT_VALIDATION
    except ValueError as e:
        log_error("Validation error", e)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as e:
        log_error(f"Error running '{args.command}'", e)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
