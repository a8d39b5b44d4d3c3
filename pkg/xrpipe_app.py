"""
xrpipe command-line entry point

    python xrpipe_app.py validate configs/offload_grayscale.yaml
    python xrpipe_app.py run configs/offload_grayscale.yaml --role server
    python xrpipe_app.py run configs/offload_grayscale.yaml --role client --frames 1000
    python xrpipe_app.py bench-local --resolutions 720p,1080p --kind zerocopy --format csv
    python xrpipe_app.py bench-remote --resolutions 720p --codec rle

Exit codes: 0 success, 1 validation or runtime failure, 2 usage error.
Results go to standard output (or --out); logs go to standard error.
"""

import argparse
import logging
import os
import sys
import traceback
from pathlib import Path
from typing import List, Optional

from pydantic import ValidationError

# Add current directory to Python path for local imports
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from config import Settings, defaults, get_settings
from models import ChannelKind, CodecId, Role, TableFormat
from services.bench_service import bench_local, bench_remote, render_table
from services.errors import ConfigInvalid, InvalidArgument, ParseError, XRPipeError
from services.pipeline_service import instantiate, load_config, validate_config

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_USAGE = 2

LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


class UsageError(Exception):
    """Bad command-line arguments detected after argparse"""


def configure_logging(settings: Settings) -> None:
    logging.basicConfig(
        level=LOG_LEVELS[settings.XRPIPE_LOG],
        stream=sys.stderr,
        format="%(asctime)s %(levelname)s %(threadName)s %(message)s",
        force=True,
    )


def emit(text: str, out: Optional[str]) -> None:
    """Print `text` to stdout, or write it to `out` when given."""
    if out:
        Path(out).write_text(text, encoding="utf-8")
        logging.info(f"✅ Wrote {out}")
    else:
        sys.stdout.write(text)
        sys.stdout.flush()


def print_issues(lines: List[str]) -> None:
    for line in lines:
        print(line)


def parse_resolutions(value: str) -> List[str]:
    resolutions = [r.strip() for r in value.split(",") if r.strip()]
    if not resolutions:
        raise argparse.ArgumentTypeError("expected a comma-separated list such as 720p,1080p")
    return resolutions


def positive_int(value: str) -> int:
    try:
        number = int(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got '{value}'")
    if number < 1:
        raise argparse.ArgumentTypeError(f"expected an integer >= 1, got {number}")
    return number


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="xrpipe",
        description="Distributed stream-processing pipelines with zero-copy local and compressed remote ports",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    validate = sub.add_parser("validate", help="Check a pipeline config and print every violation")
    validate.add_argument("config", help="Pipeline config (YAML)")

    run = sub.add_parser("run", help="Run the kernels of one role")
    run.add_argument("config", help="Pipeline config (YAML)")
    run.add_argument("--role", choices=["client", "server", "all"], default="all")
    run.add_argument("--duration", type=float, default=None, help="Wall-clock limit in seconds")
    run.add_argument("--frames", type=positive_int, default=None, help="Frame budget for every local source")
    run.add_argument("--out", default=None, help="Write the run report here instead of stdout")

    local = sub.add_parser("bench-local", help="Local channel transfer latency per resolution")
    local.add_argument("--resolutions", type=parse_resolutions, default=["720p", "1080p", "1440p", "2160p"])
    local.add_argument("--frames", type=positive_int, default=defaults.BENCH_DEFAULT_FRAMES)
    local.add_argument("--kind", choices=["zerocopy", "copy"], default="zerocopy")
    local.add_argument("--format", choices=["markdown", "csv"], default="markdown")
    local.add_argument("--out", default=None)

    remote = sub.add_parser("bench-remote", help="Loopback link latency per resolution")
    remote.add_argument("--resolutions", type=parse_resolutions, default=["720p", "1080p", "1440p", "2160p"])
    remote.add_argument("--frames", type=positive_int, default=defaults.BENCH_DEFAULT_FRAMES)
    remote.add_argument("--codec", choices=["raw", "rle"], default="raw")
    remote.add_argument("--addr", default=defaults.BENCH_DEFAULT_ADDRESS, help="host:port for the loopback link")
    remote.add_argument("--format", choices=["markdown", "csv"], default="markdown")
    remote.add_argument("--fill", default="constant:0", help="constant:<byte>, gradient or random:<seed>")
    remote.add_argument("--out", default=None)

    return parser


# ==================== COMMANDS ====================

def cmd_validate(args: argparse.Namespace) -> int:
    try:
        cfg = load_config(args.config)
    except ParseError as e:
        print_issues([f"{e.code}: {e}"])
        return EXIT_INVALID

    issues = validate_config(cfg)
    if issues:
        print_issues([str(issue) for issue in issues])
        return EXIT_INVALID
    print("OK")
    return EXIT_OK


def cmd_run(args: argparse.Namespace) -> int:
    if args.duration is None and args.frames is None:
        raise UsageError("run needs --duration and/or --frames")

    try:
        cfg = load_config(args.config)
    except ParseError as e:
        print_issues([f"{e.code}: {e}"])
        return EXIT_INVALID

    role = Role(args.role.upper())
    logging.info(f"🚀 Step 1: Instantiating '{cfg.name or args.config}' as {role.value}")
    try:
        pipeline = instantiate(cfg, role)
    except ConfigInvalid as e:
        print_issues([str(issue) for issue in e.issues])
        return EXIT_INVALID
    except XRPipeError as e:
        logging.error(f"❌ Link setup failed: {str(e)}")
        print_issues([f"{e.code}: {e}"])
        return EXIT_INVALID

    logging.info("▶️  Step 2: Running")
    with pipeline:
        report = pipeline.run_for(duration=args.duration, frames=args.frames)

    emit(report.render_text(), args.out)
    return EXIT_OK if report.ok else EXIT_INVALID


def cmd_bench_local(args: argparse.Namespace) -> int:
    table = bench_local(args.resolutions, frames=args.frames, kind=ChannelKind(args.kind.upper()))
    emit(render_table(table, TableFormat(args.format.upper())), args.out)
    return EXIT_OK


def cmd_bench_remote(args: argparse.Namespace) -> int:
    table = bench_remote(
        args.resolutions,
        frames=args.frames,
        codec=CodecId(args.codec.upper()),
        address=args.addr,
        fill=args.fill,
    )
    emit(render_table(table, TableFormat(args.format.upper())), args.out)
    return EXIT_OK


COMMANDS = {
    "validate": cmd_validate,
    "run": cmd_run,
    "bench-local": cmd_bench_local,
    "bench-remote": cmd_bench_remote,
}


def main(argv: Optional[List[str]] = None) -> int:
    try:
        settings = get_settings()
    except ValidationError:
        print(f"xrpipe: error: XRPIPE_LOG must be one of {', '.join(LOG_LEVELS)}", file=sys.stderr)
        return EXIT_USAGE
    configure_logging(settings)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK

    try:
        return COMMANDS[args.command](args)
    except (UsageError, InvalidArgument, ValidationError) as e:
        message = str(e).splitlines()[0]
        print(f"xrpipe {args.command}: error: {message}", file=sys.stderr)
        return EXIT_USAGE
    except XRPipeError as e:
        logging.error(f"❌ {args.command} failed: {str(e)}")
        logging.debug(traceback.format_exc())
        print_issues([f"{e.code}: {e}"])
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
