"""Command-line entry point: run, ingest, report and replay."""

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from pydantic import ValidationError

from app.services.orchestrator import Orchestrator
from app.services.rag_store import RagStore
from app.services.reporting import load_report, format_timeline, replay_report, write_report
from app.services.simlab import resolve_scenario
from app.utils.config import AppSettings, load_settings
from app.utils.errors import ConfigError, PentestError, ScenarioError
from app.utils.types import RunConfig, RunStatus

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_FAILURE = 2
EXIT_ABORTED = 3
EXIT_USAGE = 64

OUTCOME_EXIT_CODES: dict[RunStatus, int] = {
    RunStatus.SUCCESS: EXIT_OK,
    RunStatus.FAILURE: EXIT_FAILURE,
    RunStatus.ABORTED: EXIT_ABORTED,
}

TRANSCRIPTS_DIR = Path("transcripts")
SCENARIOS_DIR = Path("scenarios")


class PentestArgumentParser(argparse.ArgumentParser):
    """argparse with usage errors mapped to exit code 64."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def configure_logging(level: str) -> None:
    logging.basicConfig(format='%(asctime)s - %(name)s - %(levelname)s - %(message)s')
    logging.getLogger().setLevel(getattr(logging, level.upper(), logging.INFO))


def resolve_transcripts(value: Optional[str]) -> Optional[Path]:
    """A bundled transcript name (``with_success_cases``) or a file path."""
    if value is None:
        return None
    candidate = Path(value)
    if candidate.is_file():
        return candidate
    bundled = TRANSCRIPTS_DIR / f"{value}.jsonl"
    return bundled if bundled.is_file() else candidate


def build_run_config(args: argparse.Namespace) -> RunConfig:
    """Translate ``run`` flags into a validated RunConfig."""
    executor = "real" if args.allow_real_exec and args.sim is None else "sim"
    model = args.model or ("scripted" if args.transcripts else "remote")
    try:
        scenario_path = resolve_scenario(args.sim, SCENARIOS_DIR) if args.sim else None
    except ScenarioError as e:
        raise ConfigError(str(e)) from e
    try:
        return RunConfig(
            target_rhost=args.target,
            attacker_lhost=args.lhost,
            target_description=args.description,
            success_cases_enabled=not args.no_success_cases,
            max_steps=args.max_steps,
            max_wall_sec=args.max_wall_secs,
            executor=executor,
            model=model,
            lenient_prioritizer=args.lenient_prioritizer,
            allow_real_exec=args.allow_real_exec,
            allow_remote_with_sim=args.allow_remote_sim,
            target_cidr=args.target_cidr,
            scenario_path=scenario_path,
            transcripts_path=resolve_transcripts(args.transcripts),
            corpora_dir=Path(args.corpora),
            index_dir=Path(args.index),
            out_dir=Path(args.out),
            workdir=Path(args.workdir) if args.workdir else None,
        )
    except ValidationError as e:
        first = e.errors()[0]
        where = ".".join(str(p) for p in first["loc"])
        raise ConfigError(f"{where + ': ' if where else ''}{first['msg']}") from e


def cmd_run(args: argparse.Namespace, settings: AppSettings) -> int:
    try:
        config = build_run_config(args)
        orchestrator = Orchestrator(config, settings)
    except (ConfigError, ScenarioError) as e:
        logger.error(f"Invalid run configuration: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE

    report = orchestrator.run()
    print(f"{report.outcome.value}: {report.steps} step(s), {report.elapsed_sec:.3f} s, report in {report.run_dir}")
    if report.shell_command is not None:
        print(f"shell command: {report.shell_command}")
    return OUTCOME_EXIT_CODES[report.outcome]


def cmd_ingest(args: argparse.Namespace, settings: AppSettings) -> int:
    try:
        store = RagStore(Path(args.index))
        summary = store.ingest(Path(args.dir), args.corpus)
    except PentestError as e:
        logger.error(f"Ingestion failed: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR
    print(f"{summary.corpus.value}: {summary.doc_count} document(s), {summary.token_count} token(s), {summary.added} new, {summary.removed} removed")
    return EXIT_OK


def cmd_report(args: argparse.Namespace, settings: AppSettings) -> int:
    try:
        report = load_report(Path(args.run_dir))
        document = write_report(report, Path(args.run_dir))
    except PentestError as e:
        logger.error(f"Cannot render report: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR
    sys.stdout.write(document.markdown)
    return EXIT_OK


def cmd_replay(args: argparse.Namespace, settings: AppSettings) -> int:
    try:
        report, events = replay_report(Path(args.run_dir), settings.prices)
        document = write_report(report, Path(args.run_dir))
    except PentestError as e:
        logger.error(f"Cannot replay run: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR
    print(format_timeline(events))
    print()
    sys.stdout.write(document.markdown)
    return EXIT_OK


def build_parser() -> PentestArgumentParser:
    parser = PentestArgumentParser(prog="pentest", description="Autonomous IP-to-Shell penetration-testing orchestrator.")
    parser.add_argument("--config", help="TOML settings file (prices, endpoint, timeouts)")
    parser.add_argument("--log-level", help="override the configured log level")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=PentestArgumentParser)

    run = sub.add_parser("run", help="attack one target until a shell, a dead end or an abort")
    run.add_argument("--target", required=True, help="target IPv4 address (RHOST)")
    run.add_argument("--lhost", help="attacker IPv4 address for callbacks")
    run.add_argument("--description", default="", help="free-text note stored with the target")
    run.add_argument("--sim", metavar="SCENARIO", help="simulated target: bundled scenario name or file")
    run.add_argument("--allow-real-exec", action="store_true", help="run commands on this host for real")
    run.add_argument("--target-cidr", help="range real commands may touch; must contain the target")
    run.add_argument("--no-success-cases", action="store_true", help="skip success-case task generation")
    run.add_argument("--transcripts", help="scripted model replies: bundled name or JSONL file")
    run.add_argument("--model", choices=["remote", "scripted"])
    run.add_argument("--allow-remote-sim", action="store_true", help="allow the remote model against a simulated target")
    run.add_argument("--lenient-prioritizer", action="store_true", help="fall back to the first runnable task on a bad pick")
    run.add_argument("--max-steps", type=int, default=30)
    run.add_argument("--max-wall-secs", type=float, default=1200)
    run.add_argument("--corpora", default="corpora", help="directory holding techniques/ and success_cases/")
    run.add_argument("--index", default="index", help="retrieval index directory")
    run.add_argument("--workdir", help="working directory for real commands")
    run.add_argument("--out", default="runs", help="parent directory of run directories")
    run.set_defaults(handler=cmd_run)

    ingest = sub.add_parser("ingest", help="index a corpus directory")
    ingest.add_argument("dir")
    ingest.add_argument("--corpus", required=True, choices=["techniques", "success_cases"])
    ingest.add_argument("--index", default="index")
    ingest.set_defaults(handler=cmd_ingest)

    report = sub.add_parser("report", help="re-render the report of a finished run")
    report.add_argument("run_dir")
    report.set_defaults(handler=cmd_report)

    replay = sub.add_parser("replay", help="rebuild a run's report from its event log")
    replay.add_argument("run_dir")
    replay.set_defaults(handler=cmd_replay)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_USAGE

    try:
        settings = load_settings(Path(args.config) if args.config else None)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    configure_logging(args.log_level or settings.log_level)
    logger.info(f"Starting {settings.service_name} v{settings.service_version}: {args.command}")

    return args.handler(args, settings)


if __name__ == "__main__":
    sys.exit(main())
