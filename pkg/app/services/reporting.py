"""Run reports: per-module time breakdown, markdown/JSON/CSV rendering and replay."""

import json
import logging
from pathlib import Path
from typing import Iterable, Optional

import pandas as pd
from pydantic import ValidationError

from app.models.ptt import parse_ptt, render_tree, serialize_ptt
from app.services.llm_gateway import ledger_from_events
from app.utils.config import PriceTable
from app.utils.errors import CorruptLog, PentestError
from app.utils.events import read_events
from app.utils.types import Event, FailureDetail, Module, ReportDocument, RunReport, RunStatus

logger = logging.getLogger(__name__)

PTT_FILE = "ptt.json"
EVENTS_FILE = "events.jsonl"
REPORT_JSON_FILE = "report.json"
REPORT_MD_FILE = "report.md"
LEDGER_CSV_FILE = "ledger.csv"

SPAN_MODULES = [m for m in Module if m is not Module.Overhead]


def time_breakdown(events: Iterable[Event]) -> dict[Module, float]:
    """Seconds spent in each module; whatever no span covers is Overhead.

    Raises:
        CorruptLog: a span is malformed, spans overlap, or the log has
            events but no ``run_finished``.
    """
    events = list(events)
    if not events:
        return {module: 0.0 for module in Module}

    # Run length comes from run_finished
    finished = [e for e in events if e.kind == "run_finished"]
    if not finished:
        raise CorruptLog("event log has no run_finished event")
    elapsed_ms = int(finished[-1].payload.get("elapsed_ms", finished[-1].wall_ms))

    # Collect spans in log order; each must start after the previous one ends
    rows = []
    last_end = 0
    for event in events:
        if event.kind != "span":
            continue
        try:
            module = Module(event.payload["module"])
            start_ms, end_ms = int(event.payload["start_ms"]), int(event.payload["end_ms"])
        except (KeyError, ValueError, TypeError) as e:
            raise CorruptLog(f"malformed span event {event.seq}: {e}") from e
        if module is Module.Overhead or end_ms < start_ms:
            raise CorruptLog(f"span event {event.seq} is not a valid interval for {module.value}")
        if start_ms < last_end:
            raise CorruptLog(f"span event {event.seq} overlaps the previous span")
        last_end = end_ms
        rows.append({"module": module.value, "ms": end_ms - start_ms})

    if last_end > elapsed_ms:
        raise CorruptLog(f"spans run to {last_end} ms, past the run's end at {elapsed_ms} ms")

    # Sum per module
    frame = pd.DataFrame(rows, columns=["module", "ms"])
    per_module = frame.groupby("module")["ms"].sum().reindex([m.value for m in SPAN_MODULES], fill_value=0)

    breakdown = {Module(name): int(ms) / 1000.0 for name, ms in per_module.items()}
    # Overhead is the uncovered remainder
    breakdown[Module.Overhead] = (elapsed_ms - int(per_module.sum())) / 1000.0
    return breakdown


def chart_frame(report: RunReport) -> pd.DataFrame:
    dollars = {cost.module: cost.dollars for cost in report.ledger.modules}
    return pd.DataFrame(
        [
            {"module": module.value, "seconds": report.time_breakdown.get(module, 0.0), "dollars": dollars.get(module, 0.0)}
            for module in Module
        ],
        columns=["module", "seconds", "dollars"],
    )


def failure_narrative(report: RunReport) -> Optional[str]:
    failure = report.failure
    if report.outcome is RunStatus.SUCCESS or failure is None:
        return None
    parts = [f"The run ended {report.outcome.value}"]
    if failure.reason is not None:
        parts[0] += f" ({failure.reason.value})"
    if failure.task_id is not None:
        parts[0] += f" on task {failure.task_id}"
    narrative = parts[0] + "."
    if failure.command is not None:
        narrative += f" The offending command was `{failure.command}`"
        narrative += f", classified {failure.exit_class.value}." if failure.exit_class is not None else "."
    if failure.message:
        narrative += f" {failure.message}"
    return narrative


def render_markdown(report: RunReport) -> str:
    meta = report.ptt.metadata
    lines = [
        f"# Penetration test report: {meta.rhost}",
        "",
        f"**Outcome: {report.outcome.value}**",
        "",
        f"- Run: `{report.run_id}`",
        f"- Target: {meta.rhost}" + (f" ({meta.target.description})" if meta.target.description else ""),
        f"- Attacker: {meta.lhost}",
        f"- Expansion steps: {report.steps}",
        f"- Elapsed: {report.elapsed_sec:.3f} s",
        f"- LLM cost: ${report.ledger.total_dollars:.6f} over {report.ledger.total_calls} call(s)",
        "",
    ]

    if report.shell_command is not None:
        lines += ["## Shell obtained with", "", "```sh", report.shell_command, "```", ""]

    if (narrative := failure_narrative(report)) is not None:
        lines += ["## Failure", "", narrative, ""]

    if report.summary:
        lines += ["## Summary", "", report.summary, ""]

    lines += ["## Task tree", "", render_tree(report.ptt), ""]

    lines += [
        "## Time and cost by module",
        "",
        "| Module | Seconds | Share | LLM calls | Tokens in | Tokens out | Dollars |",
        "|---|---:|---:|---:|---:|---:|---:|",
    ]
    costs = {cost.module: cost for cost in report.ledger.modules}
    for module in Module:
        seconds = report.time_breakdown.get(module, 0.0)
        share = report.time_share.get(module, 0.0)
        cost = costs.get(module)
        calls, tin, tout, dollars = (cost.calls, cost.tokens_in, cost.tokens_out, cost.dollars) if cost else (0, 0, 0, 0.0)
        lines.append(f"| {module.value} | {seconds:.3f} | {share:.1f}% | {calls} | {tin} | {tout} | {dollars:.6f} |")

    lines += [
        "",
        "## Cost by role",
        "",
        "| Role | Module | Calls | Attempts | Tokens in | Tokens out | Dollars |",
        "|---|---|---:|---:|---:|---:|---:|",
    ]
    for cost in report.ledger.roles:
        if cost.calls:
            lines.append(
                f"| {cost.role.value} | {cost.module.value} | {cost.calls} | {cost.attempts} | "
                f"{cost.tokens_in} | {cost.tokens_out} | {cost.dollars:.6f} |"
            )
    return "\n".join(lines) + "\n"


def render_report(report: RunReport) -> ReportDocument:
    """Markdown body, JSON twin and chart CSV for one run; byte-stable for a given report."""
    return ReportDocument(
        markdown=render_markdown(report),
        json_text=report.model_dump_json(indent=2, by_alias=True) + "\n",
        chart_csv=chart_frame(report).to_csv(index=False, float_format="%.6f", lineterminator="\n"),
    )


def write_report(report: RunReport, run_dir: Path) -> ReportDocument:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    document = render_report(report)
    (run_dir / PTT_FILE).write_text(serialize_ptt(report.ptt) + "\n", encoding="utf-8")
    (run_dir / REPORT_JSON_FILE).write_text(document.json_text, encoding="utf-8")
    (run_dir / REPORT_MD_FILE).write_text(document.markdown, encoding="utf-8")
    (run_dir / LEDGER_CSV_FILE).write_text(document.chart_csv, encoding="utf-8")
    logger.info(f"Report written to {run_dir}")
    return document


def load_report(run_dir: Path) -> RunReport:
    """Read the JSON twin of a finished run."""
    path = Path(run_dir) / REPORT_JSON_FILE
    if not path.is_file():
        raise CorruptLog(f"no {REPORT_JSON_FILE} in {run_dir}")
    try:
        return RunReport.model_validate_json(path.read_text(encoding="utf-8"))
    except ValidationError as e:
        raise CorruptLog(f"{path}: {e.errors()[0]['msg']}") from e


def replay_report(run_dir: Path, prices: PriceTable) -> tuple[RunReport, list[Event]]:
    """Rebuild a run's report from ``events.jsonl`` and ``ptt.json`` alone."""
    run_dir = Path(run_dir)
    events = read_events(run_dir / EVENTS_FILE)
    ptt_path = run_dir / PTT_FILE
    if not ptt_path.is_file():
        raise CorruptLog(f"no {PTT_FILE} in {run_dir}")
    try:
        ptt = parse_ptt(ptt_path.read_bytes())
    except PentestError as e:
        raise CorruptLog(f"{ptt_path}: {e}") from e

    started = [e for e in events if e.kind == "run_started"]
    finished = [e for e in events if e.kind == "run_finished"]
    if not started or not finished:
        raise CorruptLog("event log lacks run_started or run_finished")
    start, end = started[0].payload, finished[-1].payload

    try:
        report = RunReport(
            run_id=start["run_id"],
            outcome=RunStatus(end["outcome"]),
            shell_command=end.get("shell_command"),
            steps=len([e for e in events if e.kind == "plan_step"]),
            elapsed_sec=int(end["elapsed_ms"]) / 1000.0,
            failure=FailureDetail.model_validate(end["failure"]) if end.get("failure") else None,
            summary=end.get("summary", ""),
            time_breakdown=time_breakdown(events),
            ledger=ledger_from_events(events, prices),
            ptt=ptt,
            run_dir=start.get("run_dir", str(run_dir)),
            event_log_path=start.get("event_log_path", str(run_dir / EVENTS_FILE)),
        )
    except (KeyError, ValueError) as e:
        raise CorruptLog(f"run events are incomplete: {e}") from e
    return report, events


def format_timeline(events: Iterable[Event]) -> str:
    """One line per event, for operators reading a replay."""
    lines = []
    for event in events:
        if event.kind == "span":
            continue
        payload = {k: v for k, v in event.payload.items() if k not in {"response", "log_summary"}}
        lines.append(f"{event.wall_ms / 1000:>9.3f}s  {event.kind:<16} {json.dumps(payload, ensure_ascii=False, sort_keys=True)}")
    return "\n".join(lines)
