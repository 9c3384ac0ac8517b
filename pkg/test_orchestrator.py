#!/usr/bin/env python3
"""
End-to-end runs against the simulated legacy host with scripted model
replies: the three-step success, the longer search without success cases,
and the ways a run can stop short.
"""

import json
from pathlib import Path

import pytest

from app.models.ptt import find_task, parse_ptt, serialize_ptt
from app.services.llm_gateway import ScriptedBackend, ledger_from_events, load_transcript
from app.services.orchestrator import Orchestrator, make_run_id
from app.services.reporting import EVENTS_FILE, LEDGER_CSV_FILE, PTT_FILE, REPORT_JSON_FILE, REPORT_MD_FILE, load_report
from app.utils.clock import VirtualClock
from app.utils.events import EventLog, read_events
from app.utils.types import AbortReason, ExitClass, LlmRole, Module, RunConfig, RunStatus, TaskStatus
from conftest import CORPORA, SCENARIO_PATH, START, TRANSCRIPTS

WITH_CASES = TRANSCRIPTS / "with_success_cases.jsonl"
WITHOUT_CASES = TRANSCRIPTS / "without_success_cases.jsonl"


def expansion(*titles: str) -> tuple:
    tasks = [{"title": t, "detail": f"{t} on 10.10.10.4.", "origin": {"reason": "Starting point."}} for t in titles]
    return (LlmRole.PlannerExpand, {"parent_id": "1", "tasks": tasks})


NO_DUPLICATES = (LlmRole.TaskDedup, {"duplicate_indices": [], "reason": ""})


@pytest.fixture
def run_with(tmp_path, settings, rag):
    def start(transcripts=WITH_CASES, backend=None, scenario_path=SCENARIO_PATH, **overrides):
        config = RunConfig(
            target_rhost="10.10.10.4",
            scenario_path=scenario_path,
            transcripts_path=transcripts,
            corpora_dir=CORPORA,
            index_dir=tmp_path / "index",
            out_dir=tmp_path / "runs",
            **overrides,
        )
        orchestrator = Orchestrator(config, settings, clock=VirtualClock(START), backend=backend, rag=rag)
        return orchestrator.run()

    return start


def test_success_cases_reach_a_shell_in_three_steps(run_with):
    report = run_with()

    assert report.outcome is RunStatus.SUCCESS
    assert report.steps == 3
    assert "ms17_010_eternalblue" in report.shell_command
    assert "set RHOST 10.10.10.4" in report.shell_command
    assert report.elapsed_sec == pytest.approx(115.0)
    assert report.failure is None
    assert report.ptt.metadata.status is RunStatus.SUCCESS
    assert report.summary.startswith("Shell obtained on 10.10.10.4")

    exploit = find_task(report.ptt, "1.1.1.1")
    assert exploit.status is TaskStatus.completed
    assert [r.timeout_sec for r in exploit.act_results] == [30, 60]


def test_time_is_fully_accounted(run_with):
    report = run_with()
    breakdown = report.time_breakdown

    assert set(breakdown) == set(Module)
    assert sum(breakdown.values()) == pytest.approx(report.elapsed_sec)
    assert breakdown[Module.ActExecution] == pytest.approx(115.0)
    assert breakdown[Module.Overhead] == pytest.approx(0.0)


def test_injected_delays_stretch_the_run(tmp_path, settings, rag):
    clock = VirtualClock(START)
    entries = [entry.model_copy(update={"delay_ms": 2000}) for entry in load_transcript(WITH_CASES)]
    config = RunConfig(
        target_rhost="10.10.10.4",
        scenario_path=SCENARIO_PATH,
        transcripts_path=WITH_CASES,
        out_dir=tmp_path,
        corpora_dir=CORPORA,
    )
    report = Orchestrator(config, settings, clock=clock, backend=ScriptedBackend(entries, clock=clock), rag=rag).run()
    attempts = sum(cost.attempts for cost in report.ledger.roles)

    assert report.outcome is RunStatus.SUCCESS
    assert report.elapsed_sec == pytest.approx(115.0 + 2.0 * attempts)
    assert report.time_breakdown[Module.Overhead] == pytest.approx(2.0)
    assert report.time_breakdown[Module.RePlanner] > 0
    assert sum(report.time_breakdown.values()) == pytest.approx(report.elapsed_sec)


def test_without_success_cases_the_search_is_longer(run_with):
    report = run_with(transcripts=WITHOUT_CASES, success_cases_enabled=False)

    assert report.outcome is RunStatus.SUCCESS
    assert report.steps == 8
    assert "ms17_010_eternalblue" in report.shell_command
    assert find_task(report.ptt, "1.1.1").status is TaskStatus.failed
    assert report.time_breakdown[Module.ReL2SuccessCases] == 0.0


def test_step_budget_ends_in_failure(run_with):
    report = run_with(transcripts=WITHOUT_CASES, success_cases_enabled=False, max_steps=4)

    assert report.outcome is RunStatus.FAILURE
    assert report.steps == 4
    assert report.shell_command is None
    assert "Step budget of 4" in report.failure.message
    assert report.ptt.metadata.status is RunStatus.FAILURE


def test_missing_tool_aborts_the_run(run_with, write_transcript):
    transcript = write_transcript([
        expansion("Scan the web server"),
        NO_DUPLICATES,
        (LlmRole.CommandGen, {"command": "nikto -h 10.10.10.4"}),
    ])
    report = run_with(transcripts=transcript)

    assert report.outcome is RunStatus.ABORTED
    assert report.steps == 1
    assert report.failure.reason is AbortReason.FailFast
    assert report.failure.task_id == "1.1"
    assert report.failure.command == "nikto -h 10.10.10.4"
    assert report.failure.exit_class is ExitClass.COMMAND_NOT_FOUND
    # No ReportGen reply was scripted, so the plain summary is used.
    assert report.summary.startswith("Run ended ABORTED after 1 expansion step(s)")


def test_wall_clock_budget_interrupts_the_command(run_with):
    report = run_with(max_wall_sec=5)

    assert report.outcome is RunStatus.ABORTED
    assert report.failure.reason is AbortReason.WallClock
    assert report.failure.command == "nmap -p- -T4 -Pn 10.10.10.4"
    assert report.elapsed_sec == pytest.approx(5.0)
    assert find_task(report.ptt, "1.1").status is TaskStatus.failed


def test_selecting_a_parent_task_aborts(run_with, write_transcript):
    transcript = write_transcript([
        expansion("Full TCP port scan", "Web directory brute force"),
        NO_DUPLICATES,
        (LlmRole.Prioritize, {"task_id": "1", "reason": "root"}),
    ])
    report = run_with(transcripts=transcript)

    assert report.outcome is RunStatus.ABORTED
    assert report.failure.reason is AbortReason.NonLeafSelected
    assert report.steps == 1


def test_lenient_prioritizer_runs_the_first_leaf_instead(run_with, write_transcript):
    transcript = write_transcript([
        expansion("Web directory brute force", "Full TCP port scan"),
        NO_DUPLICATES,
        (LlmRole.Prioritize, {"task_id": "1", "reason": "root"}),
        (LlmRole.CommandGen, {"command": "gobuster dir -u http://10.10.10.4/ -w /usr/share/wordlists/dirb/common.txt"}),
    ])
    report = run_with(transcripts=transcript, lenient_prioritizer=True)

    assert report.failure.reason is AbortReason.FailFast
    assert report.failure.task_id == "1.1"


def test_run_directory_holds_every_artifact(run_with, settings):
    report = run_with()
    run_dir = Path(report.run_dir)

    assert report.run_id == make_run_id(START, "10.10.10.4") == "20250213T220152Z-10.10.10.4"
    for name in (PTT_FILE, EVENTS_FILE, REPORT_JSON_FILE, REPORT_MD_FILE, LEDGER_CSV_FILE):
        assert (run_dir / name).is_file(), name

    saved = parse_ptt((run_dir / PTT_FILE).read_bytes())
    assert serialize_ptt(saved) == serialize_ptt(report.ptt)

    events = read_events(run_dir / EVENTS_FILE)
    assert events[0].kind == "run_started" and events[-1].kind == "run_finished"
    assert [e.seq for e in events] == list(range(len(events)))
    assert ledger_from_events(events, settings.prices) == report.ledger
    assert sum(cost.dollars for cost in report.ledger.roles) == pytest.approx(report.ledger.total_dollars, abs=1e-9)
    assert sum(cost.dollars for cost in report.ledger.modules) == pytest.approx(report.ledger.total_dollars, abs=1e-9)
    assert report.ledger.total_calls == len([e for e in events if e.kind == "llm_call"])


def test_index_is_built_when_no_store_is_given(tmp_path, settings):
    config = RunConfig(
        target_rhost="10.10.10.4",
        scenario_path=SCENARIO_PATH,
        transcripts_path=WITH_CASES,
        corpora_dir=CORPORA,
        index_dir=tmp_path / "index",
        out_dir=tmp_path / "runs",
    )
    report = Orchestrator(config, settings, clock=VirtualClock(START)).run()

    assert report.outcome is RunStatus.SUCCESS
    assert any((tmp_path / "index").iterdir())


def test_runs_started_in_the_same_second_keep_separate_directories(run_with):
    first = run_with()
    first_log = (Path(first.run_dir) / EVENTS_FILE).read_text(encoding="utf-8")
    second = run_with()

    assert first.run_id == "20250213T220152Z-10.10.10.4"
    assert second.run_id == "20250213T220152Z-10.10.10.4-2"
    assert Path(second.run_dir).name == second.run_id
    assert (Path(first.run_dir) / EVENTS_FILE).read_text(encoding="utf-8") == first_log
    assert load_report(Path(first.run_dir)).run_id == first.run_id


def test_event_log_never_truncates_an_existing_file(tmp_path, clock):
    path = tmp_path / EVENTS_FILE
    path.write_text('{"seq": 0}\n', encoding="utf-8")

    with pytest.raises(FileExistsError):
        EventLog(clock, path)
    assert path.read_text(encoding="utf-8") == '{"seq": 0}\n'


@pytest.mark.parametrize(
    "overrides",
    [
        {},
        {"transcripts": WITHOUT_CASES, "success_cases_enabled": False},
        {"max_wall_sec": 5},
    ],
)
def test_every_task_moves_forward_through_its_statuses(run_with, overrides):
    report = run_with(**overrides)
    changes: dict[str, list[tuple[str, str]]] = {}
    for event in read_events(Path(report.run_dir) / EVENTS_FILE):
        if event.kind == "status_changed":
            changes.setdefault(event.payload["task_id"], []).append((event.payload["old"], event.payload["new"]))

    assert changes
    for task_id, steps in changes.items():
        assert steps[0] == ("pending", "in_progress"), task_id
        assert len(steps) == 2, task_id
        assert steps[1][0] == "in_progress" and steps[1][1] in ("completed", "failed"), task_id
        assert find_task(report.ptt, task_id).status.value == steps[1][1]


def test_slow_target_runs_out_of_wall_clock(run_with, write_transcript, tmp_path):
    slow = tmp_path / "slow.scenario.json"
    slow.write_text(
        json.dumps({"name": "slow", "rules": [{"match": ".*", "stdout": "still working\n", "delay_ms": 2000}]}),
        encoding="utf-8",
    )
    transcript = write_transcript([
        expansion("Full TCP port scan"),
        NO_DUPLICATES,
        (LlmRole.CommandGen, {"command": "nmap -p- 10.10.10.4"}),
        (LlmRole.LogClassify, {"exit_class": "OTHERS", "reason": ""}),
        (LlmRole.LogSummarize, {"summary": "No ports reported yet."}),
        (LlmRole.CommandGen, {"command": "nmap -p 1-1000 10.10.10.4"}),
        (LlmRole.LogClassify, {"exit_class": "OTHERS", "reason": ""}),
        (LlmRole.LogSummarize, {"summary": "No ports reported yet."}),
        (LlmRole.CommandGen, {"command": "nmap -F 10.10.10.4"}),
    ])
    report = run_with(transcripts=transcript, scenario_path=slow, max_wall_sec=5)

    assert report.outcome is RunStatus.ABORTED
    assert report.failure.reason is AbortReason.WallClock
    assert report.failure.command == "nmap -F 10.10.10.4"
    assert 5.0 <= report.elapsed_sec <= 5.5
