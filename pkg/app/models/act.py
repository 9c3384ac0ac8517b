"""Act module: command generation, execution, log analysis and the feedback loop.

A task gets at most ``max_attempts`` commands. After a timeout the model is
asked for a faster alternative; when it has none the same command is rerun
with the timeout doubled. A missing command or file ends the whole run.
"""

import logging
import re
from contextlib import nullcontext
from dataclasses import dataclass, field
from typing import Optional

from app.models.ptt import claim_task, find_task, record_act_result, set_status
from app.services.executor import CommandExecutor, argv0
from app.services.llm_gateway import LlmGateway
from app.services.rag_store import RagStore
from app.utils.clock import Clock
from app.utils.config import AppSettings
from app.utils.events import EventLog
from app.utils.types import (
    FAIL_FAST_CLASSES,
    PTT,
    AbortReason,
    ActResult,
    Classification,
    CommandSpec,
    CommandSuggestion,
    Corpus,
    EnvMetadata,
    ExitClass,
    LlmRole,
    LogDigest,
    LogVerdict,
    Module,
    RagHit,
    RawOutcome,
    TaskNode,
    TaskStatus,
)

logger = logging.getLogger(__name__)

NO_EVIDENCE_SUMMARY = "The command produced no usable output."
TECHNIQUE_EXCERPT_CHARS = 2000
LOG_EXCERPT_CHARS = 8000

_NOT_FOUND_RE = re.compile(r"command not found")
_NO_FILE_RE = re.compile(r"No such file or directory")


@dataclass(slots=True)
class TaskRun:
    """What one ``run_task`` call did to a task."""
    ptt: PTT
    task_id: str
    status: TaskStatus
    results: list[ActResult] = field(default_factory=list)
    abort: Optional[AbortReason] = None
    shell_command: Optional[str] = None
    interrupted_command: Optional[str] = None

    @property
    def last_result(self) -> Optional[ActResult]:
        return self.results[-1] if self.results else None


def _first_line(text: str) -> str:
    return next((line.strip() for line in text.splitlines() if line.strip()), "")


def _tail(text: str, limit: int = LOG_EXCERPT_CHARS) -> str:
    return text if len(text) <= limit else "[...]\n" + text[-limit:]


def format_history(history: list[ActResult]) -> str:
    if not history:
        return "none"
    return "\n".join(
        f"attempt {i}: `{r.command}` (timeout {r.timeout_sec}s) -> {r.exit_class.value}: {r.log_summary or 'no output'}"
        for i, r in enumerate(history, start=1)
    )


def format_techniques(hits: list[RagHit]) -> str:
    if not hits:
        return "none"
    return "\n\n".join(
        f"### {hit.doc.title} ({hit.doc.source_path})\n{hit.doc.body[:TECHNIQUE_EXCERPT_CHARS]}" for hit in hits
    )


class ActEngine:
    """Runs leaf tasks against an executor and records every attempt in the tree."""

    def __init__(
        self,
        gateway: LlmGateway,
        executor: CommandExecutor,
        settings: AppSettings,
        rag: Optional[RagStore] = None,
        events: Optional[EventLog] = None,
        clock: Optional[Clock] = None,
    ):
        self.gateway = gateway
        self.executor = executor
        self.settings = settings
        self.rag = rag
        self.events = events
        self.clock = clock if clock is not None else (events.clock if events is not None else None)
        self.shell_markers = [re.compile(p) for p in settings.shell_markers]

    def _span(self, module: Module):
        return self.events.span(module) if self.events is not None else nullcontext()

    def _emit(self, kind: str, **payload) -> None:
        if self.events is not None:
            self.events.emit(kind, **payload)

    # ---- generation -----------------------------------------------------------

    def technique_hits(self, task: TaskNode) -> list[RagHit]:
        if self.rag is None:
            return []
        return self.rag.query(Corpus.techniques, f"{task.title} {task.detail}", k=self.settings.techniques_k)

    def generate_command(
        self,
        task: TaskNode,
        env: EnvMetadata,
        history: list[ActResult],
        hits: list[RagHit],
    ) -> CommandSpec:
        """Next command for ``task`` given what was already tried.

        Timeouts never shrink within a task. After a TIMEOUT, a reply without
        an alternative (or repeating the timed-out command) reruns the same
        command with the timeout doubled, up to the configured ceiling.
        """
        previous = history[-1] if history else None
        after_timeout = previous is not None and previous.exit_class is ExitClass.TIMEOUT

        if after_timeout:
            timeout_note = (
                f"The previous command timed out after {previous.timeout_sec} seconds. Propose a faster alternative "
                'that reaches the same goal. If there is none, repeat the previous command and set "alternative_found" to false.'
            )
        elif previous is not None:
            timeout_note = "The previous attempt did not give sufficient evidence. Try a different approach."
        else:
            timeout_note = ""

        suggestion = self.gateway.complete_structured(
            LlmRole.CommandGen,
            {
                "task_id": task.id,
                "task_title": task.title,
                "task_detail": task.detail,
                "rhost": env.rhost,
                "lhost": env.lhost,
                "timeout_sec": previous.timeout_sec if previous else self.settings.default_timeout_sec,
                "history": format_history(history),
                "timeout_note": timeout_note,
                "techniques": format_techniques(hits),
            },
            CommandSuggestion,
        )
        command = suggestion.command.strip()
        attempt = len(history) + 1

        if previous is None:
            return CommandSpec(
                command=command,
                timeout_sec=self.settings.timeout_for(command),
                attempt=attempt,
                rationale=suggestion.rationale,
            )

        if after_timeout and (not suggestion.alternative_found or command == previous.command):
            timeout = min(previous.timeout_sec * 2, max(self.settings.max_timeout_sec, previous.timeout_sec))
            logger.info(f"No faster alternative for task {task.id}; rerunning with timeout {timeout}s")
            return CommandSpec(command=previous.command, timeout_sec=timeout, attempt=attempt, rationale=suggestion.rationale)

        timeout = max(previous.timeout_sec, self.settings.timeout_for(command))
        return CommandSpec(command=command, timeout_sec=timeout, attempt=attempt, rationale=suggestion.rationale)

    # ---- analysis -------------------------------------------------------------

    def detect_shell(self, outcome: RawOutcome) -> bool:
        text = f"{outcome.stdout}\n{outcome.stderr}"
        return any(marker.search(text) for marker in self.shell_markers)

    def classify(self, outcome: RawOutcome, spec: CommandSpec, task: Optional[TaskNode] = None) -> Classification:
        """Exit class and summary for one outcome.

        Timeouts and missing resources are decided without the model, as is
        a detected shell. Everything else goes to LogClassify and then
        LogSummarize.
        """
        if outcome.timed_out:
            return Classification(ExitClass.TIMEOUT, f"Killed after {spec.timeout_sec} s without completing.")

        logs = f"{outcome.stdout}\n{outcome.stderr}"
        if outcome.exit_code == 127 or _NOT_FOUND_RE.search(logs):
            detail = _first_line(outcome.stderr) or argv0(spec.command)
            return Classification(ExitClass.COMMAND_NOT_FOUND, f"Command not found: {detail}")
        if _NO_FILE_RE.search(logs):
            line = next(l.strip() for l in logs.splitlines() if _NO_FILE_RE.search(l))
            return Classification(ExitClass.FILE_NOT_FOUND, f"Missing file: {line}")

        if not logs.strip():
            exit_class = ExitClass.SUCCESS if outcome.exit_code == 0 else ExitClass.OTHERS
            return Classification(exit_class, NO_EVIDENCE_SUMMARY)

        shell = self.detect_shell(outcome)
        if shell:
            exit_class = ExitClass.SUCCESS
            logger.info(f"Shell marker found in output of: {spec.command}")
        else:
            verdict = self.gateway.complete_structured(
                LlmRole.LogClassify,
                {
                    "task_title": task.title if task is not None else "",
                    "command": spec.command,
                    "exit_code": outcome.exit_code,
                    "stdout": _tail(outcome.stdout) or "(empty)",
                    "stderr": _tail(outcome.stderr) or "(empty)",
                },
                LogVerdict,
            )
            exit_class = ExitClass(verdict.exit_class)

        digest = self.gateway.complete_structured(
            LlmRole.LogSummarize,
            {
                "command": spec.command,
                "exit_class": exit_class.value,
                "stdout": _tail(outcome.stdout) or "(empty)",
                "stderr": _tail(outcome.stderr) or "(empty)",
            },
            LogDigest,
        )
        summary = digest.summary.strip() or NO_EVIDENCE_SUMMARY
        return Classification(exit_class, summary, shell_detected=shell)

    @staticmethod
    def is_conclusive(classification: Classification) -> bool:
        if classification.shell_detected:
            return True
        return classification.exit_class is ExitClass.SUCCESS and classification.log_summary != NO_EVIDENCE_SUMMARY

    # ---- feedback loop --------------------------------------------------------

    def run_task(self, ptt: PTT, task_id: str, deadline: Optional[float] = None) -> TaskRun:
        """Drive one leaf through generate, execute and classify until it settles.

        Args:
            ptt: Current tree; the task is claimed if still pending.
            task_id: Leaf to run.
            deadline: Clock reading (monotonic seconds) at which the run's
                wall budget ends.

        Returns:
            The updated tree, the task's final status and an abort signal
            when the run must stop.
        """
        if find_task(ptt, task_id).status is TaskStatus.pending:
            ptt = claim_task(ptt, task_id)
            self._emit("status_changed", task_id=task_id, old="pending", new="in_progress")

        env = ptt.metadata
        run = TaskRun(ptt=ptt, task_id=task_id, status=TaskStatus.in_progress)
        hits: Optional[list[RagHit]] = None
        max_attempts = self.settings.max_attempts

        for attempt in range(1, max_attempts + 1):
            # Stop before starting a command the budget cannot cover
            budget = self._remaining(deadline)
            if budget is not None and budget <= 0:
                return self._abort_wall_clock(run, None)

            # Generate command
            task = find_task(run.ptt, task_id)
            with self._span(Module.ActCommandGen):
                if hits is None:
                    hits = self.technique_hits(task)
                spec = self.generate_command(task, env, run.results, hits)
            self._emit("command_started", task_id=task_id, attempt=attempt, command=spec.command, timeout_sec=spec.timeout_sec)

            # Execute
            with self._span(Module.ActExecution):
                outcome = self.executor.execute(spec, budget)
            self._emit(
                "command_finished",
                task_id=task_id,
                attempt=attempt,
                exit_code=outcome.exit_code,
                timed_out=outcome.timed_out,
                duration_ms=outcome.duration_ms,
                budget_exhausted=outcome.budget_exhausted,
            )
            if outcome.budget_exhausted:
                return self._abort_wall_clock(run, spec)

            # Classify and record
            with self._span(Module.ActLogAnalysis):
                classification = self.classify(outcome, spec, task)

            fail_fast = classification.exit_class in FAIL_FAST_CLASSES
            result = ActResult(
                command=spec.command,
                timeout_sec=spec.timeout_sec,
                exit_code=outcome.exit_code,
                exit_class=classification.exit_class,
                log_summary=classification.log_summary,
            )
            run.ptt = record_act_result(
                run.ptt,
                task_id,
                result,
                conclusive=self.is_conclusive(classification),
                exhausted=fail_fast or attempt >= max_attempts,
                max_attempts=max_attempts,
            )
            run.results.append(result)
            self._emit(
                "classified",
                task_id=task_id,
                attempt=attempt,
                exit_class=classification.exit_class.value,
                shell_detected=classification.shell_detected,
                append_counter=run.ptt.append_counter(task_id),
                log_summary=classification.log_summary,
            )
            logger.info(f"Task {task_id} attempt {attempt}: {classification.exit_class.value} ({spec.command})")

            run.status = find_task(run.ptt, task_id).status
            if run.status is not TaskStatus.in_progress:
                self._emit("status_changed", task_id=task_id, old="in_progress", new=run.status.value)

            # A shell or a fail-fast class stops here
            if classification.shell_detected:
                run.shell_command = spec.command
                return run
            if fail_fast:
                logger.error(f"Fail-fast on {classification.exit_class.value}: {spec.command}")
                run.abort = AbortReason.FailFast
                return run
            if run.status is not TaskStatus.in_progress:
                return run
        return run

    def _remaining(self, deadline: Optional[float]) -> Optional[float]:
        if deadline is None or self.clock is None:
            return None
        return deadline - self.clock.monotonic()

    def _abort_wall_clock(self, run: TaskRun, spec: Optional[CommandSpec]) -> TaskRun:
        cut = f" while running: {spec.command}" if spec is not None else ""
        logger.error(f"Wall-clock budget exhausted on task {run.task_id}{cut}")
        run.ptt = set_status(run.ptt, run.task_id, TaskStatus.failed)
        self._emit("status_changed", task_id=run.task_id, old="in_progress", new="failed")
        run.status = TaskStatus.failed
        run.abort = AbortReason.WallClock
        run.interrupted_command = spec.command if spec is not None else None
        return run
