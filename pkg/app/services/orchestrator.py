"""End-to-end ReAct loop from a target IP to a shell, a dead end or an abort."""

import logging
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

from app.models.act import ActEngine, TaskRun
from app.models.planner import RePlanner
from app.models.ptt import claim_task, finish_ptt, iter_nodes, last_executed_task, new_ptt, render_tree
from app.services.executor import CommandExecutor, ShellExecutor
from app.services.llm_gateway import LlmGateway, ModelBackend, RemoteBackend, ScriptedBackend
from app.services.rag_store import RagStore, ingest_all
from app.services.reporting import EVENTS_FILE, time_breakdown, write_report
from app.services.simlab import SimExecutor, load_scenario
from app.utils.clock import Clock, SystemClock, VirtualClock
from app.utils.config import AppSettings
from app.utils.errors import NoRunnableTasks, NonLeafSelected, PentestError
from app.utils.events import EventLog
from app.utils.types import (
    PTT,
    AbortReason,
    FailureDetail,
    LlmRole,
    ReportSummary,
    RunConfig,
    RunReport,
    RunStatus,
    TaskStatus,
)

logger = logging.getLogger(__name__)


def make_run_id(started_at: datetime, rhost: str) -> str:
    return f"{started_at.astimezone(timezone.utc):%Y%m%dT%H%M%SZ}-{rhost}"


def claim_run_dir(out_dir: Path, run_id: str) -> tuple[str, Path]:
    """Create a fresh run directory, suffixing ``-2``, ``-3``... when the id is taken."""
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    candidate, n = run_id, 1
    while True:
        run_dir = Path(out_dir) / candidate
        try:
            run_dir.mkdir()
            return candidate, run_dir
        except FileExistsError:
            n += 1
            candidate = f"{run_id}-{n}"


def default_clock(config: RunConfig) -> Clock:
    """Simulated runs keep virtual time, starting from the current second."""
    if config.executor == "sim":
        return VirtualClock(datetime.now(timezone.utc).replace(microsecond=0))
    return SystemClock()


class Orchestrator:
    """Owns one run: its clock, event log, components and final report.

    Construction validates the environment (scenario, transcripts, API key)
    and raises before anything is written; once ``run`` starts, every
    failure becomes an outcome.
    """

    def __init__(
        self,
        config: RunConfig,
        settings: AppSettings,
        clock: Optional[Clock] = None,
        backend: Optional[ModelBackend] = None,
        executor: Optional[CommandExecutor] = None,
        rag: Optional[RagStore] = None,
    ):
        self.config = config
        self.settings = settings
        self.clock = clock if clock is not None else default_clock(config)
        self.backend = backend if backend is not None else self._build_backend()
        self.executor = executor if executor is not None else self._build_executor()
        self.rag = rag

    def _build_backend(self) -> ModelBackend:
        if self.config.model == "scripted":
            return ScriptedBackend.from_file(self.config.transcripts_path, clock=self.clock)
        return RemoteBackend(self.settings)

    def _build_executor(self) -> CommandExecutor:
        if self.config.executor == "sim":
            return SimExecutor(load_scenario(self.config.scenario_path), clock=self.clock)
        return ShellExecutor(
            self.settings,
            target_cidr=self.config.target_cidr,
            lhost=self.config.attacker_lhost,
            workdir=self.config.workdir,
        )

    def _prepare_rag(self) -> Optional[RagStore]:
        if self.rag is not None:
            return self.rag
        store = RagStore(self.config.index_dir)
        ingest_all(store, self.config.corpora_dir)
        return store

    def run(self) -> RunReport:
        """Drive expand, prioritize and run_task until the run settles."""
        config = self.config
        rhost, lhost = str(config.target_rhost), str(config.attacker_lhost)
        # Claim the run directory and open the event log
        started_at = self.clock.now()
        run_id, run_dir = claim_run_dir(Path(config.out_dir), make_run_id(started_at, rhost))
        events = EventLog(self.clock, run_dir / EVENTS_FILE)
        deadline = self.clock.monotonic() + config.max_wall_sec

        events.emit(
            "run_started",
            run_id=run_id,
            rhost=rhost,
            lhost=lhost,
            executor=config.executor,
            model=config.model,
            success_cases_enabled=config.success_cases_enabled,
            max_steps=config.max_steps,
            max_wall_sec=config.max_wall_sec,
            run_dir=str(run_dir),
            event_log_path=str(events.path),
        )
        logger.info(f"Run {run_id}: target {rhost}, attacker {lhost}")

        # Initialize run state
        gateway = LlmGateway(self.backend, self.settings, events)
        ptt = new_ptt(rhost, lhost, started_at, config.target_description)
        outcome: RunStatus = RunStatus.FAILURE
        failure: Optional[FailureDetail] = None
        shell_command: Optional[str] = None
        steps = 0

        try:
            # Build components
            rag = self._prepare_rag()
            planner = RePlanner(
                gateway,
                rag,
                self.settings,
                events,
                success_cases_enabled=config.success_cases_enabled,
                lenient_prioritizer=config.lenient_prioritizer,
            )
            act = ActEngine(gateway, self.executor, self.settings, rag=rag, events=events, clock=self.clock)

            while True:
                # Check budgets
                if steps >= config.max_steps:
                    outcome = RunStatus.FAILURE
                    failure = FailureDetail(message=f"Step budget of {config.max_steps} expansions spent without a shell.")
                    break
                if self.clock.monotonic() >= deadline:
                    outcome = RunStatus.ABORTED
                    failure = FailureDetail(reason=AbortReason.WallClock, message=f"Wall-clock budget of {config.max_wall_sec:g} s exhausted.")
                    break

                # Expand the tree
                ptt, step = planner.expand(ptt, last_executed_task(ptt))
                steps += 1
                events.emit("plan_step", **step.model_dump(mode="json"))
                events.emit("tasks_merged", parent_id=step.parent_id, task_ids=step.added_task_ids, count=len(step.added_task_ids))

                # Pick the next leaf
                try:
                    task_id = planner.prioritize(ptt)
                except NoRunnableTasks:
                    outcome = RunStatus.FAILURE
                    failure = FailureDetail(message="No runnable tasks remained after expansion.")
                    break

                events.emit("task_selected", task_id=task_id, title=next(n.title for n in iter_nodes(ptt) if n.id == task_id))
                ptt = claim_task(ptt, task_id)
                events.emit("status_changed", task_id=task_id, old=TaskStatus.pending.value, new=TaskStatus.in_progress.value)

                # Act on it
                task_run = act.run_task(ptt, task_id, deadline=deadline)
                ptt = task_run.ptt

                if task_run.shell_command is not None:
                    outcome = RunStatus.SUCCESS
                    shell_command = task_run.shell_command
                    logger.info(f"Shell obtained on task {task_id}: {shell_command}")
                    break
                if task_run.abort is not None:
                    outcome = RunStatus.ABORTED
                    failure = self._abort_detail(task_run)
                    break
        except NonLeafSelected as e:
            logger.error(f"Run {run_id} aborted: {e}")
            outcome = RunStatus.ABORTED
            failure = FailureDetail(reason=AbortReason.NonLeafSelected, message=str(e))
        except PentestError as e:
            logger.error(f"Run {run_id} aborted on {type(e).__name__}: {e}")
            outcome = RunStatus.ABORTED
            failure = FailureDetail(reason=AbortReason.Error, message=f"{type(e).__name__}: {e}")
        except Exception as e:
            logger.exception(f"Run {run_id} aborted on an unexpected error")
            outcome = RunStatus.ABORTED
            failure = FailureDetail(reason=AbortReason.Error, message=f"{type(e).__name__}: {e}")

        # Summarize and close the log
        summary = self._summarize(gateway, ptt, outcome, steps, shell_command, failure)
        elapsed_ms = events.elapsed_ms()
        ptt = finish_ptt(ptt, outcome, self.clock.now())
        events.emit(
            "run_finished",
            outcome=outcome.value,
            shell_command=shell_command,
            steps=steps,
            elapsed_ms=elapsed_ms,
            failure=failure.model_dump(mode="json") if failure is not None else None,
            summary=summary,
        )

        # Build and write the report
        report = RunReport(
            run_id=run_id,
            outcome=outcome,
            shell_command=shell_command,
            steps=steps,
            elapsed_sec=elapsed_ms / 1000.0,
            failure=failure,
            summary=summary,
            time_breakdown=time_breakdown(events.events),
            ledger=gateway.cost_report(),
            ptt=ptt,
            run_dir=str(run_dir),
            event_log_path=str(events.path),
        )
        write_report(report, run_dir)
        logger.info(f"Run {run_id} finished {outcome.value} after {steps} step(s), {report.elapsed_sec:.1f} s")
        return report

    @staticmethod
    def _abort_detail(task_run: TaskRun) -> FailureDetail:
        last = task_run.last_result
        if task_run.abort is AbortReason.WallClock:
            return FailureDetail(
                reason=AbortReason.WallClock,
                task_id=task_run.task_id,
                command=task_run.interrupted_command,
                message="Wall-clock budget exhausted while the command was running."
                if task_run.interrupted_command
                else "Wall-clock budget exhausted.",
            )
        return FailureDetail(
            reason=task_run.abort,
            task_id=task_run.task_id,
            command=last.command if last else None,
            exit_class=last.exit_class if last else None,
            message=last.log_summary if last else "",
        )

    def _summarize(
        self,
        gateway: LlmGateway,
        ptt: PTT,
        outcome: RunStatus,
        steps: int,
        shell_command: Optional[str],
        failure: Optional[FailureDetail],
    ) -> str:
        """Executive summary from the model, or a plain one when it is unavailable."""
        try:
            reply = gateway.complete_structured(
                LlmRole.ReportGen,
                {
                    "outcome": outcome.value,
                    "steps": steps,
                    "shell_command": shell_command or "none",
                    "ptt": render_tree(ptt),
                },
                ReportSummary,
            )
            if reply.summary.strip():
                return reply.summary.strip()
        except PentestError as e:
            logger.warning(f"ReportGen unavailable, using the plain summary: {e}")

        executed = sum(1 for node in iter_nodes(ptt) if node.act_results)
        text = f"Run ended {outcome.value} after {steps} expansion step(s) with {executed} task(s) executed."
        if shell_command is not None:
            text += f" Shell obtained with: {shell_command}"
        elif failure is not None and failure.message:
            text += f" {failure.message}"
        return text


def run(config: RunConfig, settings: AppSettings, clock: Optional[Clock] = None, **components) -> RunReport:
    return Orchestrator(config, settings, clock=clock, **components).run()
