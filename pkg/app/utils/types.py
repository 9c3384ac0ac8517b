"""Pydantic models for data validation in the pentest orchestrator."""

import json
import re
from dataclasses import dataclass
from datetime import datetime, timezone
from enum import Enum
from ipaddress import IPv4Address, IPv4Network
from pathlib import Path
from typing import Any, Literal, Optional

from dateutil.parser import isoparse
from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    NonNegativeInt,
    PositiveInt,
    PrivateAttr,
    computed_field,
    field_serializer,
    field_validator,
    model_validator,
)

TASK_ID_PATTERN = r"^[1-9][0-9]*(\.[1-9][0-9]*)*$"
PTT_VERSION = "2"
TIMEOUT_EXIT_CODE = -1


class TaskStatus(str, Enum):
    """Lifecycle of a single task node."""
    pending = "pending"
    in_progress = "in_progress"
    completed = "completed"
    failed = "failed"


class ExitClass(str, Enum):
    """Classified outcome of one command execution."""
    SUCCESS = "SUCCESS"
    TIMEOUT = "TIMEOUT"
    COMMAND_NOT_FOUND = "COMMAND_NOT_FOUND"
    FILE_NOT_FOUND = "FILE_NOT_FOUND"
    OTHERS = "OTHERS"


FAIL_FAST_CLASSES = frozenset({ExitClass.COMMAND_NOT_FOUND, ExitClass.FILE_NOT_FOUND})


class RunStatus(str, Enum):
    RUNNING = "RUNNING"
    SUCCESS = "SUCCESS"
    FAILURE = "FAILURE"
    ABORTED = "ABORTED"


class AbortReason(str, Enum):
    FailFast = "FailFast"
    NonLeafSelected = "NonLeafSelected"
    WallClock = "WallClock"
    Error = "Error"


class Corpus(str, Enum):
    techniques = "techniques"
    success_cases = "success_cases"


class LlmRole(str, Enum):
    """Every model call carries exactly one of these roles."""
    PlannerExpand = "PlannerExpand"
    TaskDedup = "TaskDedup"
    Prioritize = "Prioritize"
    SuccessQueryGen = "SuccessQueryGen"
    SuccessCaseAnalyze = "SuccessCaseAnalyze"
    CommandGen = "CommandGen"
    LogClassify = "LogClassify"
    LogSummarize = "LogSummarize"
    ReportGen = "ReportGen"


class Module(str, Enum):
    """Accounting buckets for time and cost."""
    RePlanner = "RePlanner"
    RePrioritizer = "RePrioritizer"
    ReL2SuccessCases = "ReL2SuccessCases"
    ActCommandGen = "ActCommandGen"
    ActExecution = "ActExecution"
    ActLogAnalysis = "ActLogAnalysis"
    Overhead = "Overhead"


ROLE_MODULE: dict[LlmRole, Module] = {
    LlmRole.PlannerExpand: Module.RePlanner,
    LlmRole.TaskDedup: Module.RePlanner,
    LlmRole.Prioritize: Module.RePrioritizer,
    LlmRole.SuccessQueryGen: Module.ReL2SuccessCases,
    LlmRole.SuccessCaseAnalyze: Module.ReL2SuccessCases,
    LlmRole.CommandGen: Module.ActCommandGen,
    LlmRole.LogClassify: Module.ActLogAnalysis,
    LlmRole.LogSummarize: Module.ActLogAnalysis,
    LlmRole.ReportGen: Module.Overhead,
}


def format_timestamp(value: datetime) -> str:
    """RFC-3339 UTC with a ``Z`` suffix; sub-second digits only when present."""
    value = value.astimezone(timezone.utc)
    timespec = "microseconds" if value.microsecond else "seconds"
    return value.isoformat(timespec=timespec).replace("+00:00", "Z")


def parse_timestamp(value: Any) -> Any:
    if isinstance(value, str):
        try:
            value = isoparse(value)
        except ValueError as e:
            raise ValueError(f"not an RFC-3339 timestamp: {value!r}") from e
    if isinstance(value, datetime):
        if value.tzinfo is None:
            raise ValueError("timestamp must carry a UTC offset")
        return value.astimezone(timezone.utc)
    return value


# ---- PTT ----------------------------------------------------------------------

class ActResult(BaseModel):
    """One command execution recorded on a task node."""
    command: str = Field(..., min_length=1)
    timeout_sec: PositiveInt
    exit_code: int
    exit_class: ExitClass
    log_summary: str = ""

    @model_validator(mode="after")
    def validate_outcome(self) -> "ActResult":
        timed_out = self.exit_class is ExitClass.TIMEOUT
        if timed_out != (self.exit_code == TIMEOUT_EXIT_CODE):
            raise ValueError("exit_code -1 is reserved for TIMEOUT and required by it")
        if not timed_out and not self.log_summary.strip():
            raise ValueError("log_summary must be non-empty unless the command timed out")
        return self


class AttackerInfo(BaseModel):
    model_config = ConfigDict(populate_by_name=True)

    lhost: IPv4Address = Field(..., alias="LHOST")


class TargetInfo(BaseModel):
    model_config = ConfigDict(populate_by_name=True)

    description: str = ""
    rhost: IPv4Address = Field(..., alias="RHOST")


class EnvMetadata(BaseModel):
    """Environment block at the top of every PTT."""
    started_at: datetime
    finished_at: Optional[datetime] = None
    status: RunStatus
    attacker: AttackerInfo
    target: TargetInfo

    @field_validator("started_at", "finished_at", mode="before")
    @classmethod
    def validate_timestamp(cls, v):
        return parse_timestamp(v)

    @field_serializer("started_at", "finished_at")
    def serialize_timestamp(self, value: Optional[datetime]) -> Optional[str]:
        return format_timestamp(value) if value is not None else None

    @model_validator(mode="after")
    def validate_hosts_and_times(self) -> "EnvMetadata":
        if self.attacker.lhost == self.target.rhost:
            raise ValueError("LHOST and RHOST must differ")
        if self.finished_at is not None and self.finished_at < self.started_at:
            raise ValueError("finished_at precedes started_at")
        return self

    @property
    def rhost(self) -> str:
        return str(self.target.rhost)

    @property
    def lhost(self) -> str:
        return str(self.attacker.lhost)


class TaskNode(BaseModel):
    """A task in the tree; leaves are what the Act side executes."""
    id: str = Field(..., pattern=TASK_ID_PATTERN)
    title: str = Field(..., min_length=1)
    detail: str = ""
    status: TaskStatus = TaskStatus.pending
    act_results: list[ActResult] = Field(default_factory=list)
    subtasks: list["TaskNode"] = Field(default_factory=list)

    @property
    def is_leaf(self) -> bool:
        return not self.subtasks

    @property
    def path(self) -> tuple[int, ...]:
        return tuple(int(part) for part in self.id.split("."))


class PTT(BaseModel):
    """Pentesting Task Tree: the single source of planning state."""
    version: Literal["2"]
    metadata: EnvMetadata
    root: TaskNode

    # wall-order of act-result appends; never serialized
    _append_order: dict[str, int] = PrivateAttr(default_factory=dict)
    _append_seq: int = PrivateAttr(default=0)

    def mark_appended(self, task_id: str) -> int:
        self._append_seq += 1
        self._append_order[task_id] = self._append_seq
        return self._append_seq

    def append_counter(self, task_id: str) -> Optional[int]:
        return self._append_order.get(task_id)

    @property
    def last_appended_id(self) -> Optional[str]:
        if not self._append_order:
            return None
        return max(self._append_order, key=self._append_order.__getitem__)


# ---- Re -----------------------------------------------------------------------

class ProposalOrigin(BaseModel):
    reason: str = ""


class NewTaskProposal(BaseModel):
    """A task emitted by the planner before it is merged into the tree."""
    title: str = Field(..., min_length=1)
    detail: str = Field(..., min_length=1)
    origin: ProposalOrigin = Field(default_factory=ProposalOrigin)

    @property
    def origin_reason(self) -> str:
        return self.origin.reason


class PlanStep(BaseModel):
    step_index: PositiveInt
    parent_id: str
    added_task_ids: list[str] = Field(default_factory=list)
    dedup_dropped: NonNegativeInt = 0
    lint_dropped: NonNegativeInt = 0
    success_case_used: Optional[str] = None


class PlannerExpansion(BaseModel):
    """PlannerExpand response."""
    parent_id: Optional[str] = None
    tasks: list[NewTaskProposal] = Field(default_factory=list)


class DedupVerdict(BaseModel):
    """TaskDedup response; indices refer to the candidate list in the prompt."""
    duplicate_indices: list[NonNegativeInt] = Field(default_factory=list)
    reason: str = ""


class PrioritySelection(BaseModel):
    task_id: str
    reason: str = ""


class SuccessQuery(BaseModel):
    query: str = Field(..., min_length=1)

    @field_validator("query")
    @classmethod
    def single_line(cls, v: str) -> str:
        v = " ".join(v.split())
        if not v:
            raise ValueError("query is blank")
        return v


class SuccessCaseAnalysis(BaseModel):
    """SuccessCaseAnalyze response, shaped like the stored new-task documents."""
    model_config = ConfigDict(populate_by_name=True)

    step1: str = Field(..., alias="Thought process (Step1)")
    step2: str = Field(default="", alias="Thought process (Step2)")
    new_tasks: list[NewTaskProposal] = Field(default_factory=list, alias="newTasks")

    @model_validator(mode="after")
    def require_reasons(self) -> "SuccessCaseAnalysis":
        for i, task in enumerate(self.new_tasks):
            if not task.origin.reason.strip():
                raise ValueError(f"newTasks[{i}].origin.reason is empty")
        return self


# ---- Act ----------------------------------------------------------------------

class CommandSuggestion(BaseModel):
    """CommandGen response."""
    command: str = Field(..., min_length=1)
    rationale: str = ""
    alternative_found: bool = True


class LogVerdict(BaseModel):
    exit_class: Literal["SUCCESS", "OTHERS"]
    reason: str = ""


class LogDigest(BaseModel):
    summary: str


class ReportSummary(BaseModel):
    summary: str


class CommandSpec(BaseModel):
    command: str = Field(..., min_length=1)
    timeout_sec: PositiveInt = 30
    attempt: PositiveInt = 1
    rationale: str = ""


@dataclass(frozen=True, slots=True)
class RawOutcome:
    """What the executor observed; classification happens later."""
    exit_code: int
    stdout: str
    stderr: str
    duration_ms: int
    timed_out: bool
    budget_exhausted: bool = False


@dataclass(frozen=True, slots=True)
class Classification:
    exit_class: ExitClass
    log_summary: str
    shell_detected: bool = False

    def __post_init__(self):
        if self.shell_detected and self.exit_class is not ExitClass.SUCCESS:
            raise ValueError("shell detection implies SUCCESS")


# ---- RAG ----------------------------------------------------------------------

class RagDoc(BaseModel):
    doc_id: str
    corpus: Corpus
    title: str
    body: str
    source_path: str
    search_text: str = ""


class RagHit(BaseModel):
    doc: RagDoc
    score: float = Field(..., ge=0.0)
    rank: PositiveInt


class IngestSummary(BaseModel):
    corpus: Corpus
    doc_count: int = 0
    token_count: int = 0
    added: int = 0
    removed: int = 0


# ---- LLM ----------------------------------------------------------------------

class LlmCall(BaseModel):
    role: LlmRole
    prompt: str
    response: str
    parsed_ok: bool
    attempts: PositiveInt
    tokens_in: NonNegativeInt = 0
    tokens_out: NonNegativeInt = 0
    latency_ms: NonNegativeInt = 0

    @property
    def module(self) -> Module:
        return ROLE_MODULE[self.role]


class TranscriptEntry(BaseModel):
    """One scripted model reply, keyed by (role, ordinal within role)."""
    role: LlmRole
    ordinal: PositiveInt
    guard: Optional[str] = None
    response: Any
    delay_ms: NonNegativeInt = 0

    @field_validator("guard")
    @classmethod
    def validate_guard(cls, v: Optional[str]) -> Optional[str]:
        if v is not None:
            re.compile(v)
        return v

    @property
    def text(self) -> str:
        if isinstance(self.response, str):
            return self.response
        return json.dumps(self.response, ensure_ascii=False)


class RoleCost(BaseModel):
    role: LlmRole
    module: Module
    calls: int = 0
    attempts: int = 0
    tokens_in: int = 0
    tokens_out: int = 0
    seconds: float = 0.0
    dollars: float = 0.0


class ModuleCost(BaseModel):
    module: Module
    calls: int = 0
    tokens_in: int = 0
    tokens_out: int = 0
    seconds: float = 0.0
    dollars: float = 0.0


class ModuleLedger(BaseModel):
    roles: list[RoleCost] = Field(default_factory=list)
    modules: list[ModuleCost] = Field(default_factory=list)
    total_calls: int = 0
    total_tokens_in: int = 0
    total_tokens_out: int = 0
    total_dollars: float = 0.0


# ---- Simlab -------------------------------------------------------------------

class HostPort(BaseModel):
    port: int = Field(..., ge=1, le=65535)
    service: str = ""
    banner: str = ""


class ScenarioHost(BaseModel):
    ip: IPv4Address
    ports: list[HostPort] = Field(default_factory=list)


class DefaultRule(BaseModel):
    stdout: str = ""
    stderr: str = ""
    exit_code: int = Field(default=0, ge=0, le=255)
    delay_ms: NonNegativeInt = 0


class ScenarioRule(DefaultRule):
    match: str
    grants_shell: bool = False

    @field_validator("match")
    @classmethod
    def validate_regex(cls, v: str) -> str:
        try:
            re.compile(v)
        except re.error as e:
            raise ValueError(f"invalid regex {v!r}: {e}") from e
        return v


class Scenario(BaseModel):
    name: str
    description: str = ""
    shell_marker: str = "Meterpreter session 1 opened"
    hosts: list[ScenarioHost] = Field(default_factory=list)
    rules: list[ScenarioRule] = Field(default_factory=list)
    default_rule: DefaultRule = Field(default_factory=DefaultRule)

    @model_validator(mode="after")
    def validate_single_shell_grant(self) -> "Scenario":
        granting = [i for i, rule in enumerate(self.rules) if rule.grants_shell]
        if len(granting) > 1:
            raise ValueError(f"rules {granting} all grant a shell; at most one may")
        return self


# ---- Orchestration ------------------------------------------------------------

class Event(BaseModel):
    seq: NonNegativeInt
    wall_ms: NonNegativeInt
    kind: str
    payload: dict[str, Any] = Field(default_factory=dict)


class RunConfig(BaseModel):
    """Per-run input assembled from CLI flags."""
    target_rhost: IPv4Address
    attacker_lhost: Optional[IPv4Address] = None
    target_description: str = ""
    success_cases_enabled: bool = True
    max_steps: int = 30
    max_wall_sec: float = 1200
    executor: Literal["real", "sim"] = "sim"
    model: Literal["remote", "scripted"] = "scripted"
    lenient_prioritizer: bool = False
    allow_real_exec: bool = False
    allow_remote_with_sim: bool = False
    target_cidr: Optional[IPv4Network] = None
    scenario_path: Optional[Path] = None
    transcripts_path: Optional[Path] = None
    corpora_dir: Path = Path("corpora")
    index_dir: Path = Path("index")
    out_dir: Path = Path("runs")
    workdir: Optional[Path] = None

    @model_validator(mode="after")
    def validate_consistency(self) -> "RunConfig":
        if self.max_wall_sec <= 0:
            raise ValueError("max_wall_sec must be positive")
        if self.max_steps <= 0:
            raise ValueError("max_steps must be positive")
        if self.executor == "real":
            if not self.allow_real_exec:
                raise ValueError("real execution requires allow_real_exec")
            if self.target_cidr is None:
                raise ValueError("real execution requires target_cidr")
            if self.target_rhost not in self.target_cidr:
                raise ValueError(f"{self.target_rhost} is outside {self.target_cidr}")
            if self.attacker_lhost is None:
                raise ValueError("real execution requires an explicit LHOST")
        else:
            if self.scenario_path is None:
                raise ValueError("sim execution requires a scenario")
            if self.model == "remote" and not self.allow_remote_with_sim:
                raise ValueError("sim execution with the remote model must be explicitly allowed")
            if self.attacker_lhost is None:
                self.attacker_lhost = IPv4Address("10.10.14.22")
        if self.model == "scripted" and self.transcripts_path is None:
            raise ValueError("scripted model requires a transcript file")
        if self.attacker_lhost == self.target_rhost:
            raise ValueError("LHOST and RHOST must differ")
        return self


class FailureDetail(BaseModel):
    reason: Optional[AbortReason] = None
    message: str = ""
    task_id: Optional[str] = None
    command: Optional[str] = None
    exit_class: Optional[ExitClass] = None


class RunReport(BaseModel):
    run_id: str
    outcome: RunStatus
    shell_command: Optional[str] = None
    steps: NonNegativeInt = 0
    elapsed_sec: float = 0.0
    failure: Optional[FailureDetail] = None
    summary: str = ""
    time_breakdown: dict[Module, float] = Field(default_factory=dict)
    ledger: ModuleLedger = Field(default_factory=ModuleLedger)
    ptt: PTT
    run_dir: str
    event_log_path: str

    @computed_field
    @property
    def time_share(self) -> dict[Module, float]:
        """Percent of elapsed time per module, to one decimal as the markdown prints it."""
        if self.elapsed_sec <= 0:
            return {module: 0.0 for module in self.time_breakdown}
        return {module: round(seconds / self.elapsed_sec * 100, 1) for module, seconds in self.time_breakdown.items()}

    @model_validator(mode="after")
    def validate_outcome(self) -> "RunReport":
        if self.outcome is RunStatus.RUNNING:
            raise ValueError("a report needs a terminal outcome")
        if (self.outcome is RunStatus.SUCCESS) != (self.shell_command is not None):
            raise ValueError("shell_command is present exactly when the run succeeded")
        return self


class ReportDocument(BaseModel):
    markdown: str
    json_text: str
    chart_csv: str
