"""Structured-output gateway to the chat-completion model.

Two backends sit behind one interface: ``RemoteBackend`` speaks the standard
chat-completions wire format over HTTP, ``ScriptedBackend`` replays a JSONL
transcript so whole runs can be reproduced offline.
"""

import hashlib
import json
import logging
import re
import time
from dataclasses import dataclass
from pathlib import Path
from string import Template
from typing import Any, Iterable, Mapping, Optional, Protocol, TypeVar

import httpx
import pandas as pd
from pydantic import BaseModel, ValidationError
from tenacity import RetryError, Retrying, retry_if_exception, stop_after_attempt, wait_exponential

from app.utils.clock import Clock
from app.utils.config import AppSettings, PriceTable
from app.utils.errors import (
    BackendUnreachable,
    ConfigError,
    MissingScript,
    PentestError,
    PromptTemplateError,
    SchemaViolation,
)
from app.utils.events import EventLog
from app.utils.types import ROLE_MODULE, LlmCall, LlmRole, Module, ModuleCost, ModuleLedger, RoleCost, TranscriptEntry

logger = logging.getLogger(__name__)

SchemaT = TypeVar("SchemaT", bound=BaseModel)

PROMPT_FILES: dict[LlmRole, str] = {
    LlmRole.PlannerExpand: "planner_expand.txt",
    LlmRole.TaskDedup: "task_dedup.txt",
    LlmRole.Prioritize: "prioritize.txt",
    LlmRole.SuccessQueryGen: "success_query_gen.txt",
    LlmRole.SuccessCaseAnalyze: "success_case_analyze.txt",
    LlmRole.CommandGen: "command_gen.txt",
    LlmRole.LogClassify: "log_classify.txt",
    LlmRole.LogSummarize: "log_summarize.txt",
    LlmRole.ReportGen: "report_gen.txt",
}
SYSTEM_PROMPT_FILE = "system.txt"

REPAIR_SUFFIX = "\n\nYour previous reply was rejected: $error\nReply again with only the corrected JSON object."


@dataclass(frozen=True, slots=True)
class BackendReply:
    text: str
    tokens_in: int
    tokens_out: int
    latency_ms: int


class ModelBackend(Protocol):
    def complete(self, role: LlmRole, system: str, prompt: str) -> BackendReply: ...


# ---- scripted backend ---------------------------------------------------------

def load_transcript(path: Path) -> list[TranscriptEntry]:
    """Read a JSONL transcript; blank lines and ``//`` comment lines are skipped."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"transcript not found: {path}")

    entries: list[TranscriptEntry] = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip() or line.lstrip().startswith("//"):
            continue
        try:
            entries.append(TranscriptEntry.model_validate(json.loads(line)))
        except (json.JSONDecodeError, ValidationError) as e:
            raise ConfigError(f"{path}:{lineno}: bad transcript entry: {e}") from e
    return entries


class ScriptedBackend:
    """Replays canned replies keyed by (role, ordinal within role).

    Every request for a role consumes the next ordinal, repair retries
    included. An entry's optional ``guard`` regex must match the rendered
    prompt, which pins a reply to the situation it was written for.
    """

    def __init__(self, entries: Iterable[TranscriptEntry], clock: Optional[Clock] = None):
        self.clock = clock
        self._entries: dict[tuple[LlmRole, int], TranscriptEntry] = {}
        for entry in entries:
            key = (entry.role, entry.ordinal)
            if key in self._entries:
                raise ConfigError(f"transcript has two entries for {entry.role.value} #{entry.ordinal}")
            self._entries[key] = entry
        self._issued: dict[LlmRole, int] = {}

    @classmethod
    def from_file(cls, path: Path, clock: Optional[Clock] = None) -> "ScriptedBackend":
        return cls(load_transcript(path), clock=clock)

    def complete(self, role: LlmRole, system: str, prompt: str) -> BackendReply:
        ordinal = self._issued.get(role, 0) + 1
        self._issued[role] = ordinal

        entry = self._entries.get((role, ordinal))
        if entry is None:
            raise MissingScript(f"no scripted reply for {role.value} #{ordinal}")
        if entry.guard is not None and not re.search(entry.guard, prompt):
            raise MissingScript(f"scripted reply {role.value} #{ordinal} does not fit this prompt (guard {entry.guard!r})")

        if entry.delay_ms and self.clock is not None:
            self.clock.sleep(entry.delay_ms / 1000)

        text = entry.text
        return BackendReply(
            text=text,
            tokens_in=len(system.split()) + len(prompt.split()),
            tokens_out=len(text.split()),
            latency_ms=0,
        )

    def issued(self, role: LlmRole) -> int:
        return self._issued.get(role, 0)

    def unused(self) -> list[TranscriptEntry]:
        return [e for (role, ordinal), e in sorted(self._entries.items()) if ordinal > self._issued.get(role, 0)]


# ---- remote backend -----------------------------------------------------------

def _is_transient(exc: BaseException) -> bool:
    if isinstance(exc, httpx.TransportError):
        return True
    if isinstance(exc, httpx.HTTPStatusError):
        return exc.response.status_code == 429 or exc.response.status_code >= 500
    return False


class RemoteBackend:
    """Chat-completions over HTTPS with bearer auth."""

    def __init__(self, settings: AppSettings, client: Optional[httpx.Client] = None, wait=None):
        if settings.llm_api_key is None and client is None:
            raise ConfigError("remote model needs PENTEST_LLM_API_KEY or OPENAI_API_KEY")
        self.settings = settings
        headers = {"Content-Type": "application/json"}
        if settings.llm_api_key is not None:
            headers["Authorization"] = f"Bearer {settings.llm_api_key.get_secret_value()}"
        self.client = client or httpx.Client(
            base_url=settings.llm_base_url,
            headers=headers,
            timeout=settings.llm_request_timeout_sec,
        )
        self._retrying = Retrying(
            stop=stop_after_attempt(3),
            wait=wait if wait is not None else wait_exponential(multiplier=0.5, min=0.5, max=4),
            retry=retry_if_exception(_is_transient),
            reraise=False,
        )

    def _post(self, payload: dict[str, Any]) -> dict[str, Any]:
        response = self.client.post("/chat/completions", json=payload)
        response.raise_for_status()
        return response.json()

    def complete(self, role: LlmRole, system: str, prompt: str) -> BackendReply:
        payload = {
            "model": self.settings.llm_model,
            "temperature": self.settings.llm_temperature,
            "response_format": {"type": "json_object"},
            "messages": [
                {"role": "system", "content": system},
                {"role": "user", "content": prompt},
            ],
        }
        started = time.monotonic()
        try:
            data = self._retrying(self._post, payload)
        except RetryError as e:
            cause = e.last_attempt.exception()
            logger.error(f"{role.value}: model endpoint failed after retries: {cause}")
            raise BackendUnreachable(f"{self.settings.llm_base_url}: {cause}") from cause
        except httpx.HTTPError as e:
            logger.error(f"{role.value}: model endpoint rejected the request: {e}")
            raise BackendUnreachable(f"{self.settings.llm_base_url}: {e}") from e
        latency_ms = round((time.monotonic() - started) * 1000)

        try:
            text = data["choices"][0]["message"]["content"] or ""
        except (KeyError, IndexError, TypeError) as e:
            raise BackendUnreachable(f"malformed chat-completions response: {e}") from e
        usage = data.get("usage") or {}
        return BackendReply(
            text=text,
            tokens_in=int(usage.get("prompt_tokens", 0)),
            tokens_out=int(usage.get("completion_tokens", 0)),
            latency_ms=latency_ms,
        )


# ---- gateway ------------------------------------------------------------------

def extract_json(text: str) -> Any:
    """Parse a model reply, tolerating markdown fences and stray prose."""
    stripped = re.sub(r"```(?:json)?\s*", "", text).replace("```", "").strip()
    try:
        return json.loads(stripped)
    except json.JSONDecodeError as e:
        match = re.search(r"\{.*\}", stripped, re.DOTALL)
        if match:
            try:
                return json.loads(match.group(0))
            except json.JSONDecodeError:
                pass
        raise SchemaViolation(f"reply is not JSON: {e.msg} at line {e.lineno} column {e.colno}") from e


def parse_structured(text: str, schema: type[SchemaT]) -> SchemaT:
    value = extract_json(text)
    try:
        return schema.model_validate(value)
    except ValidationError as e:
        first = e.errors()[0]
        where = ".".join(str(p) for p in first["loc"]) or "$"
        raise SchemaViolation(f"{schema.__name__}.{where}: {first['msg']}") from e


class LlmGateway:
    """Renders role prompts, calls the backend and validates the reply.

    Every call, successful or not, is kept in ``calls`` and mirrored to the
    event log as ``llm_call`` so the cost ledger can be rebuilt offline.
    """

    def __init__(self, backend: ModelBackend, settings: AppSettings, events: Optional[EventLog] = None):
        self.backend = backend
        self.settings = settings
        self.events = events
        self.calls: list[LlmCall] = []
        self._templates: dict[str, Template] = {}

    def _template(self, filename: str) -> Template:
        if filename not in self._templates:
            path = Path(self.settings.prompts_dir) / filename
            try:
                self._templates[filename] = Template(path.read_text(encoding="utf-8"))
            except OSError as e:
                raise PromptTemplateError(f"cannot read prompt template {path}: {e}") from e
        return self._templates[filename]

    @property
    def system_prompt(self) -> str:
        return self._template(SYSTEM_PROMPT_FILE).template.strip()

    def render(self, role: LlmRole, context: Mapping[str, Any]) -> str:
        template = self._template(PROMPT_FILES[role])
        try:
            return template.substitute({key: "" if value is None else str(value) for key, value in context.items()})
        except KeyError as e:
            raise PromptTemplateError(f"{PROMPT_FILES[role]} needs placeholder {e.args[0]!r}") from e
        except ValueError as e:
            raise PromptTemplateError(f"{PROMPT_FILES[role]}: {e}") from e

    def complete_structured(self, role: LlmRole, context: Mapping[str, Any], schema: type[SchemaT]) -> SchemaT:
        """Ask ``role`` for a reply matching ``schema``.

        A reply that fails validation gets exactly one repair retry with the
        error appended to the prompt.

        Raises:
            SchemaViolation: the repaired reply is still invalid.
            MissingScript: the scripted backend has nothing for this request.
            BackendUnreachable: the remote endpoint kept failing.
        """
        prompt = self.render(role, context)
        system = self.system_prompt
        attempts = tokens_in = tokens_out = latency_ms = 0
        request = prompt
        text = ""
        error: Optional[SchemaViolation] = None

        for _ in range(2):
            try:
                reply = self.backend.complete(role, system, request)
            except PentestError:
                if attempts:
                    self._record(role, prompt, text, False, attempts, tokens_in, tokens_out, latency_ms)
                raise
            attempts += 1
            tokens_in += reply.tokens_in
            tokens_out += reply.tokens_out
            latency_ms += reply.latency_ms
            text = reply.text
            try:
                value = parse_structured(text, schema)
            except SchemaViolation as e:
                logger.warning(f"{role.value} attempt {attempts} rejected: {e}")
                error = e
                request = prompt + Template(REPAIR_SUFFIX).substitute(error=str(e))
                continue
            self._record(role, prompt, text, True, attempts, tokens_in, tokens_out, latency_ms)
            return value

        self._record(role, prompt, text, False, attempts, tokens_in, tokens_out, latency_ms)
        logger.error(f"{role.value}: reply still invalid after repair: {error}")
        raise SchemaViolation(f"{role.value}: {error}")

    def _record(
        self,
        role: LlmRole,
        prompt: str,
        response: str,
        parsed_ok: bool,
        attempts: int,
        tokens_in: int,
        tokens_out: int,
        latency_ms: int,
    ) -> None:
        call = LlmCall(
            role=role,
            prompt=prompt,
            response=response,
            parsed_ok=parsed_ok,
            attempts=attempts,
            tokens_in=tokens_in,
            tokens_out=tokens_out,
            latency_ms=latency_ms,
        )
        self.calls.append(call)
        if self.events is not None:
            self.events.emit(
                "llm_call",
                role=role.value,
                module=call.module.value,
                parsed_ok=parsed_ok,
                attempts=attempts,
                tokens_in=tokens_in,
                tokens_out=tokens_out,
                latency_ms=latency_ms,
                prompt_sha256=hashlib.sha256(prompt.encode("utf-8")).hexdigest(),
                response=response,
            )

    def calls_for(self, role: LlmRole) -> list[LlmCall]:
        return [c for c in self.calls if c.role is role]

    def cost_report(self) -> ModuleLedger:
        return build_ledger(
            [c.model_dump(include={"role", "attempts", "tokens_in", "tokens_out", "latency_ms"}) for c in self.calls],
            self.settings.prices,
        )


def build_ledger(records: Iterable[Mapping[str, Any]], prices: PriceTable) -> ModuleLedger:
    """Aggregate call records (role, attempts, tokens_in, tokens_out, latency_ms) per role and module."""
    frame = pd.DataFrame.from_records(
        [
            {
                "role": LlmRole(r["role"]).value,
                "attempts": int(r["attempts"]),
                "tokens_in": int(r["tokens_in"]),
                "tokens_out": int(r["tokens_out"]),
                "latency_ms": int(r["latency_ms"]),
            }
            for r in records
        ],
        columns=["role", "attempts", "tokens_in", "tokens_out", "latency_ms"],
    )
    frame["calls"] = 1
    frame["module"] = frame["role"].map(lambda role: ROLE_MODULE[LlmRole(role)].value)
    frame["seconds"] = frame["latency_ms"] / 1000.0
    frame["dollars"] = prices.dollars(frame["tokens_in"], frame["tokens_out"])

    columns = ["calls", "attempts", "tokens_in", "tokens_out", "seconds", "dollars"]
    by_role = frame.groupby("role")[columns].sum().reindex([r.value for r in LlmRole], fill_value=0)
    by_module = frame.groupby("module")[columns].sum().reindex([m.value for m in Module], fill_value=0)

    roles = [
        RoleCost(
            role=LlmRole(role),
            module=ROLE_MODULE[LlmRole(role)],
            calls=int(row.calls),
            attempts=int(row.attempts),
            tokens_in=int(row.tokens_in),
            tokens_out=int(row.tokens_out),
            seconds=float(row.seconds),
            dollars=float(row.dollars),
        )
        for role, row in by_role.iterrows()
    ]
    modules = [
        ModuleCost(
            module=Module(module),
            calls=int(row.calls),
            tokens_in=int(row.tokens_in),
            tokens_out=int(row.tokens_out),
            seconds=float(row.seconds),
            dollars=float(row.dollars),
        )
        for module, row in by_module.iterrows()
    ]
    return ModuleLedger(
        roles=roles,
        modules=modules,
        total_calls=int(frame["calls"].sum()),
        total_tokens_in=int(frame["tokens_in"].sum()),
        total_tokens_out=int(frame["tokens_out"].sum()),
        total_dollars=float(frame["dollars"].sum()),
    )


def ledger_from_events(events: Iterable, prices: PriceTable) -> ModuleLedger:
    """Rebuild the ledger from the ``llm_call`` events of a finished run."""
    return build_ledger((e.payload for e in events if e.kind == "llm_call"), prices)
