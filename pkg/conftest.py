"""Shared pytest fixtures: virtual clock, settings, scripted model and bundled data."""

import json
import sys
from collections import Counter
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Optional

import pytest

REPO_ROOT = Path(__file__).resolve().parent
sys.path.insert(0, str(REPO_ROOT))

from app.services.llm_gateway import LlmGateway, ScriptedBackend  # noqa: E402
from app.services.rag_store import RagStore, ingest_all  # noqa: E402
from app.services.simlab import load_scenario  # noqa: E402
from app.utils.clock import VirtualClock  # noqa: E402
from app.utils.config import AppSettings  # noqa: E402
from app.utils.events import EventLog  # noqa: E402
from app.utils.types import TranscriptEntry  # noqa: E402

FIXTURES = REPO_ROOT / "fixtures"
SCENARIO_PATH = REPO_ROOT / "scenarios" / "legacy_like.scenario.json"
CORPORA = REPO_ROOT / "corpora"
TRANSCRIPTS = REPO_ROOT / "transcripts"
START = datetime(2025, 2, 13, 22, 1, 52, tzinfo=timezone.utc)


def numbered(replies: list[tuple]) -> list[TranscriptEntry]:
    """``(role, response[, guard])`` tuples to transcript entries, ordinals counted per role."""
    seen: Counter = Counter()
    entries = []
    for reply in replies:
        role, response = reply[0], reply[1]
        guard = reply[2] if len(reply) > 2 else None
        seen[role] += 1
        entries.append(TranscriptEntry(role=role, ordinal=seen[role], response=response, guard=guard))
    return entries


@pytest.fixture(autouse=True)
def no_ambient_api_key(monkeypatch):
    monkeypatch.delenv("OPENAI_API_KEY", raising=False)
    monkeypatch.delenv("PENTEST_LLM_API_KEY", raising=False)


@pytest.fixture
def clock() -> VirtualClock:
    return VirtualClock(START)


@pytest.fixture
def settings() -> AppSettings:
    return AppSettings(_env_file=None)


@pytest.fixture
def events(clock) -> EventLog:
    return EventLog(clock)


@pytest.fixture
def scenario():
    return load_scenario(SCENARIO_PATH)


@pytest.fixture(scope="session")
def rag() -> RagStore:
    store = RagStore()
    ingest_all(store, CORPORA)
    return store


@pytest.fixture
def make_gateway(settings, events, clock):
    """Build a gateway over a scripted backend from ``(role, response[, guard])`` tuples."""

    def build(replies: list[tuple], event_log: Optional[EventLog] = events) -> LlmGateway:
        backend = ScriptedBackend(numbered(replies), clock=clock)
        return LlmGateway(backend, settings, event_log)

    return build


@pytest.fixture
def write_transcript(tmp_path):
    def write(replies: list[tuple], name: str = "transcript.jsonl") -> Path:
        path = tmp_path / name
        lines = [entry.model_dump_json(exclude_none=True) for entry in numbered(replies)]
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return path

    return write


def load_fixture(name: str) -> Any:
    return json.loads((FIXTURES / name).read_text(encoding="utf-8"))

