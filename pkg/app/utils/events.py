"""Append-only JSONL event log for a run.

Each line is ``{seq, wall_ms, kind, payload}``. ``wall_ms`` counts from the
moment the log was opened, measured on the run's clock. Timing spans are
logged as ``span`` events and are what the per-module time breakdown is
computed from.
"""

import json
import logging
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Iterator, Optional

from pydantic import ValidationError

from app.utils.clock import Clock
from app.utils.errors import CorruptLog
from app.utils.types import Event, Module

logger = logging.getLogger(__name__)


class EventLog:
    """Writes events to ``path`` (when given) and keeps them in memory."""

    def __init__(self, clock: Clock, path: Optional[Path] = None):
        self.clock = clock
        self.path = path
        self.events: list[Event] = []
        self._origin = clock.monotonic()
        self._open_span: Optional[Module] = None
        if path is not None:
            # An existing log belongs to another run and is never truncated
            path.parent.mkdir(parents=True, exist_ok=True)
            path.touch(exist_ok=False)

    def elapsed_ms(self) -> int:
        return round((self.clock.monotonic() - self._origin) * 1000)

    def emit(self, kind: str, **payload: Any) -> Event:
        event = Event(seq=len(self.events), wall_ms=self.elapsed_ms(), kind=kind, payload=payload)
        self.events.append(event)
        if self.path is not None:
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(event.model_dump_json() + "\n")
        logger.debug(f"event {event.seq} {kind}")
        return event

    def of_kind(self, kind: str) -> list[Event]:
        return [e for e in self.events if e.kind == kind]

    @contextmanager
    def span(self, module: Module) -> Iterator[None]:
        """Attribute the time spent inside the block to ``module``.

        Spans never nest; an inner span inside an outer one is a bug in the
        caller and raises immediately.
        """
        if self._open_span is not None:
            raise RuntimeError(f"span {module.value} opened inside {self._open_span.value}")
        self._open_span = module
        start_ms = self.elapsed_ms()
        try:
            yield
        finally:
            self._open_span = None
            self.emit("span", module=module.value, start_ms=start_ms, end_ms=self.elapsed_ms())


def read_events(path: Path) -> list[Event]:
    """Load and sanity-check an event log."""
    if not path.is_file():
        raise CorruptLog(f"event log not found: {path}")

    events: list[Event] = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            event = Event.model_validate(json.loads(line))
        except (json.JSONDecodeError, ValidationError) as e:
            raise CorruptLog(f"unreadable event: {e}", line=lineno) from e
        if event.seq != len(events):
            raise CorruptLog(f"expected seq {len(events)}, got {event.seq}", line=lineno)
        if events and event.wall_ms < events[-1].wall_ms:
            raise CorruptLog("wall_ms went backwards", line=lineno)
        events.append(event)
    return events
