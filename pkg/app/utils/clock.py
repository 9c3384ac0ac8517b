"""Clock abstraction so runs can be timed against real or simulated time."""

import time
from datetime import datetime, timedelta, timezone
from typing import Optional, Protocol


class Clock(Protocol):
    def now(self) -> datetime: ...

    def monotonic(self) -> float: ...

    def sleep(self, seconds: float) -> None: ...


class SystemClock:
    """Wall-clock time for real runs."""

    def now(self) -> datetime:
        return datetime.now(timezone.utc)

    def monotonic(self) -> float:
        return time.monotonic()

    def sleep(self, seconds: float) -> None:
        if seconds > 0:
            time.sleep(seconds)


class VirtualClock:
    """Simulated time that only moves when something advances it.

    Simlab delays and scripted model latency call ``advance`` instead of
    sleeping, so a full offline run finishes in milliseconds while its
    timestamps and budgets behave as if the time had passed.
    """

    def __init__(self, start: Optional[datetime] = None):
        self._start = start or datetime(2025, 1, 1, tzinfo=timezone.utc)
        self._elapsed_ms = 0

    def now(self) -> datetime:
        return self._start + timedelta(milliseconds=self._elapsed_ms)

    def monotonic(self) -> float:
        return self._elapsed_ms / 1000.0

    def sleep(self, seconds: float) -> None:
        self.advance_ms(round(seconds * 1000))

    def advance_ms(self, milliseconds: int) -> None:
        if milliseconds < 0:
            raise ValueError("virtual time cannot move backwards")
        self._elapsed_ms += int(milliseconds)
