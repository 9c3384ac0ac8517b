"""Real command execution in a fresh shell with process-tree timeouts."""

import errno
import logging
import os
import re
import shlex
import signal
import subprocess
import time
from ipaddress import IPv4Address, IPv4Network
from pathlib import Path
from typing import Optional, Protocol

from app.utils.config import AppSettings
from app.utils.errors import ConfigError, SpawnError
from app.utils.types import TIMEOUT_EXIT_CODE, CommandSpec, RawOutcome

logger = logging.getLogger(__name__)

IPV4_LITERAL_RE = re.compile(r"(?<![\d.])(\d{1,3}(?:\.\d{1,3}){3})(?!\.?\d)")


class CommandExecutor(Protocol):
    """Runs one command; ``budget_sec`` is what remains of the run's wall budget."""

    def execute(self, spec: CommandSpec, budget_sec: Optional[float] = None) -> RawOutcome: ...


def argv0(command: str) -> str:
    """The program a shell command line starts, as the shell would split it."""
    try:
        words = shlex.split(command)
    except ValueError:
        words = command.split()
    return words[0] if words else command


def effective_limit_ms(timeout_sec: int, budget_sec: Optional[float]) -> tuple[int, bool]:
    """The kill deadline in ms and whether the run budget, not the timeout, set it."""
    timeout_ms = timeout_sec * 1000
    if budget_sec is not None and budget_sec * 1000 < timeout_ms:
        return max(0, round(budget_sec * 1000)), True
    return timeout_ms, False


def cap_tail(data: bytes, cap: int) -> str:
    """Decode keeping only the last ``cap`` bytes; exploit banners come late."""
    if len(data) > cap:
        data = data[-cap:]
    return data.decode("utf-8", errors="replace")


def terminate_process_group(proc: subprocess.Popen, sig: int = signal.SIGKILL) -> None:
    try:
        os.killpg(proc.pid, sig)
    except ProcessLookupError:
        return
    except OSError as e:
        if e.errno == errno.ESRCH:
            return
        logger.warning(f"killpg({proc.pid}) failed: {e}; killing the shell only")
        proc.kill()


class ShellExecutor:
    """Runs commands through ``/bin/sh`` against an allowlisted target range.

    Each command gets its own session, so a timeout kills the shell and
    everything it spawned. The environment is reduced to the configured
    passthrough variables.
    """

    def __init__(
        self,
        settings: AppSettings,
        target_cidr: Optional[IPv4Network],
        lhost: Optional[IPv4Address] = None,
        workdir: Optional[Path] = None,
    ):
        if target_cidr is None:
            raise ConfigError("the real executor needs an allowlisted target CIDR")
        self.settings = settings
        self.target_cidr = target_cidr
        self.lhost = lhost
        self.workdir = Path(workdir) if workdir is not None else None
        if self.workdir is not None:
            self.workdir.mkdir(parents=True, exist_ok=True)

    def _environment(self) -> dict[str, str]:
        return {key: os.environ[key] for key in self.settings.env_passthrough if key in os.environ}

    def check_scope(self, command: str) -> None:
        """Refuse commands naming an address outside the target range."""
        for literal in IPV4_LITERAL_RE.findall(command):
            try:
                address = IPv4Address(literal)
            except ValueError:
                continue
            if address in self.target_cidr or address == self.lhost or address.is_loopback or address.is_unspecified:
                continue
            raise SpawnError(f"refusing to run a command against {address}, outside {self.target_cidr}")

    def execute(self, spec: CommandSpec, budget_sec: Optional[float] = None) -> RawOutcome:
        self.check_scope(spec.command)
        limit_ms, by_budget = effective_limit_ms(spec.timeout_sec, budget_sec)
        cap = self.settings.output_cap_bytes

        logger.info(f"exec (timeout {limit_ms / 1000:.1f}s): {spec.command}")
        started = time.monotonic()
        try:
            proc = subprocess.Popen(
                spec.command,
                shell=True,
                stdin=subprocess.DEVNULL,
                stdout=subprocess.PIPE,
                stderr=subprocess.PIPE,
                cwd=self.workdir,
                env=self._environment(),
                start_new_session=True,
            )
        except OSError as e:
            logger.error(f"Failed to start command: {e}")
            raise SpawnError(f"cannot start shell: {e}") from e

        timed_out = False
        try:
            stdout, stderr = proc.communicate(timeout=limit_ms / 1000)
        except subprocess.TimeoutExpired:
            timed_out = True
            terminate_process_group(proc)
            try:
                stdout, stderr = proc.communicate(timeout=5)
            except subprocess.TimeoutExpired:
                # a descendant left the group and still holds the pipes
                logger.warning(f"pid {proc.pid}: output pipes still open after kill")
                proc.kill()
                stdout, stderr = b"", b""
        finally:
            if proc.poll() is None:
                terminate_process_group(proc)
                proc.wait()
        duration_ms = round((time.monotonic() - started) * 1000)

        if timed_out:
            exit_code = TIMEOUT_EXIT_CODE
        elif proc.returncode < 0:
            # killed by a signal; report it the way the shell does
            exit_code = 128 - proc.returncode
        else:
            exit_code = proc.returncode

        return RawOutcome(
            exit_code=exit_code,
            stdout=cap_tail(stdout or b"", cap),
            stderr=cap_tail(stderr or b"", cap),
            duration_ms=duration_ms,
            timed_out=timed_out,
            budget_exhausted=timed_out and by_budget,
        )
