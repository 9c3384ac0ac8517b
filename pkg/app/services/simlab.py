"""Deterministic stand-in for the target network.

A scenario maps command patterns to canned outcomes. Delays move a clock
instead of sleeping, so a full run against the simulated target takes
milliseconds while its timing behaves as if the time had passed.
"""

import json
import logging
import re
from pathlib import Path
from typing import Optional

from pydantic import ValidationError

from app.services.executor import argv0, effective_limit_ms
from app.utils.clock import Clock
from app.utils.errors import ScenarioError
from app.utils.types import TIMEOUT_EXIT_CODE, CommandSpec, DefaultRule, RawOutcome, Scenario

logger = logging.getLogger(__name__)

SCENARIO_SUFFIX = ".scenario.json"


def load_scenario(path: Path) -> Scenario:
    """Read and validate a scenario file.

    Raises:
        ScenarioError: unreadable file, bad JSON (with line and column), or a
            field that fails validation (with its JSON path).
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ScenarioError(str(path), f"cannot read scenario: {e}") from e

    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ScenarioError(f"{path}:{e.lineno}:{e.colno}", e.msg) from e

    try:
        scenario = Scenario.model_validate(raw)
    except ValidationError as e:
        first = e.errors()[0]
        location = "$" + "".join(f"[{p}]" if isinstance(p, int) else f".{p}" for p in first["loc"])
        raise ScenarioError(f"{path} {location}", first["msg"]) from e

    logger.info(f"Loaded scenario {scenario.name}: {len(scenario.hosts)} host(s), {len(scenario.rules)} rule(s)")
    return scenario


def resolve_scenario(name_or_path: str, search_dir: Path = Path("scenarios")) -> Path:
    """Accept a bundled scenario name (``legacy_like``) or a file path."""
    candidate = Path(name_or_path)
    if candidate.is_file():
        return candidate
    bundled = Path(search_dir) / f"{name_or_path}{SCENARIO_SUFFIX}"
    if bundled.is_file():
        return bundled
    raise ScenarioError(name_or_path, f"no scenario file and no {bundled}")


def _fill(text: str, command: str) -> str:
    return text.replace("{argv0}", argv0(command)).replace("{command}", command)


def match_rule(scenario: Scenario, command: str) -> tuple[Optional[int], DefaultRule]:
    """First rule in file order whose regex matches, else the default rule."""
    for index, rule in enumerate(scenario.rules):
        if re.search(rule.match, command):
            return index, rule
    return None, scenario.default_rule


def sim_execute(
    scenario: Scenario,
    spec: CommandSpec,
    clock: Optional[Clock] = None,
    budget_sec: Optional[float] = None,
) -> RawOutcome:
    """Play ``spec`` against the scenario, advancing ``clock`` by the simulated duration."""
    # Find the rule and the kill deadline
    index, rule = match_rule(scenario, spec.command)
    limit_ms, by_budget = effective_limit_ms(spec.timeout_sec, budget_sec)

    # Rule outlasts the deadline: report a timeout at the deadline
    if rule.delay_ms >= limit_ms:
        if clock is not None:
            clock.sleep(limit_ms / 1000)
        logger.debug(f"sim rule {index} outlasted {limit_ms} ms: {spec.command}")
        return RawOutcome(
            exit_code=TIMEOUT_EXIT_CODE,
            stdout="",
            stderr="",
            duration_ms=limit_ms,
            timed_out=True,
            budget_exhausted=by_budget,
        )

    # Completed within the deadline
    if clock is not None:
        clock.sleep(rule.delay_ms / 1000)

    stdout = _fill(rule.stdout, spec.command)
    # Shell grants always carry the marker
    if getattr(rule, "grants_shell", False) and scenario.shell_marker not in stdout:
        stdout = f"{stdout.rstrip()}\n{scenario.shell_marker}\n".lstrip("\n")

    logger.debug(f"sim rule {index} -> exit {rule.exit_code}: {spec.command}")
    return RawOutcome(
        exit_code=rule.exit_code,
        stdout=stdout,
        stderr=_fill(rule.stderr, spec.command),
        duration_ms=rule.delay_ms,
        timed_out=False,
    )


class SimExecutor:
    """Executor backed by a scenario; shares the real executor's contract."""

    def __init__(self, scenario: Scenario, clock: Optional[Clock] = None):
        self.scenario = scenario
        self.clock = clock

    def execute(self, spec: CommandSpec, budget_sec: Optional[float] = None) -> RawOutcome:
        return sim_execute(self.scenario, spec, self.clock, budget_sec)
