#!/usr/bin/env python3
"""
Tests for the simulated target: scenario loading and validation, rule
matching, virtual-time delays and timeouts.
"""

import json
from pathlib import Path

import pytest

from app.services.executor import argv0
from app.services.simlab import SimExecutor, load_scenario, match_rule, resolve_scenario, sim_execute
from app.utils.errors import ScenarioError
from app.utils.types import CommandSpec
from conftest import REPO_ROOT, SCENARIO_PATH


def spec(command: str, timeout_sec: int = 30) -> CommandSpec:
    return CommandSpec(command=command, timeout_sec=timeout_sec)


def write_scenario(tmp_path, **overrides) -> Path:
    doc = {"name": "tiny", "rules": [{"match": "^echo\\b", "stdout": "hi\n"}]}
    doc.update(overrides)
    path = tmp_path / "tiny.scenario.json"
    path.write_text(json.dumps(doc), encoding="utf-8")
    return path


def test_bundled_scenario_loads(scenario):
    assert scenario.name == "legacy_like"
    assert [p.port for p in scenario.hosts[0].ports] == [135, 139, 445]
    assert sum(rule.grants_shell for rule in scenario.rules) == 1


@pytest.mark.parametrize(
    "command, index",
    [
        ('msfconsole -q -x "use exploit/windows/smb/ms17_010_eternalblue; set RHOST 10.10.10.4; run"', 0),
        ("nmap -p- -T4 -Pn 10.10.10.4", 1),
        ("rustscan -a 10.10.10.4 --ulimit 5000", 2),
        ("nmap -p 445 -Pn --script=smb-vuln-ms17-010 10.10.10.4", 3),
        ("smbclient -L //10.10.10.4 -N", 4),
        ('msfconsole -q -x "use exploit/windows/smb/ms08_067_netapi; run"', 5),
        ("nikto -h 10.10.10.4", None),
    ],
)
def test_first_matching_rule_wins(scenario, command, index):
    assert match_rule(scenario, command)[0] == index


def test_eternalblue_against_the_wrong_host_does_not_open_a_session(scenario):
    index, _ = match_rule(scenario, 'msfconsole -q -x "use exploit/windows/smb/ms17_010_eternalblue; set RHOST 10.10.10.40; run"')
    assert index == 5


def test_delay_advances_the_virtual_clock(scenario, clock):
    before = clock.monotonic()
    outcome = sim_execute(scenario, spec("rustscan -a 10.10.10.4"), clock)

    assert clock.monotonic() - before == pytest.approx(8.0)
    assert (outcome.exit_code, outcome.timed_out, outcome.duration_ms) == (0, False, 8000)
    assert "445/tcp open  microsoft-ds" in outcome.stdout


def test_slow_rule_times_out_at_the_command_timeout(scenario, clock):
    outcome = sim_execute(scenario, spec("nmap -p- -T4 -Pn 10.10.10.4", timeout_sec=30), clock)

    assert outcome.timed_out
    assert (outcome.exit_code, outcome.stdout, outcome.stderr) == (-1, "", "")
    assert not outcome.budget_exhausted
    assert clock.monotonic() == pytest.approx(30.0)


def test_delay_equal_to_timeout_is_a_timeout(scenario, clock):
    outcome = sim_execute(scenario, spec("smbclient -L //10.10.10.4 -N", timeout_sec=4), clock)
    assert outcome.timed_out


def test_remaining_budget_cuts_the_command_short(scenario, clock):
    outcome = sim_execute(scenario, spec("rustscan -a 10.10.10.4", timeout_sec=30), clock, budget_sec=5)

    assert outcome.timed_out and outcome.budget_exhausted
    assert outcome.duration_ms == 5000
    assert clock.monotonic() == pytest.approx(5.0)


def test_default_rule_fills_argv0(scenario):
    outcome = sim_execute(scenario, spec("nikto -h 10.10.10.4"))
    assert outcome.exit_code == 127
    assert outcome.stderr == "sh: 1: nikto: not found\n"


@pytest.mark.parametrize(
    "command, expected",
    [
        ("nikto -h 10.10.10.4", "nikto"),
        ("\"/opt/my tools/scan\" 10.10.10.4", "/opt/my tools/scan"),
        ("echo \"unbalanced", "echo"),
        ("", ""),
    ],
)
def test_argv0_splits_like_the_shell(command, expected):
    assert argv0(command) == expected


def test_shell_grant_carries_the_marker(scenario):
    outcome = sim_execute(
        scenario,
        spec('msfconsole -q -x "use exploit/windows/smb/ms17_010_eternalblue; set RHOST 10.10.10.4; run; exit"', timeout_sec=60),
    )
    assert "Meterpreter session 1 opened (10.10.14.22:4444 -> 10.10.10.4:1031)" in outcome.stdout


def test_marker_is_appended_when_the_rule_lacks_it(tmp_path):
    path = write_scenario(tmp_path, shell_marker="Command shell session 1 opened", rules=[{"match": "pwn", "stdout": "[*] done", "grants_shell": True}])
    outcome = sim_execute(load_scenario(path), spec("pwn 10.10.10.4"))
    assert outcome.stdout == "[*] done\nCommand shell session 1 opened\n"


def test_same_command_same_outcome(scenario, clock):
    executor = SimExecutor(scenario, clock)
    first = executor.execute(spec("smbmap -H 10.10.10.4"))
    second = executor.execute(spec("smbmap -H 10.10.10.4"))
    assert first == second
    assert clock.monotonic() == pytest.approx(8.0)


def test_malformed_json_reports_line_and_column(tmp_path):
    path = tmp_path / "bad.scenario.json"
    path.write_text('{\n  "name": "x",\n  "rules": [,]\n}\n', encoding="utf-8")
    with pytest.raises(ScenarioError) as exc:
        load_scenario(path)
    assert exc.value.location == f"{path}:3:13"


@pytest.mark.parametrize(
    "overrides, location",
    [
        ({"rules": [{"match": "("}]}, "$.rules[0].match"),
        ({"rules": [{"match": "x", "exit_code": 300}]}, "$.rules[0].exit_code"),
        ({"default_rule": {"exit_code": -1}}, "$.default_rule.exit_code"),
        ({"rules": [{"match": "a", "delay_ms": -5}]}, "$.rules[0].delay_ms"),
        ({"hosts": [{"ip": "10.10.10.999"}]}, "$.hosts[0].ip"),
    ],
)
def test_invalid_fields_report_their_json_path(tmp_path, overrides, location):
    path = write_scenario(tmp_path, **overrides)
    with pytest.raises(ScenarioError) as exc:
        load_scenario(path)
    assert exc.value.location == f"{path} {location}"


def test_only_one_rule_may_grant_a_shell(tmp_path):
    path = write_scenario(tmp_path, rules=[{"match": "a", "grants_shell": True}, {"match": "b", "grants_shell": True}])
    with pytest.raises(ScenarioError, match="at most one"):
        load_scenario(path)


def test_missing_file(tmp_path):
    with pytest.raises(ScenarioError, match="cannot read"):
        load_scenario(tmp_path / "nope.json")


def test_resolve_scenario_by_name_or_path(tmp_path):
    assert resolve_scenario("legacy_like", REPO_ROOT / "scenarios") == SCENARIO_PATH
    assert resolve_scenario(str(SCENARIO_PATH)) == SCENARIO_PATH
    with pytest.raises(ScenarioError, match="no scenario file"):
        resolve_scenario("missing", tmp_path)
