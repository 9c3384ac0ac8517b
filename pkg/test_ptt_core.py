#!/usr/bin/env python3
"""
Tests for the Pentesting Task Tree: parsing, invariants, canonical
serialization and the mutation helpers the planner and Act side use.
"""

import copy
import json
import random
from datetime import datetime, timedelta, timezone

import pytest

from app.models.ptt import (
    claim_task,
    count_nodes,
    find_task,
    finish_ptt,
    iter_nodes,
    last_executed_task,
    merge_new_tasks,
    new_ptt,
    parent_id_of,
    parse_ptt,
    record_act_result,
    render_tree,
    runnable_leaves,
    serialize_ptt,
    set_status,
)
from app.utils.errors import (
    AttemptLimitExceeded,
    IllegalTransition,
    InvariantError,
    NotALeaf,
    NotInProgress,
    SchemaError,
    UnknownParent,
    UnknownTask,
)
from app.utils.types import PTT, ActResult, ExitClass, NewTaskProposal, RunStatus, TaskNode, TaskStatus
from conftest import FIXTURES, START, load_fixture


def sample_doc() -> dict:
    return load_fixture("sample_ptt.json")


def proposal(title: str, detail: str = "") -> NewTaskProposal:
    return NewTaskProposal(title=title, detail=detail or f"{title} on 10.10.10.4")


def result(exit_class: ExitClass = ExitClass.SUCCESS, summary: str = "Port 445 is open.", command: str = "nmap 10.10.10.4") -> ActResult:
    if exit_class is ExitClass.TIMEOUT:
        return ActResult(command=command, timeout_sec=30, exit_code=-1, exit_class=exit_class)
    return ActResult(command=command, timeout_sec=30, exit_code=0, exit_class=exit_class, log_summary=summary)


def fresh() -> PTT:
    return new_ptt("10.10.10.4", "10.10.14.22", START, "legacy host")


# ---- parsing and serialization -------------------------------------------------

def test_parse_sample_tree():
    ptt = parse_ptt((FIXTURES / "sample_ptt.json").read_bytes())

    assert ptt.metadata.status is RunStatus.SUCCESS
    assert ptt.metadata.rhost == "10.10.10.40"
    assert ptt.metadata.lhost == "10.10.14.22"
    assert ptt.root.status is TaskStatus.completed
    assert ptt.root.act_results[0].timeout_sec == 60
    assert [n.id for n in iter_nodes(ptt)] == ["1", "1.1"]


def test_canonical_serialization_is_stable():
    ptt = parse_ptt(json.dumps(sample_doc()))
    text = serialize_ptt(ptt)

    assert serialize_ptt(parse_ptt(text)) == text
    assert json.loads(text) == sample_doc()
    assert not text.endswith("\n")
    assert list(json.loads(text)) == ["version", "metadata", "root"]


def test_absent_finished_at_is_omitted():
    text = serialize_ptt(fresh())
    assert "finished_at" not in json.loads(text)["metadata"]


def test_timestamps_normalise_to_utc_z():
    doc = sample_doc()
    doc["metadata"]["started_at"] = "2025-02-13T23:01:52+01:00"
    ptt = parse_ptt(json.dumps(doc))
    assert json.loads(serialize_ptt(ptt))["metadata"]["started_at"] == "2025-02-13T22:01:52Z"


def test_naive_timestamp_is_rejected():
    doc = sample_doc()
    doc["metadata"]["started_at"] = "2025-02-13T22:01:52"
    with pytest.raises(SchemaError) as exc:
        parse_ptt(json.dumps(doc))
    assert exc.value.path == "$.metadata.started_at"


def test_non_ascii_text_survives_serialization():
    ptt, _ = merge_new_tasks(fresh(), "1", [proposal("Énumérer SMB", "Vérifier le partage ☃")])
    text = serialize_ptt(ptt)
    assert "Vérifier le partage ☃" in text
    assert find_task(parse_ptt(text.encode("utf-8")), "1.1").title == "Énumérer SMB"


def test_last_executed_task_fixture_is_a_valid_node():
    node = TaskNode.model_validate(load_fixture("last_executed_task.json"))
    assert node.id == "1.3.1.4"
    assert node.act_results[0].exit_class is ExitClass.SUCCESS
    assert "MS17-010 (CVE-2017-0143)" in node.act_results[0].log_summary


@pytest.mark.parametrize(
    "mutate, path",
    [
        (lambda d: d["metadata"]["attacker"].pop("LHOST"), "$.metadata.attacker.LHOST"),
        (lambda d: d.update(version="3"), "$.version"),
        (lambda d: d["root"].update(status="done"), "$.root.status"),
        (lambda d: d["root"]["subtasks"][0].update(id="1.x"), "$.root.subtasks[0].id"),
        (lambda d: d["root"]["act_results"][0].update(exit_code="zero"), "$.root.act_results[0].exit_code"),
    ],
)
def test_schema_errors_name_the_offending_field(mutate, path):
    doc = sample_doc()
    mutate(doc)
    with pytest.raises(SchemaError) as exc:
        parse_ptt(json.dumps(doc))
    assert exc.value.path == path


def test_invalid_json_and_encoding():
    with pytest.raises(SchemaError, match="invalid JSON"):
        parse_ptt('{"version": "2",')
    with pytest.raises(SchemaError, match="not UTF-8"):
        parse_ptt(b"\xff\xfe{}")


def test_timeout_exit_code_must_pair_with_timeout_class():
    doc = sample_doc()
    doc["root"]["act_results"][0]["exit_code"] = -1
    with pytest.raises(SchemaError, match="reserved for TIMEOUT"):
        parse_ptt(json.dumps(doc))


def test_empty_summary_only_allowed_for_timeouts():
    doc = sample_doc()
    doc["root"]["act_results"][0]["log_summary"] = "  "
    with pytest.raises(SchemaError):
        parse_ptt(json.dumps(doc))

    doc["root"]["act_results"][0].update(exit_code=-1, exit_class="TIMEOUT", log_summary="")
    assert parse_ptt(json.dumps(doc)).root.act_results[0].exit_class is ExitClass.TIMEOUT


def test_lhost_must_differ_from_rhost():
    doc = sample_doc()
    doc["metadata"]["attacker"]["LHOST"] = "10.10.10.40"
    with pytest.raises(SchemaError, match="must differ"):
        parse_ptt(json.dumps(doc))


# ---- tree invariants ------------------------------------------------------------

def test_child_ids_must_follow_parent_and_ordinal():
    doc = sample_doc()
    doc["root"]["subtasks"][0]["id"] = "1.2"
    with pytest.raises(InvariantError, match="expected 1.1"):
        parse_ptt(json.dumps(doc))


def test_root_must_be_one():
    doc = sample_doc()
    doc["root"]["id"] = "2"
    doc["root"]["subtasks"][0]["id"] = "2.1"
    with pytest.raises(InvariantError, match="root id"):
        parse_ptt(json.dumps(doc))


def test_running_task_must_be_a_leaf():
    doc = sample_doc()
    doc["root"]["status"] = "in_progress"
    with pytest.raises(InvariantError, match="in_progress"):
        parse_ptt(json.dumps(doc))


def test_act_results_are_capped():
    doc = sample_doc()
    doc["root"]["act_results"] = [copy.deepcopy(doc["root"]["act_results"][0]) for _ in range(4)]
    with pytest.raises(InvariantError, match="limit is 3"):
        parse_ptt(json.dumps(doc))
    assert parse_ptt(json.dumps(doc), max_attempts=4).root.act_results[3].command == "(omit)"


# ---- mutation -------------------------------------------------------------------

def test_merge_appends_children_with_next_ordinals():
    base = fresh()
    first, added = merge_new_tasks(base, "1", [proposal("Full TCP port scan")])
    second, added_again = merge_new_tasks(first, "1", [proposal("UDP scan"), proposal("Banner grab")])

    assert (added, added_again) == (1, 2)
    assert [c.id for c in second.root.subtasks] == ["1.1", "1.2", "1.3"]
    assert all(c.status is TaskStatus.pending for c in second.root.subtasks)
    assert base.root.subtasks == []
    assert count_nodes(second) == 4


def test_merge_with_nothing_returns_the_same_tree():
    base = fresh()
    updated, added = merge_new_tasks(base, "1", [])
    assert added == 0
    assert updated is base


def test_merge_rejects_unknown_and_running_parents():
    ptt, _ = merge_new_tasks(fresh(), "1", [proposal("Full TCP port scan")])
    with pytest.raises(UnknownParent):
        merge_new_tasks(ptt, "1.9", [proposal("x")])

    running = claim_task(ptt, "1.1")
    with pytest.raises(InvariantError, match="must stay a leaf"):
        merge_new_tasks(running, "1.1", [proposal("Deeper")])


def test_status_transitions():
    ptt, _ = merge_new_tasks(fresh(), "1", [proposal("Full TCP port scan")])

    with pytest.raises(IllegalTransition):
        set_status(ptt, "1.1", TaskStatus.completed)
    with pytest.raises(NotALeaf):
        claim_task(ptt, "1")

    done = set_status(claim_task(ptt, "1.1"), "1.1", TaskStatus.completed)
    assert find_task(done, "1.1").status is TaskStatus.completed
    with pytest.raises(IllegalTransition):
        set_status(done, "1.1", TaskStatus.in_progress)

    failed = set_status(claim_task(ptt, "1.1"), "1.1", TaskStatus.failed)
    with pytest.raises(IllegalTransition):
        claim_task(failed, "1.1")
    with pytest.raises(UnknownTask):
        claim_task(ptt, "1.4")


def test_record_act_result_settles_status():
    ptt, _ = merge_new_tasks(fresh(), "1", [proposal("Full TCP port scan")])

    with pytest.raises(NotInProgress):
        record_act_result(ptt, "1.1", result())

    running = claim_task(ptt, "1.1")
    kept = record_act_result(running, "1.1", result(ExitClass.TIMEOUT))
    assert find_task(kept, "1.1").status is TaskStatus.in_progress
    assert find_task(running, "1.1").act_results == []

    done = record_act_result(kept, "1.1", result(), conclusive=True)
    assert find_task(done, "1.1").status is TaskStatus.completed

    spent = record_act_result(kept, "1.1", result(ExitClass.OTHERS, "Access denied."), exhausted=True)
    assert find_task(spent, "1.1").status is TaskStatus.failed


def test_inconclusive_success_is_not_completion():
    running = claim_task(merge_new_tasks(fresh(), "1", [proposal("Scan")])[0], "1.1")
    updated = record_act_result(running, "1.1", result(), conclusive=False)
    assert find_task(updated, "1.1").status is TaskStatus.in_progress


def test_attempt_limit():
    ptt = claim_task(merge_new_tasks(fresh(), "1", [proposal("Scan")])[0], "1.1")
    for _ in range(3):
        ptt = record_act_result(ptt, "1.1", result(ExitClass.OTHERS, "Nothing."))
    with pytest.raises(AttemptLimitExceeded):
        record_act_result(ptt, "1.1", result(ExitClass.OTHERS, "Nothing."))


def test_runnable_leaves_in_document_order():
    ptt, _ = merge_new_tasks(fresh(), "1", [proposal("A"), proposal("B")])
    ptt, _ = merge_new_tasks(ptt, "1.1", [proposal("A1"), proposal("A2")])
    ptt = set_status(claim_task(ptt, "1.1.1"), "1.1.1", TaskStatus.failed)

    assert [leaf.id for leaf in runnable_leaves(ptt)] == ["1.1.2", "1.2"]


def test_last_executed_task_follows_append_order():
    ptt, _ = merge_new_tasks(fresh(), "1", [proposal("A"), proposal("B")])
    assert last_executed_task(ptt) is None

    ptt = record_act_result(claim_task(ptt, "1.2"), "1.2", result(), conclusive=True)
    ptt = record_act_result(claim_task(ptt, "1.1"), "1.1", result(ExitClass.TIMEOUT))
    assert last_executed_task(ptt).id == "1.1"

    ptt = record_act_result(ptt, "1.1", result(), conclusive=True)
    assert last_executed_task(ptt).id == "1.1"
    assert ptt.append_counter("1.1") > ptt.append_counter("1.2")


def test_last_executed_task_after_reload_uses_document_order():
    ptt, _ = merge_new_tasks(fresh(), "1", [proposal("A"), proposal("B")])
    ptt = record_act_result(claim_task(ptt, "1.2"), "1.2", result(), conclusive=True)
    ptt = record_act_result(claim_task(ptt, "1.1"), "1.1", result(), conclusive=True)

    reloaded = parse_ptt(serialize_ptt(ptt))
    assert last_executed_task(reloaded).id == "1.2"


def test_parent_id_of():
    assert parent_id_of("1.3.1.4") == "1.3.1"
    assert parent_id_of("1") is None


def test_finish_ptt_stamps_outcome():
    finished = finish_ptt(fresh(), RunStatus.FAILURE, START + timedelta(minutes=6))
    assert finished.metadata.status is RunStatus.FAILURE
    assert json.loads(serialize_ptt(finished))["metadata"]["finished_at"] == "2025-02-13T22:07:52Z"

    clamped = finish_ptt(fresh(), RunStatus.ABORTED, START - timedelta(seconds=1))
    assert clamped.metadata.finished_at == clamped.metadata.started_at


def test_render_tree_lists_commands():
    ptt, _ = merge_new_tasks(fresh(), "1", [proposal("Full TCP port scan")])
    ptt = record_act_result(claim_task(ptt, "1.1"), "1.1", result(ExitClass.TIMEOUT, command="nmap -p- 10.10.10.4"))
    text = render_tree(ptt)

    assert "- [pending] 1 Reconnaissance" in text
    assert "  - [in_progress] 1.1 Full TCP port scan" in text
    assert "`nmap -p- 10.10.10.4` -> TIMEOUT (timeout 30s)" in text


# ---- randomized trees -----------------------------------------------------------

def random_tree(rng: random.Random):
    ptt = new_ptt("10.10.10.4", "10.10.14.22", datetime(2025, 1, 1, tzinfo=timezone.utc) + timedelta(seconds=rng.randrange(10**6)))
    for _ in range(rng.randrange(1, 12)):
        parents = [n for n in iter_nodes(ptt) if n.status is not TaskStatus.in_progress]
        parent = rng.choice(parents)
        ptt, _ = merge_new_tasks(ptt, parent.id, [proposal(f"task {rng.random():.6f}") for _ in range(rng.randrange(1, 3))])
    for leaf in runnable_leaves(ptt):
        if rng.random() < 0.5:
            ptt = claim_task(ptt, leaf.id)
            for _ in range(rng.randrange(0, 4)):
                if find_task(ptt, leaf.id).status is not TaskStatus.in_progress:
                    break
                ptt = record_act_result(
                    ptt,
                    leaf.id,
                    rng.choice([result(), result(ExitClass.TIMEOUT), result(ExitClass.OTHERS, "denied")]),
                    conclusive=rng.random() < 0.5,
                    exhausted=rng.random() < 0.3,
                )
    return ptt


def test_random_trees_survive_serialization():
    for seed in range(500):
        ptt = random_tree(random.Random(seed))
        text = serialize_ptt(ptt)
        again = parse_ptt(text)

        assert again.model_dump() == ptt.model_dump(), seed
        assert serialize_ptt(again) == text, seed
