"""Pentesting Task Tree: parsing, canonical serialization and mutation.

Mutating operations never touch their input; they return an updated deep
copy, so a caller may keep an old snapshot around while the engine moves on.
"""

import json
import logging
from datetime import datetime
from typing import Iterator, Optional, Union

from pydantic import ValidationError

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
from app.utils.types import (
    PTT,
    PTT_VERSION,
    ActResult,
    AttackerInfo,
    EnvMetadata,
    ExitClass,
    NewTaskProposal,
    RunStatus,
    TargetInfo,
    TaskNode,
    TaskStatus,
)

logger = logging.getLogger(__name__)

DEFAULT_MAX_ATTEMPTS = 3

LEGAL_TRANSITIONS: frozenset[tuple[TaskStatus, TaskStatus]] = frozenset({
    (TaskStatus.pending, TaskStatus.in_progress),
    (TaskStatus.in_progress, TaskStatus.completed),
    (TaskStatus.in_progress, TaskStatus.failed),
})


def _json_path(loc: tuple) -> str:
    path = "$"
    for part in loc:
        path += f"[{part}]" if isinstance(part, int) else f".{part}"
    return path


def parse_ptt(text: Union[str, bytes], max_attempts: int = DEFAULT_MAX_ATTEMPTS) -> PTT:
    """Parse and fully validate a PTT JSON document.

    Raises:
        SchemaError: missing or mistyped field; ``path`` names where.
        InvariantError: the tree shape or status placement is illegal.
    """
    # Decode
    if isinstance(text, bytes):
        try:
            text = text.decode("utf-8")
        except UnicodeDecodeError as e:
            raise SchemaError("$", f"document is not UTF-8: {e}") from e
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise SchemaError("$", f"invalid JSON at line {e.lineno} column {e.colno}: {e.msg}") from e

    # Schema, then tree invariants
    try:
        ptt = PTT.model_validate(raw)
    except ValidationError as e:
        first = e.errors()[0]
        raise SchemaError(_json_path(tuple(first["loc"])), first["msg"]) from e

    validate_tree(ptt, max_attempts=max_attempts)
    return ptt


def validate_tree(ptt: PTT, max_attempts: int = DEFAULT_MAX_ATTEMPTS) -> None:
    """Check the tree-level invariants a schema cannot express."""
    if ptt.root.id != "1":
        raise InvariantError(f"root id must be '1', got {ptt.root.id!r}")

    seen: set[str] = set()
    stack = [ptt.root]
    while stack:
        node = stack.pop()
        if node.id in seen:
            raise InvariantError(f"duplicate task id {node.id}")
        seen.add(node.id)

        if node.status is TaskStatus.in_progress and not node.is_leaf:
            raise InvariantError(f"non-leaf task {node.id} is in_progress")
        if len(node.act_results) > max_attempts:
            raise InvariantError(
                f"task {node.id} holds {len(node.act_results)} act results, limit is {max_attempts}"
            )

        # Children are numbered 1..n under their parent
        for ordinal, child in enumerate(node.subtasks, start=1):
            expected = f"{node.id}.{ordinal}"
            if child.id != expected:
                raise InvariantError(f"child {ordinal} of {node.id} has id {child.id}, expected {expected}")
        stack.extend(reversed(node.subtasks))


def serialize_ptt(ptt: PTT) -> str:
    """Canonical JSON: schema key order, UTF-8 text, absent optionals omitted."""
    document = ptt.model_dump(mode="json", by_alias=True, exclude_none=True)
    return json.dumps(document, indent=2, ensure_ascii=False)


def new_ptt(rhost: str, lhost: str, started_at: datetime, description: str = "") -> PTT:
    """The tree every run starts from: a single pending Reconnaissance root."""
    return PTT(
        version=PTT_VERSION,
        metadata=EnvMetadata(
            started_at=started_at,
            status=RunStatus.RUNNING,
            attacker=AttackerInfo(lhost=lhost),
            target=TargetInfo(description=description, rhost=rhost),
        ),
        root=TaskNode(
            id="1",
            title="Reconnaissance",
            detail=f"Identify exposed services and vulnerabilities on {rhost} and obtain a shell.",
        ),
    )


def iter_nodes(ptt: PTT) -> Iterator[TaskNode]:
    """Depth-first, document order."""
    stack = [ptt.root]
    while stack:
        node = stack.pop()
        yield node
        stack.extend(reversed(node.subtasks))


def count_nodes(ptt: PTT) -> int:
    return sum(1 for _ in iter_nodes(ptt))


def parent_id_of(task_id: str) -> Optional[str]:
    head, sep, _ = task_id.rpartition(".")
    return head if sep else None


def find_task(ptt: PTT, task_id: str) -> TaskNode:
    for node in iter_nodes(ptt):
        if node.id == task_id:
            return node
    raise UnknownTask(f"no task {task_id}")


def merge_new_tasks(ptt: PTT, parent: str, proposals: list[NewTaskProposal]) -> tuple[PTT, int]:
    """Append each proposal as a pending leaf under ``parent``.

    Returns:
        The updated tree and the number of nodes added.
    """
    try:
        parent_node = find_task(ptt, parent)
    except UnknownTask as e:
        raise UnknownParent(f"merge parent {parent} does not exist") from e
    if not proposals:
        return ptt, 0
    if parent_node.status is TaskStatus.in_progress:
        raise InvariantError(f"task {parent} is running and must stay a leaf")

    # New ids continue after the existing children
    updated = ptt.model_copy(deep=True)
    node = find_task(updated, parent)
    first = len(node.subtasks) + 1
    for ordinal, proposal in enumerate(proposals, start=first):
        node.subtasks.append(TaskNode(id=f"{node.id}.{ordinal}", title=proposal.title, detail=proposal.detail))

    logger.info(f"Merged {len(proposals)} task(s) under {parent}")
    return updated, len(proposals)


def set_status(ptt: PTT, task: str, status: TaskStatus) -> PTT:
    """Move a task along pending -> in_progress -> {completed, failed}."""
    current = find_task(ptt, task).status
    if (current, status) not in LEGAL_TRANSITIONS:
        raise IllegalTransition(f"task {task}: {current.value} -> {status.value}")
    updated = ptt.model_copy(deep=True)
    node = find_task(updated, task)
    if status is TaskStatus.in_progress and not node.is_leaf:
        raise NotALeaf(f"task {task} has subtasks and cannot run")
    node.status = status
    return updated


def claim_task(ptt: PTT, task: str) -> PTT:
    return set_status(ptt, task, TaskStatus.in_progress)


def record_act_result(
    ptt: PTT,
    task: str,
    result: ActResult,
    *,
    conclusive: bool = False,
    exhausted: bool = False,
    max_attempts: int = DEFAULT_MAX_ATTEMPTS,
) -> PTT:
    """Append one execution record to a running leaf and settle its status.

    The caller decides whether the result was conclusive and whether the
    attempt budget is spent; the tree only applies the consequences.
    """
    node = find_task(ptt, task)
    if not node.is_leaf:
        raise NotALeaf(f"task {task} has subtasks")
    if node.status is not TaskStatus.in_progress:
        raise NotInProgress(f"task {task} is {node.status.value}")
    if len(node.act_results) >= max_attempts:
        raise AttemptLimitExceeded(f"task {task} already holds {max_attempts} act results")

    updated = ptt.model_copy(deep=True)
    node = find_task(updated, task)
    node.act_results.append(result)
    updated.mark_appended(task)

    # Settle status
    if result.exit_class is ExitClass.SUCCESS and conclusive:
        node.status = TaskStatus.completed
    elif exhausted:
        node.status = TaskStatus.failed
    return updated


def runnable_leaves(ptt: PTT) -> list[TaskNode]:
    """Pending leaves in depth-first document order."""
    return [n for n in iter_nodes(ptt) if n.is_leaf and n.status is TaskStatus.pending]


def last_executed_task(ptt: PTT) -> Optional[TaskNode]:
    """The node whose latest act result was appended most recently.

    Trees loaded from disk carry no append counter; for those the last node
    in document order holding any act result stands in.
    """
    if (task_id := ptt.last_appended_id) is not None:
        return find_task(ptt, task_id)
    executed = [n for n in iter_nodes(ptt) if n.act_results]
    return executed[-1] if executed else None


def finish_ptt(ptt: PTT, status: RunStatus, finished_at: datetime) -> PTT:
    updated = ptt.model_copy(deep=True)
    updated.metadata.status = status
    updated.metadata.finished_at = max(finished_at, updated.metadata.started_at)
    return updated


def render_tree(ptt: PTT) -> str:
    """Indented markdown list of the tree with each node's commands."""
    lines: list[str] = []

    def walk(node: TaskNode, depth: int) -> None:
        pad = "  " * depth
        lines.append(f"{pad}- [{node.status.value}] {node.id} {node.title}")
        for result in node.act_results:
            lines.append(f"{pad}  - `{result.command}` -> {result.exit_class.value} (timeout {result.timeout_sec}s)")
        for child in node.subtasks:
            walk(child, depth + 1)

    walk(ptt.root, 0)
    return "\n".join(lines)
