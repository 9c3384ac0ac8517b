"""Re module: task-tree expansion, deduplication and prioritisation.

Expansion combines two sources of new tasks. The base planner proposes
follow-ups from the tree itself; when the success-case corpus is enabled, a
retrieved past success is analysed for the tasks that followed a situation
like the one just executed. Survivors of deduplication are merged into the
tree under the parent the planner names.
"""

import json
import logging
import re
import string
from contextlib import nullcontext
from functools import lru_cache
from ipaddress import IPv4Address
from typing import Optional

from app.models.ptt import find_task, iter_nodes, merge_new_tasks, parent_id_of, parse_ptt, runnable_leaves, serialize_ptt
from app.services.executor import IPV4_LITERAL_RE
from app.services.llm_gateway import LlmGateway
from app.services.rag_store import RagStore
from app.utils.config import AppSettings
from app.utils.errors import LintReject, MissingScript, NoRunnableTasks, NonLeafSelected, PentestError, UnknownTask
from app.utils.events import EventLog
from app.utils.types import (
    PTT,
    Corpus,
    DedupVerdict,
    EnvMetadata,
    LlmRole,
    Module,
    NewTaskProposal,
    PlannerExpansion,
    PlanStep,
    PrioritySelection,
    SuccessCaseAnalysis,
    SuccessQuery,
    TaskNode,
)

logger = logging.getLogger(__name__)

ROOT_ID = "1"

_PUNCTUATION = re.compile(f"[{re.escape(string.punctuation)}]")


@lru_cache(maxsize=64)
def ip_pattern(address: str) -> re.Pattern:
    """Match ``address`` only as a whole dotted quad (10.10.10.4 never inside 10.10.10.40)."""
    return re.compile(rf"(?<![\d.]){re.escape(address)}(?!\.?\d)")


def mentions_ip(text: str, address: str) -> bool:
    return ip_pattern(address).search(text) is not None


def replace_ip(text: str, old: str, new: str) -> str:
    return ip_pattern(old).sub(new, text)


def normalize_task(title: str, detail: str) -> str:
    """Lowercase, strip punctuation, collapse whitespace."""
    text = _PUNCTUATION.sub("", f"{title} {detail}".lower())
    return " ".join(text.split())


def describe_task(node: Optional[TaskNode]) -> str:
    """Prompt rendering of one node and its execution history."""
    if node is None:
        return "none (nothing has been executed yet)"
    return json.dumps(node.model_dump(mode="json", exclude={"subtasks"}), indent=2, ensure_ascii=False)


def describe_proposals(proposals: list[NewTaskProposal]) -> str:
    if not proposals:
        return "none"
    return json.dumps([p.model_dump(mode="json") for p in proposals], indent=2, ensure_ascii=False)


class RePlanner:
    """Planner, prioritiser and success-case task generator for one run."""

    def __init__(
        self,
        gateway: LlmGateway,
        rag: Optional[RagStore],
        settings: AppSettings,
        events: Optional[EventLog] = None,
        success_cases_enabled: bool = True,
        lenient_prioritizer: bool = False,
    ):
        self.gateway = gateway
        self.rag = rag
        self.settings = settings
        self.events = events
        self.success_cases_enabled = success_cases_enabled
        self.lenient_prioritizer = lenient_prioritizer
        self.step_index = 0
        # RHOSTs of success cases seen this run; none may leak into the tree
        self.foreign_rhosts: set[str] = set()
        self._lint_dropped = 0

    def _span(self, module: Module):
        if self.events is None:
            return nullcontext()
        return self.events.span(module)

    # ---- L2: success cases ----------------------------------------------------

    def gen_success_query(self, last_task: TaskNode) -> str:
        """Search query for the success-case corpus built from the latest results."""
        reply = self.gateway.complete_structured(
            LlmRole.SuccessQueryGen,
            {"last_task": describe_task(last_task)},
            SuccessQuery,
        )
        logger.info(f"Success-case query: {reply.query!r}")
        return reply.query

    def analyze_success_case(
        self,
        last_task: TaskNode,
        retrieved: Optional[PTT],
        env: EnvMetadata,
    ) -> list[NewTaskProposal]:
        """Derive new tasks from a past success, rewritten for the current target.

        The success case's LHOST is replaced with the current one. Proposals
        still naming the success case's RHOST are dropped.
        """
        if retrieved is None:
            logger.info("No success case retrieved; no L2 tasks")
            return []

        case_rhost = retrieved.metadata.rhost
        case_lhost = retrieved.metadata.lhost
        if case_rhost != env.rhost:
            self.foreign_rhosts.add(case_rhost)

        analysis = self.gateway.complete_structured(
            LlmRole.SuccessCaseAnalyze,
            {
                "last_task": describe_task(last_task),
                "success_case": serialize_ptt(retrieved),
                "rhost": env.rhost,
                "lhost": env.lhost,
            },
            SuccessCaseAnalysis,
        )

        proposals = []
        for task in analysis.new_tasks:
            if case_lhost != env.lhost:
                task = task.model_copy(
                    update={
                        "title": replace_ip(task.title, case_lhost, env.lhost),
                        "detail": replace_ip(task.detail, case_lhost, env.lhost),
                    }
                )
            proposals.append(task)
        return self.lint(proposals, env)

    def lint(
        self,
        proposals: list[NewTaskProposal],
        env: EnvMetadata,
        task_ids: frozenset[str] = frozenset(),
    ) -> list[NewTaskProposal]:
        """Drop proposals that name an address other than the run's own.

        RHOST, LHOST, loopback and 0.0.0.0 may appear. Dotted task ids of the
        current tree (``1.1.1.1``) are not addresses.
        """
        kept = []
        for proposal in proposals:
            try:
                self._check_foreign(proposal, env, task_ids)
            except LintReject as e:
                logger.warning(f"Dropped proposal {proposal.title!r}: {e}")
                self._lint_dropped += 1
                if self.events is not None:
                    self.events.emit("lint_reject", title=proposal.title, reason=str(e))
                continue
            kept.append(proposal)
        return kept

    def _check_foreign(self, proposal: NewTaskProposal, env: EnvMetadata, task_ids: frozenset[str]) -> None:
        allowed = {env.rhost, env.lhost}
        for text in (proposal.title, proposal.detail):
            for literal in IPV4_LITERAL_RE.findall(text):
                if literal in allowed or literal in task_ids:
                    continue
                try:
                    address = IPv4Address(literal)
                except ValueError:
                    continue
                if address.is_loopback or address.is_unspecified:
                    continue
                kind = "success-case RHOST" if literal in self.foreign_rhosts else "address"
                raise LintReject(f"mentions foreign {kind} {literal}")

    # ---- L1: planner ----------------------------------------------------------

    def expand(self, ptt: PTT, last_task: Optional[TaskNode]) -> tuple[PTT, PlanStep]:
        """One expansion step: success-case tasks, base proposals, dedup, merge."""
        self._lint_dropped = 0
        success_proposals: list[NewTaskProposal] = []
        case_used: Optional[str] = None

        if self.success_cases_enabled and last_task is not None and self.rag is not None:
            with self._span(Module.ReL2SuccessCases):
                query = self.gen_success_query(last_task)
                hits = self.rag.query(Corpus.success_cases, query, k=self.settings.success_cases_k)
                retrieved = None
                if hits:
                    case_used = hits[0].doc.source_path
                    retrieved = parse_ptt(hits[0].doc.body)
                    logger.info(f"Retrieved success case {case_used} (score {hits[0].score:.3f})")
                success_proposals = self.analyze_success_case(last_task, retrieved, ptt.metadata)

        with self._span(Module.RePlanner):
            default_parent = (parent_id_of(last_task.id) or ROOT_ID) if last_task is not None else ROOT_ID
            expansion = self.gateway.complete_structured(
                LlmRole.PlannerExpand,
                {
                    "ptt": serialize_ptt(ptt),
                    "last_task": describe_task(last_task),
                    "success_proposals": describe_proposals(success_proposals),
                    "default_parent": default_parent,
                    "rhost": ptt.metadata.rhost,
                    "lhost": ptt.metadata.lhost,
                },
                PlannerExpansion,
            )

            parent = expansion.parent_id or default_parent
            try:
                find_task(ptt, parent)
            except UnknownTask:
                logger.warning(f"Planner named unknown parent {parent}; using {default_parent}")
                parent = default_parent

            task_ids = frozenset(node.id for node in iter_nodes(ptt))
            candidates = success_proposals + self.lint(expansion.tasks, ptt.metadata, task_ids)
            survivors = self.dedup(candidates, ptt)
            updated, added = merge_new_tasks(ptt, parent, survivors)

        self.step_index += 1
        first = len(find_task(updated, parent).subtasks) - added + 1
        step = PlanStep(
            step_index=self.step_index,
            parent_id=parent,
            added_task_ids=[f"{parent}.{n}" for n in range(first, first + added)],
            dedup_dropped=len(candidates) - len(survivors),
            lint_dropped=self._lint_dropped,
            success_case_used=case_used,
        )
        logger.info(f"Plan step {step.step_index}: +{added} under {parent} ({step.dedup_dropped} duplicate(s) dropped)")
        return updated, step

    def dedup(self, candidates: list[NewTaskProposal], ptt: PTT) -> list[NewTaskProposal]:
        """Order-preserving subset of ``candidates`` with duplicates removed.

        Exact duplicates (after normalisation) of a tree node or an earlier
        candidate go first, without a model call. The model then judges the
        rest; if it cannot be consulted only the exact filter applies.
        """
        seen = {normalize_task(node.title, node.detail) for node in iter_nodes(ptt)}
        prefiltered = []
        for candidate in candidates:
            key = normalize_task(candidate.title, candidate.detail)
            if key in seen:
                logger.info(f"Exact duplicate dropped: {candidate.title!r}")
                continue
            seen.add(key)
            prefiltered.append(candidate)

        if not prefiltered:
            return []

        existing = "\n".join(f"{node.id}: {node.title} -- {node.detail}" for node in iter_nodes(ptt))
        listed = "\n".join(f"{i}: {c.title} -- {c.detail}" for i, c in enumerate(prefiltered))
        try:
            verdict = self.gateway.complete_structured(
                LlmRole.TaskDedup,
                {"existing": existing, "candidates": listed},
                DedupVerdict,
            )
        except PentestError as e:
            logger.warning(f"Dedup model unavailable, keeping exact-filter result: {e}")
            return prefiltered

        dropped = set(verdict.duplicate_indices)
        if stray := sorted(i for i in dropped if i >= len(prefiltered)):
            logger.warning(f"Dedup named indices {stray} beyond {len(prefiltered)} candidates; ignored")
        return [c for i, c in enumerate(prefiltered) if i not in dropped]

    # ---- L1: prioritizer ------------------------------------------------------

    def prioritize(self, ptt: PTT) -> str:
        """Id of the next task to run, always a pending leaf.

        Raises:
            NoRunnableTasks: nothing is pending.
            NonLeafSelected: the model chose anything but a runnable leaf and
                the prioritizer is not lenient.
        """
        leaves = runnable_leaves(ptt)
        if not leaves:
            raise NoRunnableTasks("no pending leaf tasks")

        with self._span(Module.RePrioritizer):
            if len(leaves) == 1:
                return leaves[0].id

            runnable_ids = [leaf.id for leaf in leaves]
            try:
                selection = self.gateway.complete_structured(
                    LlmRole.Prioritize,
                    {
                        "ptt": serialize_ptt(ptt),
                        "runnable": "\n".join(f"{leaf.id}: {leaf.title}" for leaf in leaves),
                        "rhost": ptt.metadata.rhost,
                    },
                    PrioritySelection,
                )
            except MissingScript as e:
                logger.warning(f"No scripted priority ({e}); taking the first runnable task {runnable_ids[0]}")
                return runnable_ids[0]

            if selection.task_id in runnable_ids:
                return selection.task_id
            if self.lenient_prioritizer:
                logger.warning(f"Prioritizer chose {selection.task_id!r}, not runnable; falling back to {runnable_ids[0]}")
                return runnable_ids[0]
            logger.error(f"Prioritizer chose {selection.task_id!r}, not one of {runnable_ids}")
            raise NonLeafSelected(f"prioritizer selected {selection.task_id!r}, which is not a runnable leaf")
