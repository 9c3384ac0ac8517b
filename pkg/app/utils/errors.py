"""Exception hierarchy for the pentest orchestrator.

Every failure the engine can reason about derives from ``PentestError`` so
the orchestrator can turn it into a run outcome instead of crashing.
"""

from typing import Optional


class PentestError(Exception):
    """Base class for all domain errors."""


# ---- PTT --------------------------------------------------------------------

class SchemaError(PentestError):
    """A PTT document is missing a field or has a mistyped one."""

    def __init__(self, path: str, message: str):
        self.path = path
        self.message = message
        super().__init__(f"{path}: {message}")


class InvariantError(PentestError):
    """A structurally valid PTT breaks a tree-level invariant."""


class UnknownTask(PentestError):
    """No node with the given id exists."""


class UnknownParent(UnknownTask):
    """Merge target does not exist."""


class NotALeaf(PentestError):
    """Operation requires a leaf node."""


class NotInProgress(PentestError):
    """Operation requires a node in status in_progress."""


class IllegalTransition(PentestError):
    """Status change outside pending -> in_progress -> {completed, failed}."""


class AttemptLimitExceeded(InvariantError):
    """A node would hold more act results than allowed."""


# ---- RAG --------------------------------------------------------------------

class BadDocument(PentestError):
    """A corpus file could not be ingested."""

    def __init__(self, path: str, cause: str):
        self.path = path
        self.cause = cause
        super().__init__(f"{path}: {cause}")


class UnknownCorpus(PentestError):
    """Corpus tag is not one of the known corpora."""


# ---- LLM gateway ------------------------------------------------------------

class BackendUnreachable(PentestError):
    """The model endpoint could not be reached or kept failing."""


class SchemaViolation(PentestError):
    """Model output failed validation even after the repair retry."""


class MissingScript(PentestError):
    """Scripted backend has no transcript entry for the request."""


class PromptTemplateError(PentestError):
    """A prompt template is missing or references an unknown placeholder."""


# ---- Planner / Act ----------------------------------------------------------

class LintReject(PentestError):
    """A proposal leaked a foreign target address."""


class NonLeafSelected(PentestError):
    """The prioritizer picked a task that is not a runnable leaf."""


class NoRunnableTasks(PentestError):
    """There is no pending leaf to run."""


class SpawnError(PentestError):
    """The executor itself failed to start the command."""


# ---- Simlab / orchestration / reporting -------------------------------------

class ScenarioError(PentestError):
    """Scenario file is malformed."""

    def __init__(self, location: str, message: str):
        self.location = location
        self.message = message
        super().__init__(f"{location}: {message}")


class ConfigError(PentestError):
    """Run configuration is invalid."""


class CorruptLog(PentestError):
    """An event log or run directory cannot be interpreted."""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(f"{prefix}{message}")
