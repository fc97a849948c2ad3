"""Core domain model: patterns, metadata, trajectories, config, repository.

Every other module builds on the types here. The two hard invariants are
enforced after each mutating operation:

* per-pattern counter ordering ``0 <= success <= utilization <= retrieval``
* maintenance threshold is always ``10 * 2**m``

Pattern ids are content-independent integers handed out in creation order,
which makes every tie-break in retrieval, pruning, and merging deterministic.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterator, Sequence

SCHEMA_VERSION = 1
FIRST_MAINTENANCE_THRESHOLD = 10


# ---------------------------------------------------------------------------
# Errors


class PatternBankError(Exception):
    """Base class for all engine errors."""


class InvalidConfigError(PatternBankError):
    """A configuration bound was violated; carries the offending field."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"invalid config field {field_name!r}: {message}")
        self.field_name = field_name


class DuplicateIdError(PatternBankError):
    pass


class InvariantViolationError(PatternBankError):
    """A domain invariant failed; names the offending pattern when known."""

    def __init__(self, message: str, pattern_id: int | None = None):
        if pattern_id is not None:
            message = f"pattern {pattern_id}: {message}"
        super().__init__(message)
        self.pattern_id = pattern_id


# ---------------------------------------------------------------------------
# Concurrency


class RWLock:
    """Many concurrent readers or one exclusive writer.

    Writers take priority over incoming readers so a steady read stream
    cannot starve maintenance.
    """

    def __init__(self) -> None:
        self._cond = threading.Condition()
        self._readers = 0
        self._writer = False
        self._writers_waiting = 0

    @contextmanager
    def read_locked(self) -> Iterator[None]:
        with self._cond:
            while self._writer or self._writers_waiting:
                self._cond.wait()
            self._readers += 1
        try:
            yield
        finally:
            with self._cond:
                self._readers -= 1
                if self._readers == 0:
                    self._cond.notify_all()

    @contextmanager
    def write_locked(self) -> Iterator[None]:
        with self._cond:
            self._writers_waiting += 1
            while self._writer or self._readers:
                self._cond.wait()
            self._writers_waiting -= 1
            self._writer = True
        try:
            yield
        finally:
            with self._cond:
                self._writer = False
                self._cond.notify_all()


# ---------------------------------------------------------------------------
# Pattern bodies


class PatternKind(Enum):
    SKILL = "skill"
    SUBAGENT = "subagent"


class SkillForm(Enum):
    GUIDELINE = "guideline"
    CODE = "code"


@dataclass(frozen=True)
class SkillBody:
    """Stateless procedural knowledge: a text guideline or a code snippet.

    Guideline bodies carry only ``guideline_text``; code bodies carry the
    snippet plus opaque language/dependency/usage annotations. The engine
    never executes snippets.
    """

    form: SkillForm
    guideline_text: str = ""
    code_snippet: str = ""
    code_language_tag: str = ""
    dependencies: tuple[str, ...] = ()
    usage_hint: str = ""

    def validate(self) -> None:
        if self.form is SkillForm.GUIDELINE:
            if not self.guideline_text.strip():
                raise InvariantViolationError("guideline body requires non-empty guideline_text")
            if self.code_snippet or self.code_language_tag or self.dependencies or self.usage_hint:
                raise InvariantViolationError("guideline body must not carry code fields")
        else:
            if not self.code_snippet.strip():
                raise InvariantViolationError("code body requires non-empty code_snippet")


@dataclass(frozen=True)
class ToolDeclaration:
    name: str
    purpose: str = ""


@dataclass(frozen=True)
class DelegationRule:
    peer: str
    condition: str = ""


@dataclass(frozen=True)
class SubagentBody:
    """Specification of a delegable specialist: prompt, tools, contracts."""

    system_prompt: str
    tool_declarations: tuple[ToolDeclaration, ...] = ()
    input_contract: str = ""
    output_contract: str = ""
    delegation_rules: tuple[DelegationRule, ...] = ()

    def validate(self) -> None:
        if not self.system_prompt.strip():
            raise InvariantViolationError("subagent body requires non-empty system_prompt")
        names = [t.name for t in self.tool_declarations]
        if len(names) != len(set(names)):
            raise InvariantViolationError("subagent tool names must be unique")


PatternBody = SkillBody | SubagentBody


# ---------------------------------------------------------------------------
# Metadata and patterns


@dataclass
class PatternMetadata:
    """The six-tuple driving retrieval, scoring, and pruning.

    ``embedding`` may be None before installation; the repository recomputes
    it from ``description + "\\n" + context`` on insert.
    """

    description: str
    context: str
    retrieval_count: int = 0
    utilization_count: int = 0
    success_count: int = 0
    embedding: tuple[float, ...] | None = None

    def validate(self, dimension: int | None = None, pattern_id: int | None = None) -> None:
        r, u, s = self.retrieval_count, self.utilization_count, self.success_count
        if not (0 <= s <= u <= r):
            raise InvariantViolationError(
                f"counter ordering violated: retrieval={r} utilization={u} success={s}",
                pattern_id,
            )
        if not self.description.strip():
            raise InvariantViolationError("description must be non-empty", pattern_id)
        if not self.context.strip():
            raise InvariantViolationError("context must be non-empty", pattern_id)
        if self.embedding is not None:
            if dimension is not None and len(self.embedding) != dimension:
                raise InvariantViolationError(
                    f"embedding dimension {len(self.embedding)} != configured {dimension}",
                    pattern_id,
                )
            norm = math.sqrt(sum(x * x for x in self.embedding))
            if abs(norm - 1.0) > 1e-6:
                raise InvariantViolationError(f"embedding norm {norm!r} not unit", pattern_id)


@dataclass
class Pattern:
    """A dual-form knowledge unit plus its usage metadata."""

    id: int
    kind: PatternKind
    body: PatternBody
    metadata: PatternMetadata
    created_at_task: int = 0

    def validate(self, dimension: int | None = None) -> None:
        if self.id < 1:
            raise InvariantViolationError("pattern id must be a positive integer", self.id)
        if self.kind is PatternKind.SKILL and not isinstance(self.body, SkillBody):
            raise InvariantViolationError("skill pattern carries a non-skill body", self.id)
        if self.kind is PatternKind.SUBAGENT and not isinstance(self.body, SubagentBody):
            raise InvariantViolationError("subagent pattern carries a non-subagent body", self.id)
        if self.created_at_task < 0:
            raise InvariantViolationError("created_at_task must be >= 0", self.id)
        self.body.validate()
        self.metadata.validate(dimension, self.id)


# ---------------------------------------------------------------------------
# Trajectories


@dataclass(frozen=True)
class TrajectoryStep:
    action: str
    observation: str = ""


@dataclass(frozen=True)
class ToolCall:
    tool: str
    args_digest: str = ""


@dataclass(frozen=True)
class TrajectoryRecord:
    """One task's execution trace with its boolean outcome flag."""

    task_id: str
    task_description: str
    steps: tuple[TrajectoryStep, ...]
    tool_calls: tuple[ToolCall, ...] = ()
    subagent_calls: tuple[str, ...] = ()
    injected_pattern_ids: tuple[int, ...] = ()
    outcome: bool = False

    def validate(self) -> None:
        if not self.steps:
            raise InvariantViolationError(f"trajectory {self.task_id}: steps must be non-empty")


# ---------------------------------------------------------------------------
# Configuration


@dataclass(frozen=True)
class EngineConfig:
    """All knobs of the engine with their documented defaults.

    ``query_count`` and ``use_hybrid`` govern the retrieval pipeline shape
    (number of expanded queries; whether lexical/semantic rank fusion runs).
    """

    k: int = 20
    theta: float = 0.5
    mmr_lambda: float = 0.7
    batch_size: int = 10
    prune_fraction: float = 0.20
    merge_threshold: float = 0.85
    epsilon: float = 0.01
    match_threshold: float = 0.3
    embedding_dim: int = 64
    rrf_constant: float = 60.0
    bm25_k1: float = 1.2
    bm25_b: float = 0.75
    seed: int = 0
    query_count: int = 3
    use_hybrid: bool = True

    def validate(self) -> None:
        if self.k < 1:
            raise InvalidConfigError("k", "must be >= 1")
        if not 0.0 <= self.theta <= 1.0:
            raise InvalidConfigError("theta", "must be within [0, 1]")
        if not 0.0 <= self.mmr_lambda <= 1.0:
            raise InvalidConfigError("mmr_lambda", "must be within [0, 1]")
        if self.batch_size < 1:
            raise InvalidConfigError("batch_size", "must be >= 1")
        if not 0.0 < self.prune_fraction < 1.0:
            raise InvalidConfigError("prune_fraction", "must be within (0, 1)")
        if not 0.0 < self.merge_threshold <= 1.0:
            raise InvalidConfigError("merge_threshold", "must be within (0, 1]")
        if self.epsilon <= 0.0:
            raise InvalidConfigError("epsilon", "must be > 0")
        if not 0.0 <= self.match_threshold <= 1.0:
            raise InvalidConfigError("match_threshold", "must be within [0, 1]")
        if self.embedding_dim < 1:
            raise InvalidConfigError("embedding_dim", "must be >= 1")
        if self.rrf_constant <= 0.0:
            raise InvalidConfigError("rrf_constant", "must be > 0")
        if self.bm25_k1 <= 0.0:
            raise InvalidConfigError("bm25_k1", "must be > 0")
        if self.bm25_b <= 0.0:
            raise InvalidConfigError("bm25_b", "must be > 0")
        if self.query_count < 1:
            raise InvalidConfigError("query_count", "must be >= 1")


# ---------------------------------------------------------------------------
# Repository


class Repository:
    """The versioned pattern collection plus trajectories and audit state.

    Mutating operations take the exclusive writer lock; pure queries take the
    reader lock. ``mutation_counter`` increments whenever the pattern set
    changes so read-side caches (BM25 corpus statistics) can invalidate.
    """

    def __init__(self, config: EngineConfig):
        config.validate()
        self.config = config
        self.schema_version = SCHEMA_VERSION
        self.patterns: dict[int, Pattern] = {}
        self.trajectories: list[TrajectoryRecord] = []
        self.tasks_completed = 0
        self.next_maintenance_threshold = FIRST_MAINTENANCE_THRESHOLD
        self.last_maintenance_task = 0
        self.next_pattern_id = 1
        self.audit_log: list = []  # list[persistence.AuditEvent]
        self.lock = RWLock()
        self.mutation_counter = 0
        self.open_context = None  # tracking.ExecutionContext | None
        self._bm25_cache: tuple[int, object] | None = None

    # -- bookkeeping helpers ------------------------------------------------

    def allocate_pattern_id(self) -> int:
        pid = self.next_pattern_id
        self.next_pattern_id += 1
        return pid

    def note_pattern_set_changed(self) -> None:
        self.mutation_counter += 1
        self._bm25_cache = None

    def sorted_patterns(self) -> list[Pattern]:
        return [self.patterns[pid] for pid in sorted(self.patterns)]

    def validate(self) -> None:
        """Full invariant sweep; raised errors name the offending pattern."""
        threshold = self.next_maintenance_threshold
        if threshold < FIRST_MAINTENANCE_THRESHOLD or threshold % FIRST_MAINTENANCE_THRESHOLD:
            raise InvariantViolationError(f"maintenance threshold {threshold} not 10*2^m")
        m = threshold // FIRST_MAINTENANCE_THRESHOLD
        if m & (m - 1):
            raise InvariantViolationError(f"maintenance threshold {threshold} not 10*2^m")
        if self.tasks_completed != len(self.trajectories):
            raise InvariantViolationError(
                f"tasks_completed {self.tasks_completed} != stored trajectories {len(self.trajectories)}"
            )
        for pid, pattern in self.patterns.items():
            if pid != pattern.id:
                raise InvariantViolationError("pattern keyed under foreign id", pid)
            if pattern.id >= self.next_pattern_id:
                raise InvariantViolationError("pattern id beyond allocation counter", pid)
            pattern.validate(self.config.embedding_dim)


def new_repository(config: EngineConfig) -> Repository:
    """Create an empty repository and record the initial snapshot event."""
    repo = Repository(config)
    from . import persistence

    persistence.append_event(
        repo, persistence.EventKind.SNAPSHOT, {"config": persistence.config_to_record(config)}
    )
    return repo


def seed_patterns(repo: Repository, patterns: Sequence[Pattern], embedder=None) -> int:
    """Insert caller-built patterns (cold-start seeding); returns count.

    Metadata arrives as given; missing embeddings are computed from
    ``description + "\\n" + context``.
    """
    from . import persistence
    from .embedding import default_embedder

    embedder = embedder or default_embedder(repo.config)
    with repo.lock.write_locked():
        seen = set(repo.patterns)
        for pattern in patterns:
            if pattern.id in seen:
                raise DuplicateIdError(f"pattern id {pattern.id} already present")
            seen.add(pattern.id)
        inserted = []
        for pattern in patterns:
            meta = pattern.metadata
            if meta.embedding is None:
                meta.embedding = embedder.embed(f"{meta.description}\n{meta.context}")
            pattern.validate(repo.config.embedding_dim)
            inserted.append(pattern)
        for pattern in inserted:
            repo.patterns[pattern.id] = pattern
            repo.next_pattern_id = max(repo.next_pattern_id, pattern.id + 1)
        repo.note_pattern_set_changed()
        persistence.append_event(
            repo,
            persistence.EventKind.SEED,
            {"patterns": [persistence.pattern_to_record(p) for p in inserted]},
        )
        repo.validate()
    return len(inserted)
