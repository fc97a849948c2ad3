"""Batch extraction: trajectory batching, kind classification, installation.

The provider does the actual knowledge distillation (an LLM in production, a
scripted double in tests); this module owns the contract around it: when a
batch fires, how the recent window is partitioned by outcome, how drafts are
classified into skills vs subagents, and how valid drafts become patterns
with zeroed usage counters.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Protocol, runtime_checkable

from .core import (
    InvariantViolationError,
    Pattern,
    PatternBankError,
    PatternKind,
    PatternMetadata,
    Repository,
    SkillBody,
    SubagentBody,
    TrajectoryRecord,
)
from .embedding import EmbeddingProvider, default_embedder

log = logging.getLogger(__name__)

MAX_DRAFTS_PER_BATCH = 5


class InsufficientHistoryError(PatternBankError):
    pass


class ExtractionProviderError(PatternBankError):
    """Provider broke its contract (raised, or returned more than 5 drafts)."""


@dataclass(frozen=True)
class ClassificationFeatures:
    """Signals the classifier consumes: four primary flags in cascade order
    plus the quantitative tiebreak indicators."""

    sustained_memory: bool = False
    independent_reasoning: bool = False
    subtask_encapsulation: bool = False
    stateless_guidance: bool = False
    step_count: int = 0
    decision_points: int = 0
    tool_count: int = 0
    stateful: bool = False

    def validate(self) -> None:
        if min(self.step_count, self.decision_points, self.tool_count) < 0:
            raise InvariantViolationError("classification counts must be non-negative")


@dataclass(frozen=True)
class PatternDraft:
    """Provider output: description, context, body, classification features.

    ``kind`` pins the pattern type when the provider already decided it;
    otherwise `classify` derives it from the features.
    """

    description: str
    context: str
    body: SkillBody | SubagentBody
    features: ClassificationFeatures
    kind: PatternKind | None = None

    def validate(self) -> None:
        if not self.description.strip():
            raise InvariantViolationError("draft description must be non-empty")
        if not self.context.strip():
            raise InvariantViolationError("draft context must be non-empty")
        self.features.validate()
        self.body.validate()


@runtime_checkable
class ExtractionProvider(Protocol):
    """Contrastive extractor: given success/failure partitions of the recent
    batch, returns at most five drafts (zero is valid)."""

    def extract(
        self, successes: list[TrajectoryRecord], failures: list[TrajectoryRecord]
    ) -> list[PatternDraft]: ...


def extraction_due(repo: Repository, batch_size: int | None = None) -> bool:
    k = repo.config.batch_size if batch_size is None else batch_size
    if k < 1:
        raise PatternBankError("batch size must be >= 1")
    return repo.tasks_completed > 0 and repo.tasks_completed % k == 0


def recent_batch(
    repo: Repository, batch_size: int | None = None
) -> tuple[list[TrajectoryRecord], list[TrajectoryRecord]]:
    """The most recent batch split by outcome: (successes, failures)."""
    k = repo.config.batch_size if batch_size is None else batch_size
    with repo.lock.read_locked():
        if repo.tasks_completed < k:
            raise InsufficientHistoryError(
                f"need {k} completed tasks, have {repo.tasks_completed}"
            )
        window = repo.trajectories[-k:]
    successes = [t for t in window if t.outcome]
    failures = [t for t in window if not t.outcome]
    return successes, failures


def classify(features: ClassificationFeatures) -> PatternKind:
    """Ordered decision cascade from primary flags, then the 2-of-4 tiebreak.

    Sustained memory, independent reasoning, or whole-subtask encapsulation
    individually force a subagent; explicit stateless guidance forces a
    skill; otherwise the quantitative indicators (5+ steps, 3+ decision
    points, 3+ tools, statefulness) vote, two or more meaning subagent.
    """
    features.validate()
    if features.sustained_memory:
        return PatternKind.SUBAGENT
    if features.independent_reasoning:
        return PatternKind.SUBAGENT
    if features.subtask_encapsulation:
        return PatternKind.SUBAGENT
    if features.stateless_guidance:
        return PatternKind.SKILL
    indicators = (
        (features.step_count >= 5)
        + (features.decision_points >= 3)
        + (features.tool_count >= 3)
        + features.stateful
    )
    return PatternKind.SUBAGENT if indicators >= 2 else PatternKind.SKILL


def _effective_kind(draft: PatternDraft) -> PatternKind:
    return draft.kind if draft.kind is not None else classify(draft.features)


def install_drafts(
    repo: Repository,
    drafts: list[PatternDraft],
    embedder: EmbeddingProvider | None = None,
    *,
    audit: bool = True,
) -> list[int]:
    """Validate and insert drafts as zero-stat patterns; returns new ids.

    Invalid drafts are dropped individually (logged and recorded in the audit
    payload); valid ones install atomically under the writer lock. Also the
    replay path for recorded extraction events.
    """
    from . import persistence

    embedder = embedder or default_embedder(repo.config)
    with repo.lock.write_locked():
        installed: list[Pattern] = []
        skipped: list[dict] = []
        for index, draft in enumerate(drafts):
            try:
                draft.validate()
                kind = _effective_kind(draft)
                body_ok = (kind is PatternKind.SKILL and isinstance(draft.body, SkillBody)) or (
                    kind is PatternKind.SUBAGENT and isinstance(draft.body, SubagentBody)
                )
                if not body_ok:
                    raise InvariantViolationError(
                        f"draft body type does not match classified kind {kind.value}"
                    )
                meta = PatternMetadata(
                    description=draft.description,
                    context=draft.context,
                    embedding=embedder.embed(f"{draft.description}\n{draft.context}"),
                )
                pattern = Pattern(
                    id=repo.allocate_pattern_id(),
                    kind=kind,
                    body=draft.body,
                    metadata=meta,
                    created_at_task=repo.tasks_completed,
                )
                pattern.validate(repo.config.embedding_dim)
            except PatternBankError as exc:
                log.warning("dropping invalid draft %d: %s", index, exc)
                skipped.append({"index": index, "reason": str(exc)})
                continue
            installed.append(pattern)
        for pattern in installed:
            repo.patterns[pattern.id] = pattern
        if installed:
            repo.note_pattern_set_changed()
        if audit:
            persistence.append_event(
                repo,
                persistence.EventKind.EXTRACTION,
                {
                    "batch_end_task": repo.tasks_completed,
                    "drafts": [persistence.draft_to_record(d) for d in drafts],
                    "installed_ids": [p.id for p in installed],
                    "skipped": skipped,
                },
            )
        repo.validate()
    return [p.id for p in installed]


def extract_and_install(
    repo: Repository,
    provider: ExtractionProvider,
    embedder: EmbeddingProvider | None = None,
    *,
    batch_size: int | None = None,
    force: bool = False,
) -> list[int]:
    """Run the provider on the recent batch and install its drafts.

    The provider call happens outside the lock; installation re-validates
    that no task completed meanwhile. Provider exceptions and contract
    violations surface as ExtractionProviderError with the repository
    untouched.
    """
    if not force and not extraction_due(repo, batch_size):
        raise PatternBankError(
            f"extraction not due at tasks_completed={repo.tasks_completed}"
        )
    successes, failures = recent_batch(repo, batch_size)
    counter_snapshot = repo.tasks_completed
    try:
        drafts = provider.extract(successes, failures)
    except Exception as exc:
        raise ExtractionProviderError(f"extraction provider failed: {exc}") from exc
    if len(drafts) > MAX_DRAFTS_PER_BATCH:
        raise ExtractionProviderError(
            f"provider returned {len(drafts)} drafts, contract allows at most {MAX_DRAFTS_PER_BATCH}"
        )
    if repo.tasks_completed != counter_snapshot:
        raise ExtractionProviderError(
            "task counter advanced during provider call; batch discarded"
        )
    return install_drafts(repo, drafts, embedder)
