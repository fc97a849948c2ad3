"""Per-task execution wrapper: retrieve, plan integration, update counters.

`begin_task` retrieves candidates (hybrid + MMR), increments each one's
retrieval counter exactly once, and routes them into the integration plan by
kind. `finish_task` judges actual utilization per pattern against the
trajectory, bumps utilization counters above the match threshold, credits
successes only to utilized patterns, and appends the trajectory.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Protocol, runtime_checkable

from .core import (
    Pattern,
    PatternBankError,
    PatternKind,
    Repository,
    SkillBody,
    SkillForm,
    SubagentBody,
    TrajectoryRecord,
)
from .embedding import EmbeddingProvider, tokenize
from .retrieval import QueryGenerator, RankedHit, hybrid_candidates_unlocked, mmr_select


class ContextAlreadyOpenError(PatternBankError):
    pass


class ContextMismatchError(PatternBankError):
    pass


class DoubleFinishError(PatternBankError):
    pass


# ---------------------------------------------------------------------------
# Integration plan


@dataclass(frozen=True)
class PromptAugmentation:
    pattern_id: int
    text: str


@dataclass(frozen=True)
class ToolRegistration:
    pattern_id: int
    tool_name: str
    code_ref: str


@dataclass(frozen=True)
class Delegation:
    pattern_id: int
    subagent_name: str
    context_payload: str


@dataclass
class IntegrationPlan:
    """Retrieved patterns routed by kind: guideline text into the prompt,
    code skills as callable tools, subagents as delegation targets."""

    prompt_augmentations: list[PromptAugmentation] = field(default_factory=list)
    tool_registrations: list[ToolRegistration] = field(default_factory=list)
    delegations: list[Delegation] = field(default_factory=list)


_IDENTIFIER_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*")


def _tool_name(pattern: Pattern) -> str:
    assert isinstance(pattern.body, SkillBody)
    match = _IDENTIFIER_RE.search(pattern.body.usage_hint)
    return match.group(0) if match else f"pattern_{pattern.id}_tool"


def build_integration_plan(patterns: list[Pattern], task_description: str) -> IntegrationPlan:
    plan = IntegrationPlan()
    for pattern in patterns:
        if pattern.kind is PatternKind.SUBAGENT:
            plan.delegations.append(
                Delegation(pattern.id, f"subagent_{pattern.id}", task_description)
            )
        elif isinstance(pattern.body, SkillBody) and pattern.body.form is SkillForm.CODE:
            plan.tool_registrations.append(
                ToolRegistration(pattern.id, _tool_name(pattern), f"pattern:{pattern.id}")
            )
        else:
            plan.prompt_augmentations.append(
                PromptAugmentation(pattern.id, pattern.body.guideline_text)
            )
    return plan


@dataclass
class ExecutionContext:
    task_id: str
    task_description: str
    retrieved: list[tuple[int, float]]  # (pattern_id, semantic score), plan order
    integration_plan: IntegrationPlan
    open: bool = True


# ---------------------------------------------------------------------------
# Utilization judging


@runtime_checkable
class UtilizationJudge(Protocol):
    """Returns the trajectory-match score alpha in [0, 1] for one pattern."""

    def match_score(self, pattern: Pattern, trajectory: TrajectoryRecord) -> float: ...


def declared_steps(pattern: Pattern) -> list[str]:
    """The matchable step strings a pattern declares.

    Guideline skills declare one step per non-empty guideline line; code
    skills declare their usage signature; subagents declare their tool
    (phase) names, falling back to delegation peers.
    """
    body = pattern.body
    if isinstance(body, SkillBody):
        if body.form is SkillForm.GUIDELINE:
            return [line.strip() for line in body.guideline_text.splitlines() if line.strip()]
        if body.usage_hint.strip():
            return [body.usage_hint.strip()]
        first_code_line = next(
            (line.strip() for line in body.code_snippet.splitlines() if line.strip()), ""
        )
        return [first_code_line] if first_code_line else []
    assert isinstance(body, SubagentBody)
    if body.tool_declarations:
        return [t.name for t in body.tool_declarations]
    return [rule.peer for rule in body.delegation_rules]


def _is_token_subsequence(needle: list[str], haystack: list[str]) -> bool:
    it = iter(haystack)
    return all(token in it for token in needle)


class SubsequenceMatchJudge:
    """Deterministic default judge: a declared step counts as matched when its
    normalized tokens appear in order inside some trajectory action (or, for
    subagents, inside some recorded subagent call)."""

    def match_score(self, pattern: Pattern, trajectory: TrajectoryRecord) -> float:
        steps = declared_steps(pattern)
        if not steps:
            return 0.0
        if pattern.kind is PatternKind.SUBAGENT:
            haystacks = [tokenize(call) for call in trajectory.subagent_calls]
        else:
            haystacks = [tokenize(step.action) for step in trajectory.steps]
            haystacks += [tokenize(call.tool) for call in trajectory.tool_calls]
        matched = 0
        for step in steps:
            needle = tokenize(step)
            if needle and any(_is_token_subsequence(needle, hay) for hay in haystacks):
                matched += 1
        return matched / len(steps)


def default_judge() -> SubsequenceMatchJudge:
    return SubsequenceMatchJudge()


def match_score(judge: UtilizationJudge, pattern: Pattern, trajectory: TrajectoryRecord) -> float:
    """Judge one pattern against a trajectory, clipped to [0, 1]."""
    alpha = judge.match_score(pattern, trajectory)
    return max(0.0, min(1.0, alpha))


# ---------------------------------------------------------------------------
# Task lifecycle


def begin_task(
    repo: Repository,
    task_description: str,
    *,
    task_id: str | None = None,
    embedder: EmbeddingProvider | None = None,
    query_generator: QueryGenerator | None = None,
) -> ExecutionContext:
    """Open the single active execution context and charge retrieval counts."""
    with repo.lock.write_locked():
        if repo.open_context is not None:
            raise ContextAlreadyOpenError(
                f"context for {repo.open_context.task_id!r} is still open"
            )
        candidate_ids, semantic = hybrid_candidates_unlocked(
            repo, task_description, embedder=embedder, query_generator=query_generator
        )
        hits = [
            RankedHit(pid, semantic[pid], rank)
            for rank, pid in enumerate(
                sorted(candidate_ids, key=lambda pid: (-semantic[pid], pid)), start=1
            )
        ]
        embeddings = {pid: repo.patterns[pid].metadata.embedding for pid in candidate_ids}
        order = mmr_select(hits, embeddings, repo.config.mmr_lambda, repo.config.k)
        for pid in order:
            repo.patterns[pid].metadata.retrieval_count += 1
        patterns = [repo.patterns[pid] for pid in order]
        ctx = ExecutionContext(
            task_id=task_id or f"task-{repo.tasks_completed + 1:06d}",
            task_description=task_description,
            retrieved=[(pid, semantic[pid]) for pid in order],
            integration_plan=build_integration_plan(patterns, task_description),
        )
        repo.open_context = ctx
        repo.validate()
    return ctx


@dataclass(frozen=True)
class UtilizationRow:
    pattern_id: int
    alpha: float
    utilized: bool
    success_credited: bool


@dataclass(frozen=True)
class TaskSummary:
    task_id: str
    rows: tuple[UtilizationRow, ...]
    beta_util: float


def finish_task(
    repo: Repository,
    ctx: ExecutionContext,
    trajectory: TrajectoryRecord,
    judge: UtilizationJudge | None = None,
) -> TaskSummary:
    """Close the context: judge utilization, update counters, store the trace.

    For each retrieved pattern, utilization increments when alpha exceeds the
    match threshold (strict); success credits go to exactly the utilized
    patterns of a successful task, which keeps s <= u by construction.
    """
    from . import persistence

    judge = judge or default_judge()
    with repo.lock.write_locked():
        if repo.open_context is None:
            raise DoubleFinishError("no open context to finish")
        if repo.open_context is not ctx or not ctx.open:
            raise ContextMismatchError("supplied context is not the open one")
        if trajectory.task_id != ctx.task_id:
            raise ContextMismatchError(
                f"trajectory task {trajectory.task_id!r} != context task {ctx.task_id!r}"
            )
        retrieved_ids = [pid for pid, _ in ctx.retrieved]
        if not set(trajectory.injected_pattern_ids) <= set(retrieved_ids):
            raise ContextMismatchError("trajectory injected ids not a subset of retrieved ids")
        trajectory.validate()

        threshold = repo.config.match_threshold
        rows = []
        for pid in retrieved_ids:
            pattern = repo.patterns[pid]
            alpha = match_score(judge, pattern, trajectory)
            utilized = alpha > threshold
            credited = utilized and trajectory.outcome
            if utilized:
                pattern.metadata.utilization_count += 1
            if credited:
                pattern.metadata.success_count += 1
            rows.append(UtilizationRow(pid, alpha, utilized, credited))

        beta_util = (
            sum(1 for row in rows if row.utilized) / len(rows) if rows else 0.0
        )
        repo.trajectories.append(trajectory)
        repo.tasks_completed += 1
        ctx.open = False
        repo.open_context = None
        summary = TaskSummary(ctx.task_id, tuple(rows), beta_util)
        persistence.append_event(
            repo,
            persistence.EventKind.TASK_FINISHED,
            {
                "trajectory": persistence.trajectory_to_record(trajectory),
                "retrieved": [[pid, score] for pid, score in ctx.retrieved],
                "rows": [[r.pattern_id, r.alpha, r.utilized, r.success_credited] for r in rows],
                "beta_util": beta_util,
            },
        )
        repo.validate()
    return summary
