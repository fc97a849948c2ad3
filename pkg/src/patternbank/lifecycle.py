"""Pattern lifecycle: utility scoring, percentile pruning, gated merging.

Maintenance runs at exponentially spaced task counts (10, 20, 40, ...) and
executes score -> prune -> merge, doubling the threshold afterwards. Merging
is agglomerative: repeatedly take the most similar same-kind candidate pair,
ask the verifier, and either merge (stats summed, embedding recomputed) or
exclude the pair for the rest of this event.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Protocol, runtime_checkable

from .core import (
    InvariantViolationError,
    Pattern,
    PatternBankError,
    PatternMetadata,
    Repository,
)
from .embedding import EmbeddingProvider, cosine, default_embedder

log = logging.getLogger(__name__)


class KindMismatchError(PatternBankError):
    pass


class VerifierRejectedError(PatternBankError):
    pass


class MaintenanceNotDueError(PatternBankError):
    pass


# ---------------------------------------------------------------------------
# Scoring


def utility_score(retrieved: int, utilized: int, succeeded: int, epsilon: float = 0.01) -> float:
    """Effectiveness x frequency x precision utility of a pattern.

    ``(s / (u + eps)) * ln(1 + u) * (1 + u / (r + eps))`` — natural log, so
    exact-value tests are well defined; never-used patterns score exactly 0
    because ln(1) annihilates the product.
    """
    if not 0 <= succeeded <= utilized <= retrieved:
        raise InvariantViolationError(
            f"counter ordering violated: retrieval={retrieved} utilization={utilized} success={succeeded}"
        )
    effectiveness = succeeded / (utilized + epsilon)
    frequency = math.log(1.0 + utilized)
    precision = 1.0 + utilized / (retrieved + epsilon)
    return effectiveness * frequency * precision


def score_pattern(pattern: Pattern, epsilon: float = 0.01) -> float:
    m = pattern.metadata
    return utility_score(m.retrieval_count, m.utilization_count, m.success_count, epsilon)


# ---------------------------------------------------------------------------
# Pruning


def _prune_eligible(repo: Repository, pattern: Pattern) -> bool:
    # Grace rule: never-retrieved patterns born after the previous maintenance
    # event survive this one, otherwise every fresh extraction would be wiped.
    if pattern.metadata.retrieval_count == 0 and pattern.created_at_task > repo.last_maintenance_task:
        return False
    return True


def prune(repo: Repository, prune_fraction: float | None = None) -> list[int]:
    """Remove the floor(fraction * eligible) lowest-scored eligible patterns.

    Equal scores shed the larger (newer) id first; survivors keep their
    metadata untouched. Returns the removed ids.
    """
    fraction = repo.config.prune_fraction if prune_fraction is None else prune_fraction
    if not 0.0 < fraction < 1.0:
        raise PatternBankError("prune fraction must be within (0, 1)")
    with repo.lock.write_locked():
        return _prune_locked(repo, fraction)


def _prune_locked(repo: Repository, fraction: float) -> list[int]:
    eligible = [p for p in repo.sorted_patterns() if _prune_eligible(repo, p)]
    count = math.floor(fraction * len(eligible))
    if count == 0:
        return []
    epsilon = repo.config.epsilon
    ordered = sorted(eligible, key=lambda p: (score_pattern(p, epsilon), -p.id))
    doomed = [p.id for p in ordered[:count]]
    for pid in doomed:
        del repo.patterns[pid]
    repo.note_pattern_set_changed()
    return doomed


# ---------------------------------------------------------------------------
# Merge filtering and verification


def _scored_pairs(repo: Repository, threshold: float) -> list[tuple[float, int, int]]:
    patterns = repo.sorted_patterns()
    pairs = []
    for a_idx, p_i in enumerate(patterns):
        for p_j in patterns[a_idx + 1 :]:
            if p_i.kind is not p_j.kind:
                continue
            sim = cosine(p_i.metadata.embedding, p_j.metadata.embedding)
            if sim >= threshold:
                pairs.append((sim, p_i.id, p_j.id))
    pairs.sort(key=lambda t: (-t[0], t[1], t[2]))
    return pairs


def merge_candidates(repo: Repository, merge_threshold: float | None = None) -> list[tuple[int, int]]:
    """All same-kind pairs (i < j) with embedding cosine >= threshold (inclusive)."""
    threshold = repo.config.merge_threshold if merge_threshold is None else merge_threshold
    with repo.lock.read_locked():
        return [(i, j) for _, i, j in _scored_pairs(repo, threshold)]


@dataclass(frozen=True)
class MergeVerdict:
    accepted: bool
    merged_description: str = ""
    merged_context: str = ""
    merged_body: object | None = None
    reject_reason: str = ""

    @staticmethod
    def reject(reason: str = "") -> "MergeVerdict":
        return MergeVerdict(accepted=False, reject_reason=reason)


@runtime_checkable
class MergeVerifier(Protocol):
    """Judges whether two same-kind patterns address the same subtask with
    compatible steps and overlapping applicability; accepts with synthesized
    description/context (and optionally a body)."""

    def decide(self, first: Pattern, second: Pattern) -> MergeVerdict: ...


class CosineGateVerifier:
    """Scripted verifier: accept when similarity clears the threshold plus a
    margin, synthesizing description/context by concatenation."""

    def __init__(self, accept_threshold: float, separator: str = " | "):
        self.accept_threshold = accept_threshold
        self.separator = separator

    def decide(self, first: Pattern, second: Pattern) -> MergeVerdict:
        if first.kind is not second.kind:
            return MergeVerdict.reject("kind mismatch")
        sim = cosine(first.metadata.embedding, second.metadata.embedding)
        if sim < self.accept_threshold:
            return MergeVerdict.reject(f"similarity {sim:.4f} below accept threshold")
        older, newer = sorted((first, second), key=lambda p: p.id)
        return MergeVerdict(
            accepted=True,
            merged_description=older.metadata.description + self.separator + newer.metadata.description,
            merged_context=older.metadata.context + self.separator + newer.metadata.context,
        )


def default_verifier(repo: Repository, margin: float = 0.05) -> CosineGateVerifier:
    return CosineGateVerifier(min(1.0, repo.config.merge_threshold + margin))


def merge_pair(
    repo: Repository,
    first_id: int,
    second_id: int,
    verdict: MergeVerdict,
    *,
    embedder: EmbeddingProvider | None = None,
) -> Pattern:
    """Replace two patterns with their merge: stats summed, embedding rebuilt.

    The verdict supplies description and context; the body comes from the
    verdict when given, otherwise from the higher-scored input (older id on a
    tie). Counter sums keep the metadata ordering invariant by construction.
    """
    with repo.lock.write_locked():
        return _merge_pair_locked(repo, first_id, second_id, verdict, embedder)


def _merge_pair_locked(repo, first_id, second_id, verdict, embedder) -> Pattern:
    if not verdict.accepted:
        raise VerifierRejectedError(verdict.reject_reason or "verifier rejected the pair")
    first, second = repo.patterns[first_id], repo.patterns[second_id]
    if first.kind is not second.kind:
        raise KindMismatchError(f"cannot merge {first.kind.value} with {second.kind.value}")
    if not verdict.merged_description.strip() or not verdict.merged_context.strip():
        raise PatternBankError("accepting verdict must supply merged description and context")
    embedder = embedder or default_embedder(repo.config)
    if verdict.merged_body is not None:
        body = verdict.merged_body
    else:
        epsilon = repo.config.epsilon
        body = max(
            (first, second), key=lambda p: (score_pattern(p, epsilon), -p.id)
        ).body
    meta = PatternMetadata(
        description=verdict.merged_description,
        context=verdict.merged_context,
        retrieval_count=first.metadata.retrieval_count + second.metadata.retrieval_count,
        utilization_count=first.metadata.utilization_count + second.metadata.utilization_count,
        success_count=first.metadata.success_count + second.metadata.success_count,
        embedding=embedder.embed(f"{verdict.merged_description}\n{verdict.merged_context}"),
    )
    merged = Pattern(
        id=repo.allocate_pattern_id(),
        kind=first.kind,
        body=body,
        metadata=meta,
        created_at_task=repo.tasks_completed,
    )
    merged.validate(repo.config.embedding_dim)
    del repo.patterns[first_id]
    del repo.patterns[second_id]
    repo.patterns[merged.id] = merged
    repo.note_pattern_set_changed()
    return merged


@dataclass(frozen=True)
class MergeRecord:
    absorbed_ids: tuple[int, int]
    new_id: int


def agglomerative_merge(
    repo: Repository,
    verifier: MergeVerifier,
    merge_threshold: float | None = None,
    *,
    embedder: EmbeddingProvider | None = None,
) -> list[MergeRecord]:
    """Iteratively merge the most similar candidate pair until none remain.

    Rejected pairs stay excluded for this event only; a merged pattern
    re-enters candidate search with its recomputed embedding. Verifier
    failures count as rejections with the cause logged.
    """
    threshold = repo.config.merge_threshold if merge_threshold is None else merge_threshold
    with repo.lock.write_locked():
        return _agglomerative_merge_locked(repo, verifier, threshold, embedder)


def _agglomerative_merge_locked(repo, verifier, threshold, embedder) -> list[MergeRecord]:
    merges: list[MergeRecord] = []
    excluded: set[tuple[int, int]] = set()
    while True:
        pairs = [(s, i, j) for s, i, j in _scored_pairs(repo, threshold) if (i, j) not in excluded]
        if not pairs:
            return merges
        _, first_id, second_id = pairs[0]
        try:
            verdict = verifier.decide(repo.patterns[first_id], repo.patterns[second_id])
        except Exception:
            log.exception("merge verifier failed on pair (%d, %d); treating as reject", first_id, second_id)
            verdict = MergeVerdict.reject("verifier failure")
        if verdict.accepted:
            merged = _merge_pair_locked(repo, first_id, second_id, verdict, embedder)
            merges.append(MergeRecord((first_id, second_id), merged.id))
        else:
            excluded.add((first_id, second_id))


# ---------------------------------------------------------------------------
# Maintenance scheduling and the full event


def maintenance_due(repo: Repository) -> bool:
    return repo.tasks_completed >= repo.next_maintenance_threshold


@dataclass
class MaintenanceReport:
    scored: list[tuple[int, float]]
    pruned_ids: list[int]
    merges: list[MergeRecord]
    size_before: int
    size_after: int

    def validate(self) -> None:
        reduced = len(self.pruned_ids) + sum(len(m.absorbed_ids) - 1 for m in self.merges)
        if self.size_after != self.size_before - reduced:
            raise InvariantViolationError(
                f"report arithmetic broken: {self.size_before} - {reduced} != {self.size_after}"
            )


def run_maintenance(
    repo: Repository,
    verifier: MergeVerifier | None = None,
    *,
    force: bool = False,
    embedder: EmbeddingProvider | None = None,
    prune_enabled: bool = True,
) -> MaintenanceReport:
    """Score all patterns, prune, merge, double the threshold, audit the report.

    Requires the schedule to have fired unless ``force`` is set (the forced
    path still doubles the threshold). ``prune_enabled=False`` keeps the merge
    stage but skips pruning (the sweep driver's "no pruning" row). Atomic from
    a reader's point of view.
    """
    from . import persistence

    if not force and not maintenance_due(repo):
        raise MaintenanceNotDueError(
            f"tasks_completed={repo.tasks_completed} below threshold {repo.next_maintenance_threshold}"
        )
    verifier = verifier or default_verifier(repo)
    with repo.lock.write_locked():
        size_before = len(repo.patterns)
        epsilon = repo.config.epsilon
        scored = [(p.id, score_pattern(p, epsilon)) for p in repo.sorted_patterns()]
        pruned = _prune_locked(repo, repo.config.prune_fraction) if prune_enabled else []
        merges = _agglomerative_merge_locked(repo, verifier, repo.config.merge_threshold, embedder)
        report = MaintenanceReport(scored, pruned, merges, size_before, len(repo.patterns))
        report.validate()
        repo.next_maintenance_threshold *= 2
        repo.last_maintenance_task = repo.tasks_completed
        payload = persistence.report_to_record(report)
        payload["prune_enabled"] = prune_enabled
        persistence.append_event(repo, persistence.EventKind.MAINTENANCE, payload)
        repo.validate()
    return report
