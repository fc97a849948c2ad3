"""Candidate retrieval: multi-query semantic search, BM25, RRF fusion, MMR.

Pipeline shape (hybrid on): both full rankings (semantic max-over-queries
cosine; lexical BM25) are fused with reciprocal-rank fusion, the similarity
threshold is applied to the semantic score only, the fused order picks the
top-k, and MMR diversifies the picked set. The threshold never applies to
fused scores because RRF values live on a different scale than cosines.

All operations here are read-only; counter updates live in `tracking`.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Mapping, Protocol, Sequence, runtime_checkable

from .core import Pattern, PatternBankError, Repository
from .embedding import EmbeddingProvider, cosine, default_embedder, tokenize


@dataclass(frozen=True)
class RankedHit:
    """One entry of a ranking: 1-based rank, non-increasing scores."""

    pattern_id: int
    score: float
    rank: int


@runtime_checkable
class QueryGenerator(Protocol):
    """Expands a task description into m query strings, original included."""

    def expand(self, task_description: str, m: int) -> list[str]: ...


_STOPWORDS = frozenset(
    "a an and are as at be by for from has have i in is it its of on or that the "
    "this to was we were will with you your".split()
)
_CONSTRAINT_WORDS = frozenset(
    "after all avoid before budget cannot each ensure every least limit max maximum "
    "min minimum must need never no none not only require required under within without".split()
)


class RuleBasedQueryGenerator:
    """Scripted stand-in for an LLM query expander.

    Emits the original description, a content-word reformulation (stopwords
    dropped), and a constraint-keyword reformulation; extra slots repeat the
    original. Every query is non-empty.
    """

    def expand(self, task_description: str, m: int = 3) -> list[str]:
        if not task_description.strip():
            raise PatternBankError("task description must be non-empty")
        tokens = tokenize(task_description)
        content = " ".join(t for t in tokens if t not in _STOPWORDS and len(t) > 2)
        constraint = " ".join(t for t in tokens if t in _CONSTRAINT_WORDS or len(t) > 4)
        queries = [task_description, content or task_description, constraint or content or task_description]
        while len(queries) < m:
            queries.append(task_description)
        return queries[:m]


def default_query_generator() -> RuleBasedQueryGenerator:
    return RuleBasedQueryGenerator()


# ---------------------------------------------------------------------------
# Semantic side


def max_query_sim(query_vectors: Sequence[Sequence[float]], pattern: Pattern) -> float:
    """Similarity of a pattern to a task: max cosine over all query vectors."""
    if not query_vectors:
        raise PatternBankError("at least one query vector required")
    if pattern.metadata.embedding is None:
        raise PatternBankError(f"pattern {pattern.id} has no embedding")
    return max(cosine(q, pattern.metadata.embedding) for q in query_vectors)


def _semantic_scores(repo: Repository, query_vectors: Sequence[Sequence[float]]) -> dict[int, float]:
    return {p.id: max_query_sim(query_vectors, p) for p in repo.sorted_patterns()}


def _task_query_vectors(
    repo: Repository,
    task_description: str,
    embedder: EmbeddingProvider | None,
    query_generator: QueryGenerator | None,
) -> list[tuple[float, ...]]:
    embedder = embedder or default_embedder(repo.config)
    generator = query_generator or default_query_generator()
    queries = generator.expand(task_description, repo.config.query_count)
    return [embedder.embed(q) for q in queries]


def _as_ranking(scores: Mapping[int, float]) -> list[RankedHit]:
    ordered = sorted(scores, key=lambda pid: (-scores[pid], pid))
    return [RankedHit(pid, scores[pid], rank) for rank, pid in enumerate(ordered, start=1)]


def retrieve(
    repo: Repository,
    task_description: str,
    k: int | None = None,
    theta: float | None = None,
    *,
    embedder: EmbeddingProvider | None = None,
    query_generator: QueryGenerator | None = None,
) -> list[RankedHit]:
    """Top-k patterns with semantic similarity >= theta, score-descending.

    Ties break toward the smaller (older) pattern id. An empty result is
    valid; the repository is never modified.
    """
    k = repo.config.k if k is None else k
    theta = repo.config.theta if theta is None else theta
    if k < 1:
        raise PatternBankError("k must be >= 1")
    if not 0.0 <= theta <= 1.0:
        raise PatternBankError("theta must be within [0, 1]")
    with repo.lock.read_locked():
        if not repo.patterns:
            return []
        vectors = _task_query_vectors(repo, task_description, embedder, query_generator)
        scores = _semantic_scores(repo, vectors)
    kept = {pid: s for pid, s in scores.items() if s >= theta}
    return _as_ranking(kept)[:k]


# ---------------------------------------------------------------------------
# Lexical side (Okapi BM25 with the non-negative IDF variant)


@dataclass(frozen=True)
class CorpusStats:
    doc_count: int
    avg_doc_len: float
    doc_freq: Mapping[str, int]


def build_corpus_stats(docs_tokens: Sequence[Sequence[str]]) -> CorpusStats:
    df: Counter[str] = Counter()
    total_len = 0
    for tokens in docs_tokens:
        total_len += len(tokens)
        df.update(set(tokens))
    n = len(docs_tokens)
    return CorpusStats(n, total_len / n if n else 0.0, dict(df))


def bm25_score(
    query_tokens: Sequence[str],
    doc_tokens: Sequence[str],
    corpus_stats: CorpusStats,
    k1: float = 1.2,
    b: float = 0.75,
) -> float:
    """Okapi BM25 with idf = ln(1 + (N - df + 0.5)/(df + 0.5)), hence >= 0."""
    if corpus_stats.doc_count == 0 or not doc_tokens:
        return 0.0
    tf = Counter(doc_tokens)
    n = corpus_stats.doc_count
    length_ratio = len(doc_tokens) / corpus_stats.avg_doc_len if corpus_stats.avg_doc_len else 0.0
    denom_norm = k1 * (1.0 - b + b * length_ratio)
    score = 0.0
    for term in query_tokens:
        f = tf.get(term)
        if not f:
            continue
        df = corpus_stats.doc_freq.get(term, 0)
        idf = math.log(1.0 + (n - df + 0.5) / (df + 0.5))
        score += idf * f * (k1 + 1.0) / (f + denom_norm)
    return score


def _pattern_doc_tokens(pattern: Pattern) -> list[str]:
    meta = pattern.metadata
    return tokenize(f"{meta.description}\n{meta.context}")


def _repo_corpus(repo: Repository) -> tuple[dict[int, list[str]], CorpusStats]:
    """Per-pattern token lists plus corpus stats, cached per pattern-set version."""
    cached = repo._bm25_cache
    if cached is not None and cached[0] == repo.mutation_counter:
        return cached[1]
    docs = {p.id: _pattern_doc_tokens(p) for p in repo.sorted_patterns()}
    stats = build_corpus_stats(list(docs.values()))
    repo._bm25_cache = (repo.mutation_counter, (docs, stats))
    return docs, stats


def _lexical_scores(repo: Repository, task_description: str) -> dict[int, float]:
    docs, stats = _repo_corpus(repo)
    query_tokens = tokenize(task_description)
    k1, b = repo.config.bm25_k1, repo.config.bm25_b
    return {pid: bm25_score(query_tokens, tokens, stats, k1, b) for pid, tokens in docs.items()}


# ---------------------------------------------------------------------------
# Rank fusion


def _check_ranking(hits: Sequence[RankedHit]) -> None:
    ranks = sorted(h.rank for h in hits)
    if ranks != list(range(1, len(hits) + 1)):
        raise PatternBankError("ranking ranks must be a permutation of 1..n")
    ordered = sorted(hits, key=lambda h: h.rank)
    for prev, cur in zip(ordered, ordered[1:]):
        if cur.score > prev.score:
            raise PatternBankError("ranking scores must be non-increasing with rank")
    if len({h.pattern_id for h in hits}) != len(hits):
        raise PatternBankError("ranking must not repeat a pattern id")


def rrf_fuse(rankings: Sequence[Sequence[RankedHit]], rrf_constant: float = 60.0) -> list[RankedHit]:
    """Reciprocal-rank fusion: score(p) = sum over rankings of 1/(c + rank).

    Patterns absent from a ranking simply contribute nothing for it. The
    fused order is invariant under permutation of the rankings list.
    """
    if len(rankings) < 2:
        raise PatternBankError("rrf_fuse requires at least two rankings")
    if rrf_constant <= 0:
        raise PatternBankError("rrf_constant must be > 0")
    fused: dict[int, float] = {}
    for ranking in rankings:
        _check_ranking(ranking)
        for hit in ranking:
            fused[hit.pattern_id] = fused.get(hit.pattern_id, 0.0) + 1.0 / (rrf_constant + hit.rank)
    return _as_ranking(fused)


# ---------------------------------------------------------------------------
# MMR diversification


def mmr_select(
    hits: Sequence[RankedHit],
    embeddings: Mapping[int, Sequence[float]],
    mmr_lambda: float,
    k: int,
) -> list[int]:
    """Greedy maximal-marginal-relevance selection; returns ids in pick order.

    Each step picks argmax of
    ``lambda * relevance(p) - (1 - lambda) * max_sim(p, selected)`` with the
    empty-set max defined as 0, so the first pick is the most relevant
    candidate regardless of lambda. Ties break toward the smaller id.
    """
    if not 0.0 <= mmr_lambda <= 1.0:
        raise PatternBankError("mmr_lambda must be within [0, 1]")
    if k < 1:
        raise PatternBankError("k must be >= 1")
    relevance = {h.pattern_id: h.score for h in hits}
    remaining = sorted(relevance)
    if not remaining:
        return []

    first = min(remaining, key=lambda pid: (-relevance[pid], pid))
    selected = [first]
    remaining.remove(first)
    max_sim = {pid: cosine(embeddings[pid], embeddings[first]) for pid in remaining}

    while remaining and len(selected) < k:
        best = min(
            remaining,
            key=lambda pid: (-(mmr_lambda * relevance[pid] - (1.0 - mmr_lambda) * max_sim[pid]), pid),
        )
        selected.append(best)
        remaining.remove(best)
        for pid in remaining:
            sim = cosine(embeddings[pid], embeddings[best])
            if sim > max_sim[pid]:
                max_sim[pid] = sim
    return selected


# ---------------------------------------------------------------------------
# Hybrid composition (consumed by tracking.begin_task and the CLI)


def hybrid_candidates(
    repo: Repository,
    task_description: str,
    *,
    embedder: EmbeddingProvider | None = None,
    query_generator: QueryGenerator | None = None,
) -> tuple[list[int], dict[int, float]]:
    """Fused candidate selection: ids in final order plus semantic scores.

    Semantic and BM25 rankings over the whole corpus are RRF-fused; patterns
    below the semantic threshold are dropped; the fused order keeps the
    top-k. With hybrid disabled this degenerates to plain `retrieve`.
    """
    with repo.lock.read_locked():
        return hybrid_candidates_unlocked(
            repo, task_description, embedder=embedder, query_generator=query_generator
        )


def hybrid_candidates_unlocked(
    repo: Repository,
    task_description: str,
    *,
    embedder: EmbeddingProvider | None = None,
    query_generator: QueryGenerator | None = None,
) -> tuple[list[int], dict[int, float]]:
    """`hybrid_candidates` body for callers already holding the repo lock."""
    config = repo.config
    if not repo.patterns:
        return [], {}
    vectors = _task_query_vectors(repo, task_description, embedder, query_generator)
    semantic = _semantic_scores(repo, vectors)
    if not config.use_hybrid:
        kept = {pid: s for pid, s in semantic.items() if s >= config.theta}
        order = [h.pattern_id for h in _as_ranking(kept)[: config.k]]
        return order, {pid: semantic[pid] for pid in order}
    lexical = _lexical_scores(repo, task_description)
    fused = rrf_fuse([_as_ranking(semantic), _as_ranking(lexical)], config.rrf_constant)
    order = [h.pattern_id for h in fused if semantic[h.pattern_id] >= config.theta][: config.k]
    return order, {pid: semantic[pid] for pid in order}
