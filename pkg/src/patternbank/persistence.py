"""Canonical on-disk format, append-only audit log, digesting, and replay.

Serialization is a custom canonical JSON emission: sorted keys, no optional
whitespace, ASCII-escaped strings, floats at 17 significant digits. Identical
states therefore produce identical bytes, and the 64-bit FNV-1a digest over
the canonical state document acts as a cheap tamper/replay check. The audit
log is a sequence of events each carrying the digest of the state *after*
the event, so replaying a log re-derives the whole chain.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Sequence

from .core import (
    DelegationRule,
    EngineConfig,
    InvariantViolationError,
    Pattern,
    PatternBankError,
    PatternKind,
    PatternMetadata,
    Repository,
    SkillBody,
    SkillForm,
    SubagentBody,
    ToolCall,
    ToolDeclaration,
    TrajectoryRecord,
    TrajectoryStep,
    SCHEMA_VERSION,
)

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_U64 = 0xFFFFFFFFFFFFFFFF


class ParseError(PatternBankError):
    def __init__(self, message: str, line: int, column: int):
        super().__init__(f"parse error at line {line}, column {column}: {message}")
        self.line = line
        self.column = column


class SchemaVersionError(PatternBankError):
    def __init__(self, found: int, expected: int):
        super().__init__(f"schema version {found} in file, this engine reads version {expected}")
        self.found = found
        self.expected = expected


class DigestDivergenceError(PatternBankError):
    def __init__(self, sequence_no: int, expected: str, actual: str):
        super().__init__(
            f"digest divergence at sequence_no {sequence_no}: recorded {expected}, replayed {actual}"
        )
        self.sequence_no = sequence_no


# ---------------------------------------------------------------------------
# Canonical JSON


def _canonical_float(x: float) -> str:
    if math.isnan(x) or math.isinf(x):
        raise PatternBankError("non-finite floats are not serializable")
    if x == 0.0:
        x = 0.0  # normalize -0.0
    return format(x, ".17g")


def canonical_json(obj) -> str:
    """Deterministic JSON text: sorted keys, compact, 17-digit floats."""
    parts: list[str] = []
    _emit(obj, parts)
    return "".join(parts)


def _emit(obj, parts: list[str]) -> None:
    if obj is None:
        parts.append("null")
    elif obj is True:
        parts.append("true")
    elif obj is False:
        parts.append("false")
    elif isinstance(obj, int):
        parts.append(repr(obj))
    elif isinstance(obj, float):
        parts.append(_canonical_float(obj))
    elif isinstance(obj, str):
        parts.append(json.dumps(obj, ensure_ascii=True))
    elif isinstance(obj, (list, tuple)):
        parts.append("[")
        for i, item in enumerate(obj):
            if i:
                parts.append(",")
            _emit(item, parts)
        parts.append("]")
    elif isinstance(obj, dict):
        parts.append("{")
        for i, key in enumerate(sorted(obj)):
            if not isinstance(key, str):
                raise PatternBankError(f"non-string mapping key {key!r} is not serializable")
            if i:
                parts.append(",")
            parts.append(json.dumps(key, ensure_ascii=True))
            parts.append(":")
            _emit(obj[key], parts)
        parts.append("}")
    else:
        raise PatternBankError(f"type {type(obj).__name__} is not serializable")


def fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * _FNV_PRIME) & _U64
    return h


# ---------------------------------------------------------------------------
# Record conversions (the single canonical mapping between objects and JSON)


def config_to_record(config: EngineConfig) -> dict:
    return {
        "k": config.k,
        "theta": config.theta,
        "mmr_lambda": config.mmr_lambda,
        "batch_size": config.batch_size,
        "prune_fraction": config.prune_fraction,
        "merge_threshold": config.merge_threshold,
        "epsilon": config.epsilon,
        "match_threshold": config.match_threshold,
        "embedding_dim": config.embedding_dim,
        "rrf_constant": config.rrf_constant,
        "bm25_k1": config.bm25_k1,
        "bm25_b": config.bm25_b,
        "seed": config.seed,
        "query_count": config.query_count,
        "use_hybrid": config.use_hybrid,
    }


def config_from_record(rec: dict) -> EngineConfig:
    return EngineConfig(
        k=int(rec["k"]),
        theta=float(rec["theta"]),
        mmr_lambda=float(rec["mmr_lambda"]),
        batch_size=int(rec["batch_size"]),
        prune_fraction=float(rec["prune_fraction"]),
        merge_threshold=float(rec["merge_threshold"]),
        epsilon=float(rec["epsilon"]),
        match_threshold=float(rec["match_threshold"]),
        embedding_dim=int(rec["embedding_dim"]),
        rrf_constant=float(rec["rrf_constant"]),
        bm25_k1=float(rec["bm25_k1"]),
        bm25_b=float(rec["bm25_b"]),
        seed=int(rec["seed"]),
        query_count=int(rec["query_count"]),
        use_hybrid=bool(rec["use_hybrid"]),
    )


def body_to_record(body: SkillBody | SubagentBody) -> dict:
    if isinstance(body, SkillBody):
        return {
            "type": "skill",
            "form": body.form.value,
            "guideline_text": body.guideline_text,
            "code_snippet": body.code_snippet,
            "code_language_tag": body.code_language_tag,
            "dependencies": list(body.dependencies),
            "usage_hint": body.usage_hint,
        }
    return {
        "type": "subagent",
        "system_prompt": body.system_prompt,
        "tool_declarations": [{"name": t.name, "purpose": t.purpose} for t in body.tool_declarations],
        "input_contract": body.input_contract,
        "output_contract": body.output_contract,
        "delegation_rules": [{"peer": r.peer, "condition": r.condition} for r in body.delegation_rules],
    }


def body_from_record(rec: dict) -> SkillBody | SubagentBody:
    if rec["type"] == "skill":
        return SkillBody(
            form=SkillForm(rec["form"]),
            guideline_text=rec["guideline_text"],
            code_snippet=rec["code_snippet"],
            code_language_tag=rec["code_language_tag"],
            dependencies=tuple(rec["dependencies"]),
            usage_hint=rec["usage_hint"],
        )
    if rec["type"] == "subagent":
        return SubagentBody(
            system_prompt=rec["system_prompt"],
            tool_declarations=tuple(
                ToolDeclaration(t["name"], t["purpose"]) for t in rec["tool_declarations"]
            ),
            input_contract=rec["input_contract"],
            output_contract=rec["output_contract"],
            delegation_rules=tuple(
                DelegationRule(r["peer"], r["condition"]) for r in rec["delegation_rules"]
            ),
        )
    raise PatternBankError(f"unknown body type {rec.get('type')!r}")


def pattern_to_record(pattern: Pattern) -> dict:
    meta = pattern.metadata
    return {
        "id": pattern.id,
        "kind": pattern.kind.value,
        "created_at_task": pattern.created_at_task,
        "body": body_to_record(pattern.body),
        "metadata": {
            "description": meta.description,
            "context": meta.context,
            "retrieval_count": meta.retrieval_count,
            "utilization_count": meta.utilization_count,
            "success_count": meta.success_count,
            "embedding": list(meta.embedding) if meta.embedding is not None else None,
        },
    }


def pattern_from_record(rec: dict) -> Pattern:
    meta_rec = rec["metadata"]
    embedding = meta_rec.get("embedding")
    return Pattern(
        id=int(rec["id"]),
        kind=PatternKind(rec["kind"]),
        body=body_from_record(rec["body"]),
        metadata=PatternMetadata(
            description=meta_rec["description"],
            context=meta_rec["context"],
            retrieval_count=int(meta_rec["retrieval_count"]),
            utilization_count=int(meta_rec["utilization_count"]),
            success_count=int(meta_rec["success_count"]),
            embedding=tuple(float(x) for x in embedding) if embedding is not None else None,
        ),
        created_at_task=int(rec["created_at_task"]),
    )


def trajectory_to_record(t: TrajectoryRecord) -> dict:
    return {
        "task_id": t.task_id,
        "task_description": t.task_description,
        "steps": [[s.action, s.observation] for s in t.steps],
        "tool_calls": [[c.tool, c.args_digest] for c in t.tool_calls],
        "subagent_calls": list(t.subagent_calls),
        "injected_pattern_ids": list(t.injected_pattern_ids),
        "outcome": t.outcome,
    }


def trajectory_from_record(rec: dict) -> TrajectoryRecord:
    return TrajectoryRecord(
        task_id=rec["task_id"],
        task_description=rec["task_description"],
        steps=tuple(TrajectoryStep(a, o) for a, o in rec["steps"]),
        tool_calls=tuple(ToolCall(t, d) for t, d in rec["tool_calls"]),
        subagent_calls=tuple(rec["subagent_calls"]),
        injected_pattern_ids=tuple(int(i) for i in rec["injected_pattern_ids"]),
        outcome=bool(rec["outcome"]),
    )


def draft_to_record(draft) -> dict:
    features = draft.features
    return {
        "description": draft.description,
        "context": draft.context,
        "kind": draft.kind.value if draft.kind is not None else None,
        "body": body_to_record(draft.body),
        "features": {
            "sustained_memory": features.sustained_memory,
            "independent_reasoning": features.independent_reasoning,
            "subtask_encapsulation": features.subtask_encapsulation,
            "stateless_guidance": features.stateless_guidance,
            "step_count": features.step_count,
            "decision_points": features.decision_points,
            "tool_count": features.tool_count,
            "stateful": features.stateful,
        },
    }


def draft_from_record(rec: dict):
    from .extraction import ClassificationFeatures, PatternDraft

    f = rec["features"]
    return PatternDraft(
        description=rec["description"],
        context=rec["context"],
        body=body_from_record(rec["body"]),
        features=ClassificationFeatures(
            sustained_memory=bool(f["sustained_memory"]),
            independent_reasoning=bool(f["independent_reasoning"]),
            subtask_encapsulation=bool(f["subtask_encapsulation"]),
            stateless_guidance=bool(f["stateless_guidance"]),
            step_count=int(f["step_count"]),
            decision_points=int(f["decision_points"]),
            tool_count=int(f["tool_count"]),
            stateful=bool(f["stateful"]),
        ),
        kind=PatternKind(rec["kind"]) if rec["kind"] is not None else None,
    )


def report_to_record(report) -> dict:
    return {
        "scored": [[pid, score] for pid, score in report.scored],
        "pruned_ids": list(report.pruned_ids),
        "merges": [
            {"absorbed_ids": list(m.absorbed_ids), "new_id": m.new_id} for m in report.merges
        ],
        "size_before": report.size_before,
        "size_after": report.size_after,
    }


# ---------------------------------------------------------------------------
# State document and digest


def state_document(repo: Repository) -> dict:
    """Everything that defines future behavior; audit log excluded (it holds
    digests of this document, so including it would be circular)."""
    return {
        "schema_version": repo.schema_version,
        "config": config_to_record(repo.config),
        "tasks_completed": repo.tasks_completed,
        "next_maintenance_threshold": repo.next_maintenance_threshold,
        "last_maintenance_task": repo.last_maintenance_task,
        "next_pattern_id": repo.next_pattern_id,
        "patterns": [pattern_to_record(p) for p in repo.sorted_patterns()],
        "trajectories": [trajectory_to_record(t) for t in repo.trajectories],
    }


def state_digest(repo: Repository) -> str:
    return format(fnv1a64(canonical_json(state_document(repo)).encode("utf-8")), "016x")


# ---------------------------------------------------------------------------
# Audit log


class EventKind(Enum):
    SEED = "seed"
    TASK_FINISHED = "task_finished"
    EXTRACTION = "extraction"
    MAINTENANCE = "maintenance"
    SNAPSHOT = "snapshot"


@dataclass(frozen=True)
class AuditEvent:
    sequence_no: int
    event_kind: EventKind
    payload: dict
    state_digest: str


def append_event(repo: Repository, kind: EventKind, payload: dict) -> AuditEvent:
    """Record an event with the digest of the post-event state. Callers hold
    the writer lock (or own the repository exclusively)."""
    event = AuditEvent(len(repo.audit_log), kind, payload, state_digest(repo))
    repo.audit_log.append(event)
    return event


def event_to_record(event: AuditEvent) -> dict:
    return {
        "sequence_no": event.sequence_no,
        "event_kind": event.event_kind.value,
        "payload": event.payload,
        "state_digest": event.state_digest,
    }


def event_from_record(rec: dict) -> AuditEvent:
    return AuditEvent(
        sequence_no=int(rec["sequence_no"]),
        event_kind=EventKind(rec["event_kind"]),
        payload=rec["payload"],
        state_digest=rec["state_digest"],
    )


def save_audit_log(repo: Repository, path: str | os.PathLike) -> int:
    """Write the audit log as one canonical JSON record per line."""
    text = "".join(canonical_json(event_to_record(e)) + "\n" for e in repo.audit_log)
    data = text.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(data)
    return len(data)


def load_audit_log(path: str | os.PathLike) -> list[AuditEvent]:
    events = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                events.append(event_from_record(json.loads(line)))
            except json.JSONDecodeError as exc:
                raise ParseError(exc.msg, lineno, exc.colno) from exc
            except (KeyError, ValueError) as exc:
                raise ParseError(f"malformed audit record: {exc}", lineno, 1) from exc
    return events


# ---------------------------------------------------------------------------
# Save / load


def save(repo: Repository, path: str | os.PathLike) -> int:
    """Write the repository as a canonical text document; returns byte count.

    Identical states yield byte-identical files; repeated saves of one state
    are byte-identical because saving never mutates.
    """
    if repo.open_context is not None:
        raise PatternBankError("cannot save with an open execution context")
    doc = state_document(repo)
    doc["audit"] = [event_to_record(e) for e in repo.audit_log]
    data = (canonical_json(doc) + "\n").encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(data)
    return len(data)


def load(path: str | os.PathLike) -> Repository:
    """Read a repository document, re-validating every invariant."""
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, exc.lineno, exc.colno) from exc
    found_version = int(doc.get("schema_version", -1))
    if found_version != SCHEMA_VERSION:
        raise SchemaVersionError(found_version, SCHEMA_VERSION)
    repo = Repository(config_from_record(doc["config"]))
    repo.tasks_completed = int(doc["tasks_completed"])
    repo.next_maintenance_threshold = int(doc["next_maintenance_threshold"])
    repo.last_maintenance_task = int(doc["last_maintenance_task"])
    repo.next_pattern_id = int(doc["next_pattern_id"])
    for rec in doc["patterns"]:
        pattern = pattern_from_record(rec)
        if pattern.id in repo.patterns:
            raise InvariantViolationError("duplicate pattern id in file", pattern.id)
        repo.patterns[pattern.id] = pattern
    repo.trajectories = [trajectory_from_record(r) for r in doc["trajectories"]]
    repo.audit_log = [event_from_record(r) for r in doc.get("audit", [])]
    repo.validate()
    return repo


# ---------------------------------------------------------------------------
# Replay


def replay(
    events: Sequence[AuditEvent],
    *,
    judge=None,
    verifier=None,
    embedder=None,
    query_generator=None,
) -> str:
    """Re-execute an audit log from its initial snapshot; returns the final digest.

    Task and maintenance events are re-executed with the default scripted
    providers (overridable via keywords); extraction events replay their
    recorded drafts, so any provider's output replays exactly. The first
    mismatch between a recorded digest and the replayed state raises
    DigestDivergenceError with that sequence number.
    """
    from . import extraction, lifecycle, tracking
    from .core import new_repository

    if not events:
        return state_digest(Repository(EngineConfig()))
    first = events[0]
    if first.sequence_no != 0 or first.event_kind is not EventKind.SNAPSHOT:
        raise PatternBankError("audit log must start with the initial snapshot event")
    if "config" not in first.payload:
        raise PatternBankError("initial snapshot must carry the engine config")
    repo = new_repository(config_from_record(first.payload["config"]))
    _check_digest(repo, first)

    for index, event in enumerate(events[1:], start=1):
        if event.sequence_no != index:
            raise PatternBankError(
                f"audit log gap: expected sequence_no {index}, found {event.sequence_no}"
            )
        kind = event.event_kind
        if kind is EventKind.SEED:
            from .core import seed_patterns

            seed_patterns(
                repo, [pattern_from_record(r) for r in event.payload["patterns"]], embedder
            )
        elif kind is EventKind.TASK_FINISHED:
            trajectory = trajectory_from_record(event.payload["trajectory"])
            ctx = tracking.begin_task(
                repo,
                trajectory.task_description,
                task_id=trajectory.task_id,
                embedder=embedder,
                query_generator=query_generator,
            )
            recorded_ids = [int(pid) for pid, _ in event.payload["retrieved"]]
            if [pid for pid, _ in ctx.retrieved] != recorded_ids:
                raise DigestDivergenceError(event.sequence_no, event.state_digest, "retrieval-diverged")
            tracking.finish_task(repo, ctx, trajectory, judge)
        elif kind is EventKind.EXTRACTION:
            drafts = [draft_from_record(r) for r in event.payload["drafts"]]
            extraction.install_drafts(repo, drafts, embedder)
        elif kind is EventKind.MAINTENANCE:
            lifecycle.run_maintenance(
                repo,
                verifier,
                force=True,
                embedder=embedder,
                prune_enabled=bool(event.payload.get("prune_enabled", True)),
            )
        elif kind is EventKind.SNAPSHOT:
            append_event(repo, EventKind.SNAPSHOT, event.payload)
        else:  # pragma: no cover - enum is closed
            raise PatternBankError(f"unknown event kind {kind}")
        _check_digest(repo, event)
    return repo.audit_log[-1].state_digest


def _check_digest(repo: Repository, event: AuditEvent) -> None:
    actual = repo.audit_log[-1].state_digest if repo.audit_log else state_digest(repo)
    if actual != event.state_digest:
        raise DigestDivergenceError(event.sequence_no, event.state_digest, actual)
