"""Deterministic synthetic-task simulator reproducing repository dynamics.

The simulator replaces live environments with a tag-structured task domain:
each task mixes one or two subtask tags with vocabulary sampled per tag, the
scripted extraction provider emits near-duplicate patterns per tag (plus
occasional off-topic noise), and the mock agent echoes the declared steps of
the first matching pattern per tag so the default utilization matcher sees
genuinely applied patterns and ignores the rest. Success probability is
``base + boost * covered_tag_fraction``; outcome draws use a per-task RNG
substream so runs with the same seed are comparable point by point.

Everything here is a pure function of (config, toggles, domain, seed):
time-series CSV bytes and audit digests are reproducible exactly.
"""

from __future__ import annotations

import hashlib
import logging
import random
from collections import deque
from dataclasses import dataclass, field, replace

from .core import (
    EngineConfig,
    PatternBankError,
    Repository,
    SkillBody,
    SkillForm,
    SubagentBody,
    ToolCall,
    ToolDeclaration,
    TrajectoryRecord,
    TrajectoryStep,
    new_repository,
)
from .embedding import default_embedder, tokenize
from .extraction import (
    ClassificationFeatures,
    ExtractionProviderError,
    PatternDraft,
    extract_and_install,
    extraction_due,
)
from .lifecycle import default_verifier, maintenance_due, run_maintenance
from .tracking import ExecutionContext, begin_task, finish_task
from . import persistence

log = logging.getLogger(__name__)

ROLLING_WINDOW = 20
ECHO_RATE = 0.97
NOISE_MARKER = "offtopic"


# ---------------------------------------------------------------------------
# Synthetic domain


@dataclass(frozen=True)
class SyntheticDomain:
    subtask_tags: tuple[str, ...]
    vocabulary: dict[str, tuple[str, ...]]
    base_success_prob: float = 0.35
    pattern_boost: float = 0.5
    noise_pattern_rate: float = 0.3
    noise_vocabulary: tuple[str, ...] = ()

    def validate(self) -> None:
        if not self.subtask_tags:
            raise PatternBankError("domain needs at least one subtask tag")
        if self.base_success_prob + self.pattern_boost > 1.0 + 1e-12:
            raise PatternBankError("base_success_prob + pattern_boost must be <= 1")
        if not 0.0 <= self.noise_pattern_rate <= 1.0:
            raise PatternBankError("noise_pattern_rate must be within [0, 1]")
        for tag in self.subtask_tags:
            if len(self.vocabulary.get(tag, ())) < 6:
                raise PatternBankError(f"tag {tag!r} needs a vocabulary of at least 6 tokens")


def default_domain() -> SyntheticDomain:
    return SyntheticDomain(
        subtask_tags=("booking", "routing", "budgeting", "searching", "measuring", "reporting"),
        vocabulary={
            "booking": ("reserve", "hotel", "room", "checkin", "dates", "confirm", "availability", "guest"),
            "routing": ("route", "map", "navigate", "waypoint", "distance", "transit", "schedule", "leg"),
            "budgeting": ("budget", "cost", "estimate", "total", "expense", "limit", "allocate", "spend"),
            "searching": ("search", "find", "lookup", "query", "filter", "source", "index", "match"),
            "measuring": ("measure", "sensor", "reading", "calibrate", "record", "instrument", "sample", "unit"),
            "reporting": ("report", "summary", "compile", "format", "publish", "export", "section", "table"),
        },
        noise_vocabulary=("zymurgy", "quasar", "obelisk", "fresco", "tundra", "sonnet", "gargoyle", "isotope"),
    )


@dataclass(frozen=True)
class SyntheticTask:
    index: int  # 1-based
    description: str
    tags: tuple[str, ...]


def generate_tasks(domain: SyntheticDomain, n: int, seed: int) -> list[SyntheticTask]:
    """n tag-structured task descriptions, a pure function of the seed."""
    if n < 1:
        raise PatternBankError("n must be >= 1")
    domain.validate()
    rng = random.Random(f"{seed}:tasks")
    tasks = []
    for index in range(1, n + 1):
        tag_count = 1 if rng.random() < 0.5 else 2
        tags = tuple(rng.sample(domain.subtask_tags, min(tag_count, len(domain.subtask_tags))))
        sections = []
        for tag in tags:
            words = rng.sample(domain.vocabulary[tag], 5)
            sections.append(f"handle the {tag} subtask: " + " ".join(words))
        tasks.append(SyntheticTask(index, "; ".join(sections), tags))
    return tasks


# ---------------------------------------------------------------------------
# Scripted extraction provider


def _uid(seed: int, batch: int, tag: str, variant: int) -> str:
    raw = f"{seed}:{batch}:{tag}:{variant}".encode("utf-8")
    return "v" + hashlib.blake2b(raw, digest_size=4).hexdigest()


class ScriptedExtractionProvider:
    """Templated drafts derived from the tags seen in successful trajectories.

    Per batch it picks up to two recurring tags and emits two near-duplicate
    variants each (identical context, variant token in description and steps),
    which is what drives merge and pruning dynamics downstream. Off-topic
    noise drafts appear at the domain's noise rate. ``subagents_enabled=False``
    reclassifies everything as guideline skills; ``single_task`` mode emits at
    most one overfit draft per (single-trajectory) batch.
    """

    def __init__(
        self,
        domain: SyntheticDomain,
        seed: int,
        *,
        subagents_enabled: bool = True,
        single_task: bool = False,
    ):
        domain.validate()
        self.domain = domain
        self.seed = seed
        self.subagents_enabled = subagents_enabled
        self.single_task = single_task
        self.batch_counter = 0

    def extract(self, successes, failures) -> list[PatternDraft]:
        self.batch_counter += 1
        rng = random.Random(f"{self.seed}:extract:{self.batch_counter}")
        tags = []
        for tag in self.domain.subtask_tags:
            if any(tag in tokenize(t.task_description) for t in successes):
                tags.append(tag)
        rng.shuffle(tags)  # spread extraction across tags over the run
        drafts: list[PatternDraft] = []
        if self.single_task:
            for tag in tags[:1]:
                drafts.append(self._tag_draft(tag, variant=0))
        else:
            for tag in tags[:2]:
                for variant in range(2):
                    drafts.append(self._tag_draft(tag, variant))
        if len(drafts) < 5 and rng.random() < self.domain.noise_pattern_rate:
            drafts.append(self._noise_draft())
        return drafts[:5]

    def _tag_kind(self, tag: str) -> str:
        if not self.subagents_enabled:
            return "guideline"
        position = self.domain.subtask_tags.index(tag)
        if position < 2:
            return "subagent"
        if position == 2:
            return "code"
        return "guideline"

    def _tag_draft(self, tag: str, variant: int) -> PatternDraft:
        uid = _uid(self.seed, self.batch_counter, tag, variant)
        pool = self.domain.vocabulary[tag]
        description = f"{tag} workflow {uid}"
        context = (
            f"handle the {tag} subtask for tasks about " + " ".join(pool) + " with care"
        )
        kind = self._tag_kind(tag)
        if kind == "subagent":
            body = SubagentBody(
                system_prompt=f"coordinate the {tag} subtask end to end ({uid})",
                tool_declarations=(
                    ToolDeclaration(f"{tag}_{uid}_collect", f"gather {tag} inputs"),
                    ToolDeclaration(f"{tag}_{uid}_verify", f"check {tag} constraints"),
                    ToolDeclaration(f"{tag}_{uid}_commit", f"finalize the {tag} result"),
                ),
                input_contract=f"goal and constraints for {tag}",
                output_contract=f"completed {tag} plan",
            )
            features = ClassificationFeatures(
                sustained_memory=True,
                step_count=6,
                decision_points=3,
                tool_count=3,
                stateful=True,
            )
        elif kind == "code":
            body = SkillBody(
                form=SkillForm.CODE,
                code_snippet=f"def run_{tag}_{uid}(payload):\n    return payload",
                code_language_tag="python",
                dependencies=(),
                usage_hint=f"run_{tag}_{uid}(payload)",
            )
            features = ClassificationFeatures(
                stateless_guidance=True, step_count=1, decision_points=0, tool_count=1
            )
        else:
            lines = [
                f"{uid} begin {pool[0]} {pool[1]}",
                f"{uid} check {pool[2]} {pool[3]}",
                f"{uid} apply {pool[4]} {pool[5]}",
                f"{uid} confirm {pool[0]} {pool[2]}",
            ]
            body = SkillBody(form=SkillForm.GUIDELINE, guideline_text="\n".join(lines))
            features = ClassificationFeatures(
                stateless_guidance=True, step_count=4, decision_points=1, tool_count=0
            )
        return PatternDraft(description=description, context=context, body=body, features=features)

    def _noise_draft(self) -> PatternDraft:
        uid = _uid(self.seed, self.batch_counter, NOISE_MARKER, 0)
        words = self.domain.noise_vocabulary or ("drift", "static", "void")
        lines = [f"{uid} ponder {w}" for w in words[:3]]
        return PatternDraft(
            description=f"{NOISE_MARKER} musing {uid}",
            context=f"{NOISE_MARKER} topics: " + " ".join(words),
            body=SkillBody(form=SkillForm.GUIDELINE, guideline_text="\n".join(lines)),
            features=ClassificationFeatures(stateless_guidance=True, step_count=3),
        )


class NullExtractionProvider:
    """Baseline provider: never learns anything."""

    def extract(self, successes, failures) -> list[PatternDraft]:
        return []


# ---------------------------------------------------------------------------
# Mock agent


def _pattern_tags(domain: SyntheticDomain, pattern) -> set[str]:
    context_tokens = set(tokenize(pattern.metadata.context))
    return {tag for tag in domain.subtask_tags if tag in context_tokens}


def mock_agent_step(
    domain: SyntheticDomain,
    task: SyntheticTask,
    ctx: ExecutionContext,
    patterns_by_id,
    rng: random.Random,
    outcome_rng: random.Random,
) -> TrajectoryRecord:
    """Simulate one execution: follow the first matching pattern per task tag.

    Followed patterns have their declared steps echoed into the trajectory at
    ECHO_RATE (so the default matcher scores them well above the utilization
    threshold); every other injected pattern, noise included, leaves no trace.
    """
    from .tracking import declared_steps

    steps = [TrajectoryStep(f"inspect task {task.index}", "ok")]
    tool_calls: list[ToolCall] = []
    subagent_calls: list[str] = []

    plan_patterns = [patterns_by_id[pid] for pid, _ in ctx.retrieved]
    covered = set()
    for tag in task.tags:
        chosen = next((p for p in plan_patterns if tag in _pattern_tags(domain, p)), None)
        if chosen is None:
            continue
        covered.add(tag)
        for step_text in declared_steps(chosen):
            if rng.random() >= ECHO_RATE:
                continue
            if isinstance(chosen.body, SubagentBody):
                subagent_calls.append(step_text)
                steps.append(TrajectoryStep(f"delegate {step_text}", "done"))
            else:
                steps.append(TrajectoryStep(step_text, "done"))
                if isinstance(chosen.body, SkillBody) and chosen.body.form is SkillForm.CODE:
                    tool_calls.append(ToolCall(step_text.split("(")[0], "args"))

    coverage = len(covered) / len(task.tags) if task.tags else 0.0
    probability = min(1.0, domain.base_success_prob + domain.pattern_boost * coverage)
    outcome = outcome_rng.random() < probability
    return TrajectoryRecord(
        task_id=ctx.task_id,
        task_description=task.description,
        steps=tuple(steps),
        tool_calls=tuple(tool_calls),
        subagent_calls=tuple(subagent_calls),
        injected_pattern_ids=tuple(pid for pid, _ in ctx.retrieved),
        outcome=outcome,
    )


# ---------------------------------------------------------------------------
# Experiment driver


@dataclass(frozen=True)
class Toggles:
    maintenance_on: bool = True
    batch_extraction_on: bool = True
    subagents_on: bool = True


@dataclass(frozen=True)
class TimePoint:
    task_index: int
    repo_size: int
    utilization_ratio: float
    success_rate: float


@dataclass
class RunTimeSeries:
    rows: list[TimePoint] = field(default_factory=list)

    CSV_HEADER = "task_index,repo_size,utilization_ratio,success_rate"

    def to_csv(self) -> str:
        lines = [self.CSV_HEADER]
        for row in self.rows:
            lines.append(
                f"{row.task_index},{row.repo_size},{row.utilization_ratio:.6f},{row.success_rate:.6f}"
            )
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class UtilizationLogRow:
    task_id: str
    pattern_id: int
    alpha: float
    utilized: bool
    success_credited: bool


@dataclass
class RunReport:
    seed: int
    n_tasks: int
    toggles: Toggles
    final_repo_size: int = 0
    final_utilization_ratio: float = 0.0
    overall_success_rate: float = 0.0
    maintenance_task_indices: list[int] = field(default_factory=list)
    extraction_task_indices: list[int] = field(default_factory=list)
    outcomes: list[bool] = field(default_factory=list)
    util_rows: list[UtilizationLogRow] = field(default_factory=list)
    final_digest: str = ""

    UTIL_CSV_HEADER = "task_id,pattern_id,alpha,utilized,success_credited"

    def util_rows_csv(self) -> str:
        lines = [self.UTIL_CSV_HEADER]
        for row in self.util_rows:
            lines.append(
                f"{row.task_id},{row.pattern_id},{row.alpha:.6f},"
                f"{int(row.utilized)},{int(row.success_credited)}"
            )
        return "\n".join(lines) + "\n"


@dataclass
class ExperimentResult:
    time_series: RunTimeSeries
    report: RunReport
    repo: Repository


def mean_utilization_ratio(repo: Repository) -> float:
    ratios = [
        p.metadata.utilization_count / p.metadata.retrieval_count
        for p in repo.patterns.values()
        if p.metadata.retrieval_count > 0
    ]
    return sum(ratios) / len(ratios) if ratios else 0.0


def run_experiment(
    config: EngineConfig,
    toggles: Toggles | None = None,
    *,
    n_tasks: int = 180,
    domain: SyntheticDomain | None = None,
    provider=None,
    prune_enabled: bool = True,
) -> ExperimentResult:
    """Drive begin -> mock step -> finish -> extraction -> maintenance for
    ``n_tasks`` synthetic tasks; deterministic per (config, toggles, seed)."""
    toggles = toggles or Toggles()
    domain = domain or default_domain()
    config.validate()
    domain.validate()

    repo = new_repository(config)
    embedder = default_embedder(config)
    verifier = default_verifier(repo)
    if provider is None:
        provider = ScriptedExtractionProvider(
            domain,
            config.seed,
            subagents_enabled=toggles.subagents_on,
            single_task=not toggles.batch_extraction_on,
        )
    batch_size = config.batch_size if toggles.batch_extraction_on else 1

    tasks = generate_tasks(domain, n_tasks, config.seed) if n_tasks else []
    series = RunTimeSeries()
    report = RunReport(seed=config.seed, n_tasks=n_tasks, toggles=toggles)
    window: deque[bool] = deque(maxlen=ROLLING_WINDOW)

    for task in tasks:
        ctx = begin_task(repo, task.description, task_id=f"task-{task.index:06d}")
        step_rng = random.Random(f"{config.seed}:steps:{task.index}")
        outcome_rng = random.Random(f"{config.seed}:outcome:{task.index}")
        trajectory = mock_agent_step(domain, task, ctx, repo.patterns, step_rng, outcome_rng)
        summary = finish_task(repo, ctx, trajectory)

        window.append(trajectory.outcome)
        report.outcomes.append(trajectory.outcome)
        for row in summary.rows:
            report.util_rows.append(
                UtilizationLogRow(summary.task_id, row.pattern_id, row.alpha, row.utilized, row.success_credited)
            )

        if extraction_due(repo, batch_size):
            try:
                extract_and_install(repo, provider, embedder, batch_size=batch_size)
            except ExtractionProviderError as exc:
                log.warning("extraction skipped at task %d: %s", task.index, exc)
            else:
                report.extraction_task_indices.append(task.index)
        if toggles.maintenance_on and maintenance_due(repo):
            run_maintenance(repo, verifier, embedder=embedder, prune_enabled=prune_enabled)
            report.maintenance_task_indices.append(task.index)

        series.rows.append(
            TimePoint(
                task.index,
                len(repo.patterns),
                mean_utilization_ratio(repo),
                sum(window) / len(window),
            )
        )

    report.final_repo_size = len(repo.patterns)
    report.final_utilization_ratio = mean_utilization_ratio(repo)
    report.overall_success_rate = (
        sum(report.outcomes) / len(report.outcomes) if report.outcomes else 0.0
    )
    report.final_digest = persistence.state_digest(repo)
    return ExperimentResult(series, report, repo)


def effectiveness_labels(report: RunReport) -> dict[int, str]:
    """Derived pattern labels: high-value (well matched in a success),
    misleading (utilized in failures only), low-value otherwise."""
    outcome_by_task = {f"task-{i + 1:06d}": flag for i, flag in enumerate(report.outcomes)}
    labels: dict[int, str] = {}
    seen: dict[int, list[UtilizationLogRow]] = {}
    for row in report.util_rows:
        seen.setdefault(row.pattern_id, []).append(row)
    for pid, rows in seen.items():
        if any(r.alpha > 0.5 and outcome_by_task[r.task_id] for r in rows):
            labels[pid] = "high-value"
        elif any(r.utilized and not outcome_by_task[r.task_id] for r in rows):
            labels[pid] = "misleading"
        else:
            labels[pid] = "low-value"
    return labels


# ---------------------------------------------------------------------------
# Dynamics check (the `simulate --check` bands) and sweeps


SIZE_RATIO_BAND = 3.0
UTILIZATION_OFF_BAND = 0.15
UTILIZATION_ON_BAND = 0.5


def check_dynamics(
    config: EngineConfig, *, n_tasks: int = 180, domain: SyntheticDomain | None = None
) -> tuple[bool, dict, ExperimentResult, ExperimentResult]:
    """Run the maintenance on/off pair at one seed and evaluate the bands:
    off-size >= 3x on-size, off-utilization <= 0.15, on-utilization >= 0.5."""
    on = run_experiment(config, Toggles(), n_tasks=n_tasks, domain=domain)
    off = run_experiment(config, Toggles(maintenance_on=False), n_tasks=n_tasks, domain=domain)
    details = {
        "size_on": on.report.final_repo_size,
        "size_off": off.report.final_repo_size,
        "size_ratio": (
            off.report.final_repo_size / on.report.final_repo_size
            if on.report.final_repo_size
            else float("inf")
        ),
        "utilization_on": on.report.final_utilization_ratio,
        "utilization_off": off.report.final_utilization_ratio,
    }
    ok = (
        details["size_ratio"] >= SIZE_RATIO_BAND
        and details["utilization_off"] <= UTILIZATION_OFF_BAND
        and details["utilization_on"] >= UTILIZATION_ON_BAND
    )
    return ok, details, on, off


_SWEEP_PARAMS = {
    "K": "batch_size",
    "batch_size": "batch_size",
    "alpha": "prune_fraction",
    "prune_fraction": "prune_fraction",
    "k": "k",
    "theta": "theta",
}


@dataclass(frozen=True)
class SweepRow:
    value: float
    final_repo_size: int
    final_utilization_ratio: float
    overall_success_rate: float
    final_digest: str


@dataclass
class SweepTable:
    parameter: str
    rows: list[SweepRow] = field(default_factory=list)

    CSV_HEADER = "value,final_repo_size,final_utilization_ratio,overall_success_rate,final_digest"

    def to_csv(self) -> str:
        lines = [self.CSV_HEADER]
        for row in self.rows:
            lines.append(
                f"{row.value:g},{row.final_repo_size},{row.final_utilization_ratio:.6f},"
                f"{row.overall_success_rate:.6f},{row.final_digest}"
            )
        return "\n".join(lines) + "\n"


def sweep(
    config: EngineConfig,
    parameter: str,
    values,
    *,
    n_tasks: int = 180,
    domain: SyntheticDomain | None = None,
    toggles: Toggles | None = None,
) -> SweepTable:
    """One seeded experiment per value of K, alpha, k, or theta.

    ``alpha = 0`` cannot be expressed as a config (the bound is open), so that
    row runs with the prune stage disabled instead, which is the same limit.
    """
    field_name = _SWEEP_PARAMS.get(parameter)
    if field_name is None:
        raise PatternBankError(
            f"unknown sweep parameter {parameter!r}; pick one of K, alpha, k, theta"
        )
    table = SweepTable(parameter)
    for value in values:
        prune_enabled = True
        run_config = config
        if field_name == "prune_fraction" and value == 0:
            prune_enabled = False
        elif field_name in ("k", "batch_size"):
            run_config = replace(config, **{field_name: int(value)})
        else:
            run_config = replace(config, **{field_name: float(value)})
        run_config.validate()
        result = run_experiment(
            run_config, toggles, n_tasks=n_tasks, domain=domain, prune_enabled=prune_enabled
        )
        table.rows.append(
            SweepRow(
                float(value),
                result.report.final_repo_size,
                result.report.final_utilization_ratio,
                result.report.overall_success_rate,
                result.report.final_digest,
            )
        )
    return table
