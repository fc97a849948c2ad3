"""Command-line entry point.

Exit codes: 0 success, 2 invalid configuration, 3 acceptance-band violation
in `simulate --check`, 1 anything else. Flags and output formats are pinned
in docs/CLI.md.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys

from .core import (
    EngineConfig,
    InvalidConfigError,
    PatternBankError,
    new_repository,
    seed_patterns,
)
from .embedding import default_embedder
from .extraction import extract_and_install, extraction_due
from .harness import (
    ScriptedExtractionProvider,
    Toggles,
    check_dynamics,
    default_domain,
    generate_tasks,
    mock_agent_step,
    run_experiment,
    sweep,
)
from .lifecycle import default_verifier, maintenance_due, run_maintenance
from .persistence import (
    load,
    pattern_from_record,
    replay,
    load_audit_log,
    save,
    save_audit_log,
    state_digest,
)
from .retrieval import retrieve
from .tracking import begin_task, finish_task

_CONFIG_FLAGS = [  # (flag, config field, type)
    ("--k", "k", int),
    ("--theta", "theta", float),
    ("--mmr-lambda", "mmr_lambda", float),
    ("--batch-size", "batch_size", int),
    ("--prune-fraction", "prune_fraction", float),
    ("--merge-threshold", "merge_threshold", float),
    ("--epsilon", "epsilon", float),
    ("--match-threshold", "match_threshold", float),
    ("--embedding-dim", "embedding_dim", int),
    ("--rrf-constant", "rrf_constant", float),
    ("--bm25-k1", "bm25_k1", float),
    ("--bm25-b", "bm25_b", float),
    ("--seed", "seed", int),
    ("--query-count", "query_count", int),
]


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    for flag, dest, kind in _CONFIG_FLAGS:
        parser.add_argument(flag, dest=dest, type=kind, default=None)
    parser.add_argument("--no-hybrid", action="store_true", help="disable BM25+RRF fusion")


def _config_from_args(args: argparse.Namespace) -> EngineConfig:
    overrides = {
        dest: getattr(args, dest)
        for _, dest, _ in _CONFIG_FLAGS
        if getattr(args, dest, None) is not None
    }
    if getattr(args, "no_hybrid", False):
        overrides["use_hybrid"] = False
    config = dataclasses.replace(EngineConfig(), **overrides)
    config.validate()
    return config


def _parse_toggles(pairs: list[str]) -> Toggles:
    toggles = {"maintenance": True, "batch_extraction": True, "subagents": True}
    for pair in pairs:
        if "=" not in pair:
            raise PatternBankError(f"bad --toggle {pair!r}, expected name=on|off")
        name, _, value = pair.partition("=")
        if name not in toggles or value not in ("on", "off"):
            raise PatternBankError(f"bad --toggle {pair!r}, expected name=on|off")
        toggles[name] = value == "on"
    return Toggles(
        maintenance_on=toggles["maintenance"],
        batch_extraction_on=toggles["batch_extraction"],
        subagents_on=toggles["subagents"],
    )


def _write_or_print(text: str, path: str | None) -> None:
    if path:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


# ---------------------------------------------------------------------------
# Subcommands


def _cmd_init(args) -> int:
    config = _config_from_args(args)
    repo = new_repository(config)
    byte_count = save(repo, args.path)
    print(f"initialized repository at {args.path} ({byte_count} bytes), digest {state_digest(repo)}")
    return 0


def _cmd_seed(args) -> int:
    repo = load(args.path)
    with open(args.patterns, "r", encoding="utf-8") as fh:
        records = json.load(fh)
    patterns = [pattern_from_record(rec) for rec in records]
    count = seed_patterns(repo, patterns)
    save(repo, args.path)
    print(f"seeded {count} patterns, repository now {len(repo.patterns)}")
    return 0


def _cmd_run(args) -> int:
    repo = load(args.path)
    domain = default_domain()
    provider = ScriptedExtractionProvider(domain, repo.config.seed)
    embedder = default_embedder(repo.config)
    verifier = default_verifier(repo)
    tasks = generate_tasks(domain, args.tasks, args.task_seed)
    successes = 0
    for task in tasks:
        import random

        ctx = begin_task(repo, task.description, task_id=f"task-{repo.tasks_completed + 1:06d}")
        step_rng = random.Random(f"{args.task_seed}:steps:{task.index}")
        outcome_rng = random.Random(f"{args.task_seed}:outcome:{task.index}")
        trajectory = mock_agent_step(domain, task, ctx, repo.patterns, step_rng, outcome_rng)
        finish_task(repo, ctx, trajectory)
        successes += trajectory.outcome
        if extraction_due(repo):
            extract_and_install(repo, provider, embedder)
        if maintenance_due(repo):
            run_maintenance(repo, verifier, embedder=embedder)
    save(repo, args.path)
    print(
        f"ran {args.tasks} tasks ({successes} succeeded); repository holds "
        f"{len(repo.patterns)} patterns, digest {state_digest(repo)}"
    )
    return 0


def _cmd_maintain(args) -> int:
    repo = load(args.path)
    report = run_maintenance(repo, default_verifier(repo), force=args.force)
    save(repo, args.path)
    if args.report:
        print(f"size: {report.size_before} -> {report.size_after}")
        print(f"pruned: {report.pruned_ids}")
        for merge in report.merges:
            print(f"merged: {list(merge.absorbed_ids)} -> {merge.new_id}")
        for pid, score in report.scored:
            print(f"score: {pid} {score:.6f}")
    else:
        print(f"maintenance done, size {report.size_before} -> {report.size_after}")
    return 0


def _cmd_inspect(args) -> int:
    repo = load(args.path)
    hits = retrieve(repo, args.query, k=args.k)
    if not hits:
        print("no patterns above threshold")
        return 0
    for hit in hits:
        pattern = repo.patterns[hit.pattern_id]
        print(
            f"{hit.rank:3d}. id={hit.pattern_id} score={hit.score:.4f} "
            f"kind={pattern.kind.value} {pattern.metadata.description}"
        )
    return 0


def _cmd_simulate(args) -> int:
    config = _config_from_args(args)
    if args.check:
        ok, details, on, off = check_dynamics(config, n_tasks=args.tasks)
        print(
            f"size on/off: {details['size_on']}/{details['size_off']} "
            f"(ratio {details['size_ratio']:.2f}, band >= 3.0)"
        )
        print(f"utilization on: {details['utilization_on']:.3f} (band >= 0.5)")
        print(f"utilization off: {details['utilization_off']:.3f} (band <= 0.15)")
        if args.csv:
            _write_or_print(on.time_series.to_csv(), args.csv)
        if args.audit:
            save_audit_log(on.repo, args.audit)
        print("dynamics check: " + ("PASS" if ok else "FAIL"))
        return 0 if ok else 3
    toggles = _parse_toggles(args.toggle or [])
    result = run_experiment(config, toggles, n_tasks=args.tasks)
    if args.csv:
        _write_or_print(result.time_series.to_csv(), args.csv)
    if args.util_csv:
        _write_or_print(result.report.util_rows_csv(), args.util_csv)
    if args.audit:
        save_audit_log(result.repo, args.audit)
    report = result.report
    print(
        f"tasks={report.n_tasks} final_size={report.final_repo_size} "
        f"utilization={report.final_utilization_ratio:.3f} "
        f"success={report.overall_success_rate:.3f} digest={report.final_digest}"
    )
    print(f"maintenance at: {report.maintenance_task_indices}")
    print(f"extraction at: {report.extraction_task_indices}")
    return 0


def _cmd_sweep(args) -> int:
    config = _config_from_args(args)
    values = [float(v) for v in args.values.split(",")] if args.values else []
    table = sweep(config, args.param, values, n_tasks=args.tasks)
    _write_or_print(table.to_csv(), args.csv)
    return 0


def _cmd_report(args) -> int:
    repo = load(args.path)
    if args.csv:
        lines = ["pattern_id,kind,retrieval_count,utilization_count,success_count,description"]
        for pattern in repo.sorted_patterns():
            meta = pattern.metadata
            description = meta.description.replace(",", " ").replace("\n", " ")
            lines.append(
                f"{pattern.id},{pattern.kind.value},{meta.retrieval_count},"
                f"{meta.utilization_count},{meta.success_count},{description}"
            )
        _write_or_print("\n".join(lines) + "\n", args.out)
        return 0
    skills = sum(1 for p in repo.patterns.values() if p.kind.value == "skill")
    print(f"patterns: {len(repo.patterns)} ({skills} skills, {len(repo.patterns) - skills} subagents)")
    print(f"tasks completed: {repo.tasks_completed}")
    print(f"next maintenance threshold: {repo.next_maintenance_threshold}")
    print(f"state digest: {state_digest(repo)}")
    return 0


def _cmd_replay(args) -> int:
    events = load_audit_log(args.audit)
    digest = replay(events)
    print(f"replayed {len(events)} events, final digest {digest}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="patternbank", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init", help="create an empty repository file")
    p.add_argument("--path", required=True)
    _add_config_flags(p)
    p.set_defaults(func=_cmd_init)

    p = sub.add_parser("seed", help="insert patterns from a JSON file")
    p.add_argument("--path", required=True)
    p.add_argument("--patterns", required=True)
    p.set_defaults(func=_cmd_seed)

    p = sub.add_parser("run", help="run synthetic tasks against a repository file")
    p.add_argument("--path", required=True)
    p.add_argument("--tasks", type=int, default=10)
    p.add_argument("--task-seed", type=int, default=0)
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("maintain", help="run a maintenance event")
    p.add_argument("--path", required=True)
    p.add_argument("--force", action="store_true")
    p.add_argument("--report", action="store_true")
    p.set_defaults(func=_cmd_maintain)

    p = sub.add_parser("inspect", help="query the repository")
    p.add_argument("--path", required=True)
    p.add_argument("--query", required=True)
    p.add_argument("--k", type=int, default=None)
    p.set_defaults(func=_cmd_inspect)

    p = sub.add_parser("simulate", help="run the deterministic simulation")
    p.add_argument("--tasks", type=int, default=180)
    p.add_argument("--toggle", action="append", metavar="NAME=on|off")
    p.add_argument("--csv", default=None)
    p.add_argument("--util-csv", default=None)
    p.add_argument("--audit", default=None)
    p.add_argument("--check", action="store_true", help="check dynamics bands; exit 3 on violation")
    _add_config_flags(p)
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("sweep", help="sweep one hyperparameter")
    p.add_argument("--param", required=True, choices=["K", "alpha", "k", "theta"])
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--tasks", type=int, default=180)
    p.add_argument("--csv", default=None)
    _add_config_flags(p)
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("report", help="summarize a repository file")
    p.add_argument("--path", required=True)
    p.add_argument("--csv", action="store_true")
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_report)

    p = sub.add_parser("replay", help="verify an audit log end to end")
    p.add_argument("--audit", required=True)
    p.set_defaults(func=_cmd_replay)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except InvalidConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except PatternBankError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
