"""Command-line surface: analyze, cluster, evaluate, memory, synth.

One JSON config file drives everything (see docs/cli.md); flags override
per invocation and only secrets come from the environment. Exit codes are
fixed for CI use: 0 all good, 1 usage/config errors, 2 when some trace
analyses failed.
"""

from __future__ import annotations

import argparse
import json
import sys
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from compass.backend import BackendConfig, EmbedderConfig, embed, load_script
from compass.clustering import (
    ClusterParams,
    Issue,
    emit_issues,
    featurize_finding,
    hdbscan,
    soft_assign_noise,
)
from compass.errors import CompassError, ConfigError
from compass.evaluation import evaluate_run, load_ground_truth
from compass.memory import MemoryStore, PromotionRules, promote
from compass.pipeline import (
    AnalysisReport,
    PipelineConfig,
    PipelineParams,
    render_markdown,
    run_pipeline,
)
from compass.synth import FaultSpec, TraceShape, generate_trace, load_fault_specs
from compass.taxonomy import (
    Taxonomy,
    TaxonomyMapping,
    load_mapping,
    load_taxonomy,
    validate_mapping,
)
from compass.trace_model import build_trace_tree, parse_trace_file

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_PARTIAL = 2


@dataclass
class CompassConfig:
    """Runtime settings assembled from the config file plus defaults."""

    backend_settings: dict = field(default_factory=dict)
    embedder_settings: dict = field(default_factory=dict)
    taxonomy: Taxonomy = field(default_factory=load_taxonomy)
    mapping: TaxonomyMapping = field(default_factory=load_mapping)
    memory_enabled: bool = False
    memory_dir: Path = Path(".compass-memory")
    cluster_params: ClusterParams = field(default_factory=ClusterParams)
    pipeline_params: PipelineParams = field(default_factory=PipelineParams)

    @classmethod
    def load(cls, config_path: str | None) -> "CompassConfig":
        if config_path is None:
            return cls()
        path = Path(config_path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"could not read config {path}: {exc}") from exc
        base = path.parent

        def resolve(p: str) -> Path:
            candidate = Path(p)
            return candidate if candidate.is_absolute() else base / candidate

        def read_optional(key: str) -> bytes | None:
            rel = raw.get(key)
            if not rel:
                return None
            file = resolve(rel)
            if not file.is_file():
                raise ConfigError(f"{key} references a missing file: {file}")
            return file.read_bytes()

        backend_settings = dict(raw.get("backend") or {})
        script_path = backend_settings.pop("script_path", None)
        if script_path:
            file = resolve(script_path)
            if not file.is_file():
                raise ConfigError(f"backend.script_path references a missing file: {file}")
            backend_settings["script"] = load_script(file.read_bytes())

        memory_raw = raw.get("memory") or {}
        pipeline_raw = dict(raw.get("pipeline") or {})
        if "priority_cutoffs" in pipeline_raw:
            pipeline_raw["priority_cutoffs"] = tuple(pipeline_raw["priority_cutoffs"])
        try:
            cluster_params = ClusterParams(**(raw.get("clustering") or {}))
            pipeline_params = PipelineParams(**pipeline_raw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid config values: {exc}") from exc

        return cls(
            backend_settings=backend_settings,
            embedder_settings=dict(raw.get("embedder") or {}),
            taxonomy=load_taxonomy(read_optional("taxonomy_path")),
            mapping=load_mapping(read_optional("mapping_path")),
            memory_enabled=bool(memory_raw.get("enabled", False)),
            memory_dir=resolve(str(memory_raw.get("dir", ".compass-memory"))),
            cluster_params=cluster_params,
            pipeline_params=pipeline_params,
        )

    def build_backend(self) -> BackendConfig:
        try:
            return BackendConfig(**self.backend_settings)
        except TypeError as exc:
            raise ConfigError(f"invalid backend settings: {exc}") from exc

    def build_embedder(self) -> EmbedderConfig:
        try:
            return EmbedderConfig(**self.embedder_settings)
        except TypeError as exc:
            raise ConfigError(f"invalid embedder settings: {exc}") from exc

    def build_memory_store(self) -> MemoryStore:
        return MemoryStore(self.memory_dir, embedder=self.build_embedder())


def _sniff_format(data: bytes) -> str:
    head = data.lstrip()[:4096]
    if head.startswith(b"["):
        return "flat_json"
    if head.startswith(b"{") and b"resourceSpans" in head:
        return "otlp_json"
    raise CompassError("could not sniff trace format; pass --format explicitly")


def _safe_filename(trace_id: str) -> str:
    return "".join(c if c.isalnum() or c in "-_." else "_" for c in trace_id)


def cmd_analyze(args: argparse.Namespace) -> int:
    config = CompassConfig.load(args.config)
    validate_mapping(config.mapping, config.taxonomy)
    backend = config.build_backend()
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    memory_store = config.build_memory_store() if config.memory_enabled else None
    pipeline_config = PipelineConfig(
        backend=backend,
        taxonomy=config.taxonomy,
        params=config.pipeline_params,
        memory_store=memory_store,
        memory_enabled=config.memory_enabled,
    )

    written: set[str] = set()
    written_lock = threading.Lock()

    def analyze_one(trace_path: str) -> tuple[str, str | None]:
        try:
            data = Path(trace_path).read_bytes()
        except OSError as exc:
            return trace_path, f"unreadable: {exc}"
        try:
            fmt = args.format if args.format != "auto" else _sniff_format(data)
            spans = parse_trace_file(data, fmt)
            tree = build_trace_tree(spans)
            report = run_pipeline(tree, pipeline_config)
        except CompassError as exc:
            return trace_path, str(exc)
        report_path = out_dir / f"{_safe_filename(report.trace_id)}.report.json"
        with written_lock:
            if report_path.name in written:
                return trace_path, f"duplicate trace_id {report.trace_id}, report not overwritten"
            written.add(report_path.name)
        report_path.write_text(report.to_json(), encoding="utf-8")
        if args.markdown:
            md_path = out_dir / f"{_safe_filename(report.trace_id)}.report.md"
            md_path.write_text(render_markdown(report), encoding="utf-8")
        if report.status != "completed":
            return trace_path, f"pipeline {report.status}"
        return trace_path, None

    # memory writes feed later retrievals, so parallel runs would race
    threads = 1 if config.memory_enabled else max(1, args.threads)
    failures: list[tuple[str, str]] = []
    if threads == 1:
        results = [analyze_one(p) for p in args.traces]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(analyze_one, args.traces))
    for trace_path, error in results:
        if error is None:
            print(f"analyzed {trace_path}")
        else:
            failures.append((trace_path, error))
            print(f"error: {trace_path}: {error}", file=sys.stderr)
    return EXIT_PARTIAL if failures else EXIT_OK


def _issue_to_dict(issue: Issue) -> dict:
    return {
        "issue_id": issue.issue_id,
        "title": issue.title,
        "members": [list(m) for m in issue.members],
        "dominant_error_type": issue.dominant_error_type.path,
        "trace_count": issue.trace_count,
        "first_seen": issue.first_seen,
        "last_seen": issue.last_seen,
        "representative_evidence": issue.representative_evidence,
    }


def _triage_markdown(issues: list[Issue]) -> str:
    lines = ["# Issue triage board", ""]
    if not issues:
        lines.append("No recurring issues found.")
        return "\n".join(lines) + "\n"
    for issue in sorted(issues, key=lambda i: (-i.trace_count, i.issue_id)):
        lines += [
            f"## {issue.title}",
            "",
            f"- id: {issue.issue_id}",
            f"- dominant error type: {issue.dominant_error_type.path}",
            f"- traces affected: {issue.trace_count}",
            f"- representative evidence: {issue.representative_evidence!r}",
            f"- members: " + ", ".join(f"{t}/{f}" for t, f in issue.members),
            "",
        ]
    return "\n".join(lines)


def _load_reports(paths: list[str]) -> list[AnalysisReport]:
    files: list[Path] = []
    for raw in paths:
        p = Path(raw)
        if p.is_dir():
            files.extend(sorted(p.glob("*.report.json")))
        elif p.is_file():
            files.append(p)
        else:
            raise CompassError(f"no such report file or directory: {p}")
    reports = []
    for file in files:
        try:
            reports.append(AnalysisReport.from_dict(json.loads(file.read_text(encoding="utf-8"))))
        except (OSError, json.JSONDecodeError, KeyError, ValueError) as exc:
            raise CompassError(f"could not load report {file}: {exc}") from exc
    return reports


def cmd_cluster(args: argparse.Namespace) -> int:
    config = CompassConfig.load(args.config)
    embedder = config.build_embedder()
    reports = _load_reports(args.reports)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    findings_by_trace: dict[str, dict[str, object]] = {}
    embedding_order: list[tuple[str, str]] = []
    texts: list[str] = []
    timestamps: dict[str, float] = {}
    for report in reports:
        timestamps[report.trace_id] = report.created_at
        for finding in report.findings:
            findings_by_trace.setdefault(report.trace_id, {})[finding.finding_id] = finding
            embedding_order.append((report.trace_id, finding.finding_id))
            texts.append(featurize_finding(finding))

    issues_path = out_dir / "issues.json"
    board_path = out_dir / "issues.md"
    if not texts:
        issues_path.write_text("[]\n", encoding="utf-8")
        board_path.write_text(_triage_markdown([]), encoding="utf-8")
        print("no findings in the given reports; wrote empty issues.json")
        return EXIT_OK

    vectors = [embed(embedder, text) for text in texts]
    result = hdbscan(vectors, config.cluster_params)
    result = soft_assign_noise(vectors, result, config.cluster_params)
    issues = emit_issues(findings_by_trace, result, embedding_order, timestamps)

    issues_path.write_text(
        json.dumps([_issue_to_dict(i) for i in issues], indent=2, ensure_ascii=False) + "\n",
        encoding="utf-8",
    )
    board_path.write_text(_triage_markdown(issues), encoding="utf-8")
    noise = sum(1 for label in result.labels if label == -1)
    print(
        f"clustered {len(texts)} findings from {len(reports)} reports into "
        f"{len(issues)} issues ({noise} residual noise)"
    )
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace) -> int:
    mapping = (
        load_mapping(Path(args.mapping).read_bytes()) if args.mapping else load_mapping()
    )
    reports = _load_reports([args.report_dir])
    if not reports:
        print("error: no reports found to evaluate", file=sys.stderr)
        return EXIT_USAGE
    gt = load_ground_truth(Path(args.annotations).read_bytes(), mapping)
    metrics = evaluate_run(reports, gt, mapping)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "metrics.json").write_text(
        json.dumps(metrics.to_dict(), indent=2, ensure_ascii=False) + "\n", encoding="utf-8"
    )
    table = metrics.to_text_table()
    (out_dir / "metrics.txt").write_text(table, encoding="utf-8")
    print(table, end="")
    return EXIT_OK


def cmd_memory(args: argparse.Namespace) -> int:
    config = CompassConfig.load(args.config)
    directory = Path(args.dir) if args.dir else config.memory_dir
    store = MemoryStore(directory, embedder=config.build_embedder())
    if args.memory_cmd == "ls":
        entries = store.read_episodic()
        patterns = store.read_semantic()
        per_trace: dict[str, int] = {}
        for entry in entries:
            per_trace[entry.trace_id] = per_trace.get(entry.trace_id, 0) + 1
        print(f"episodic entries: {len(entries)} across {len(per_trace)} traces")
        for trace_id in sorted(per_trace):
            print(f"  {trace_id}: {per_trace[trace_id]} run(s)")
        print(f"semantic patterns: {len(patterns)}")
        for pattern in patterns:
            print(f"  {pattern.pattern_id} support={pattern.support_count} {pattern.error_type_path}")
    elif args.memory_cmd == "show":
        if args.trace_id:
            for entry in store.read_episodic():
                if entry.trace_id == args.trace_id:
                    print(json.dumps(entry.to_dict(), indent=2, ensure_ascii=False))
        if args.pattern_id:
            for pattern in store.read_semantic():
                if pattern.pattern_id == args.pattern_id:
                    print(json.dumps(pattern.to_dict(), indent=2, ensure_ascii=False))
    elif args.memory_cmd == "promote":
        rules = PromotionRules(min_support=args.min_support, min_confidence=args.min_confidence)
        patterns = promote(store, rules)
        print(f"semantic store now holds {len(patterns)} pattern(s)")
    elif args.memory_cmd == "purge":
        removed = 0
        for path in (store.episodic_path, store.semantic_path):
            if path.exists():
                path.unlink()
                removed += 1
            lock = Path(str(path) + ".lock")
            if lock.exists():
                lock.unlink()
        print(f"removed {removed} store file(s) from {directory}")
    return EXIT_OK


def cmd_synth(args: argparse.Namespace) -> int:
    config = CompassConfig.load(args.config)
    shape = TraceShape(depth=args.depth, fanout=args.fanout, tool_calls=args.tool_calls)
    faults: list[FaultSpec] = []
    if args.faults:
        faults = load_fault_specs(Path(args.faults).read_bytes())
    trace_bytes, annotation_bytes = generate_trace(
        args.seed, shape, faults, taxonomy=config.taxonomy, mapping=config.mapping
    )
    trace_id = json.loads(trace_bytes)[0]["trace_id"]
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    trace_path = out_dir / f"{trace_id}.json"
    annotation_path = out_dir / f"{trace_id}.annotations.json"
    trace_path.write_bytes(trace_bytes)
    annotation_path.write_bytes(annotation_bytes)
    print(f"wrote {trace_path} and {annotation_path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="compass",
        description="Analyze agent execution traces, cluster recurring errors, and score predictions.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_analyze = sub.add_parser("analyze", help="run the analysis pipeline over trace files")
    p_analyze.add_argument("traces", nargs="+", help="trace file paths")
    p_analyze.add_argument("--config", default=None, help="config JSON path")
    p_analyze.add_argument("--out", default="reports", help="report output directory")
    p_analyze.add_argument(
        "--format", choices=["auto", "flat_json", "otlp_json"], default="auto"
    )
    p_analyze.add_argument("--threads", type=int, default=4, help="parallel trace analyses")
    p_analyze.add_argument("--markdown", action="store_true", help="also write Markdown reports")
    p_analyze.set_defaults(func=cmd_analyze)

    p_cluster = sub.add_parser("cluster", help="cluster findings across report files into issues")
    p_cluster.add_argument("reports", nargs="+", help="report files or directories")
    p_cluster.add_argument("--config", default=None)
    p_cluster.add_argument("--out", default=".", help="directory for issues.json / issues.md")
    p_cluster.set_defaults(func=cmd_cluster)

    p_eval = sub.add_parser("evaluate", help="score reports against annotated ground truth")
    p_eval.add_argument("report_dir", help="directory of *.report.json files")
    p_eval.add_argument("annotations", help="annotation JSON path")
    p_eval.add_argument("--mapping", default=None, help="taxonomy mapping JSON path")
    p_eval.add_argument("--out", default=".", help="directory for metrics.json / metrics.txt")
    p_eval.set_defaults(func=cmd_evaluate)

    p_memory = sub.add_parser("memory", help="inspect or maintain the memory stores")
    p_memory.add_argument("memory_cmd", choices=["ls", "show", "promote", "purge"])
    p_memory.add_argument("--config", default=None)
    p_memory.add_argument("--dir", default=None, help="memory directory override")
    p_memory.add_argument("--trace-id", default=None)
    p_memory.add_argument("--pattern-id", default=None)
    p_memory.add_argument("--min-support", type=int, default=3)
    p_memory.add_argument("--min-confidence", type=float, default=0.7)
    p_memory.set_defaults(func=cmd_memory)

    p_synth = sub.add_parser("synth", help="generate a synthetic trace with injected faults")
    p_synth.add_argument("--seed", type=int, required=True)
    p_synth.add_argument("--depth", type=int, default=3)
    p_synth.add_argument("--fanout", type=int, default=2)
    p_synth.add_argument("--tool-calls", type=int, default=2)
    p_synth.add_argument("--faults", default=None, help="faults JSON path")
    p_synth.add_argument("--config", default=None)
    p_synth.add_argument("--out", required=True, help="output directory")
    p_synth.set_defaults(func=cmd_synth)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CompassError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def entrypoint() -> None:  # console script target
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
