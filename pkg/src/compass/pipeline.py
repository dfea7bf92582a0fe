"""Four-stage trace analysis pipeline.

Each trace is rendered as an outline and pushed through four progressively
abstract stages: identify discrete errors, group them into themes, score
trace quality on five fixed dimensions, and synthesize insights plus fix
recommendations. Every stage runs a two-phase plan-and-execute cycle: one
chat call elicits an explicit strategy, a second executes that strategy as a
directive. Stage outputs feed the next stage; retrieved memory context, when
present, is prepended to prompts.

Model output is validated against the stage's expected JSON shape; one
repair pass (re-prompting with the validation error) is attempted before the
stage fails. Individual invalid items (bad outline numbers, non-verbatim
evidence, unknown finding ids) are dropped with a warning instead of failing
the stage. A failed stage still yields a report carrying all partial results
and a failed_at_<stage> status.
"""

from __future__ import annotations

import json
import logging
import re
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

from compass.backend import (
    FINISH_COMPLETE,
    BackendConfig,
    ChatRequest,
    ChatResult,
    chat_complete,
)
from compass.errors import (
    CompassError,
    MemoryWriteError,
    ScriptKeyError,
    StageFailureError,
    UnknownErrorTypeError,
)
from compass.memory import (
    DEFAULT_CONTEXT_BUDGET,
    DEFAULT_RETRIEVAL_K,
    MemoryContext,
    MemoryStore,
    record_episodic,
    retrieve_context,
)
from compass.taxonomy import ErrorTypeId, Taxonomy, resolve_error_type
from compass.trace_model import OutlineDocument, TraceTree, serialize_outline

logger = logging.getLogger(__name__)

STAGES = ("identify", "theme", "score", "synthesize")
SCORE_DIMENSIONS = ("factual_grounding", "safety", "plan_execution", "tool_use", "efficiency")
SEVERITIES = ("low", "medium", "high", "critical")

PHASE_PLAN = "plan"
PHASE_EXECUTE = "execute"

_STAGE_GOALS = {
    "identify": "scan every span for discrete failures and classify each one against the error taxonomy",
    "theme": "group the identified findings into coherent themes that expose causal chains or systemic issues",
    "score": "rate the overall trace quality on the five fixed dimensions",
    "synthesize": "distill everything into key insights, fix recommendations, and a closing summary",
}

_EXECUTE_SCHEMA_TAG = {
    "identify": "findings",
    "theme": "themes",
    "score": "scores",
    "synthesize": "summary",
}

SYSTEM_TEXT = (
    "You are a meticulous reliability engineer reviewing the execution trace "
    "of an AI agent. Always respond with a single JSON object and nothing else."
)


@dataclass(frozen=True)
class StagePlan:
    stage: str
    strategy_text: str
    focus_outline_numbers: tuple[str, ...] = ()


@dataclass(frozen=True)
class ErrorFinding:
    finding_id: str
    span_id: str
    span_name: str
    outline_number: str
    error_type: ErrorTypeId
    severity: str
    evidence: str
    explanation: str
    confidence: float

    def to_dict(self) -> dict:
        return {
            "finding_id": self.finding_id,
            "span_id": self.span_id,
            "span_name": self.span_name,
            "outline_number": self.outline_number,
            "error_type": self.error_type.path,
            "severity": self.severity,
            "evidence": self.evidence,
            "explanation": self.explanation,
            "confidence": self.confidence,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "ErrorFinding":
        return cls(
            finding_id=str(raw["finding_id"]),
            span_id=str(raw["span_id"]),
            span_name=str(raw.get("span_name", "")),
            outline_number=str(raw.get("outline_number", "")),
            error_type=ErrorTypeId.from_path(str(raw["error_type"])),
            severity=str(raw["severity"]),
            evidence=str(raw.get("evidence", "")),
            explanation=str(raw.get("explanation", "")),
            confidence=float(raw.get("confidence", 0.0)),
        )


@dataclass(frozen=True)
class ThemeGroup:
    theme_id: str
    label: str
    member_finding_ids: tuple[str, ...]
    causal_note: str

    def to_dict(self) -> dict:
        return {
            "theme_id": self.theme_id,
            "label": self.label,
            "member_finding_ids": list(self.member_finding_ids),
            "causal_note": self.causal_note,
        }


@dataclass(frozen=True)
class QualityScorecard:
    dimension_scores: dict[str, float]
    rationales: dict[str, str]

    def to_dict(self) -> dict:
        return {
            "dimension_scores": {d: self.dimension_scores[d] for d in SCORE_DIMENSIONS},
            "rationales": {d: self.rationales.get(d, "") for d in SCORE_DIMENSIONS},
        }


@dataclass(frozen=True)
class PipelineParams:
    truncation_limit: int = 2000
    temperature: float = 0.2
    max_output_tokens: int = 2048
    critical_penalty: float = 0.15
    high_penalty: float = 0.05
    penalty_floor: float = 0.2
    priority_cutoffs: tuple[float, float, float] = (0.4, 0.6, 0.8)
    memory_k: int = DEFAULT_RETRIEVAL_K
    memory_budget: int = DEFAULT_CONTEXT_BUDGET

    def __post_init__(self):
        if self.truncation_limit < 64:
            raise ValueError("truncation_limit must be >= 64")
        if not 0.0 <= self.temperature <= 1.0:
            raise ValueError("temperature must be in [0, 1]")
        if self.max_output_tokens < 1:
            raise ValueError("max_output_tokens must be >= 1")
        if self.critical_penalty < 0 or self.high_penalty < 0:
            raise ValueError("severity penalties must be non-negative")
        if not 0.0 < self.penalty_floor <= 1.0:
            raise ValueError("penalty_floor must be in (0, 1]")
        cuts = self.priority_cutoffs
        if len(cuts) != 3 or list(cuts) != sorted(cuts) or cuts[0] < 0 or cuts[-1] > 1:
            raise ValueError("priority_cutoffs must be three ascending values in [0, 1]")
        if self.memory_k < 0 or self.memory_budget < 0:
            raise ValueError("memory_k and memory_budget must be non-negative")


@dataclass(frozen=True)
class PipelineMetadata:
    backend_id: str
    created_at: float
    stage_timestamps: dict[str, dict[str, float]]
    memory_context_used: str
    warnings: tuple[str, ...]

    def to_dict(self) -> dict:
        return {
            "backend_id": self.backend_id,
            "created_at": self.created_at,
            "stage_timestamps": self.stage_timestamps,
            "memory_context_used": self.memory_context_used,
            "warnings": list(self.warnings),
        }


@dataclass(frozen=True)
class AnalysisReport:
    trace_id: str
    status: str
    findings: tuple[ErrorFinding, ...]
    themes: tuple[ThemeGroup, ...]
    scorecard: QualityScorecard | None
    aggregate_score: float | None
    priority: str | None
    key_insights: tuple[str, ...]
    fix_recommendations: tuple[str, ...]
    summary: str
    metadata: PipelineMetadata

    @property
    def created_at(self) -> float:
        return self.metadata.created_at

    def to_dict(self) -> dict:
        return {
            "trace_id": self.trace_id,
            "status": self.status,
            "findings": [f.to_dict() for f in self.findings],
            "themes": [t.to_dict() for t in self.themes],
            "scorecard": self.scorecard.to_dict() if self.scorecard else None,
            "aggregate_score": self.aggregate_score,
            "priority": self.priority,
            "key_insights": list(self.key_insights),
            "fix_recommendations": list(self.fix_recommendations),
            "summary": self.summary,
            "pipeline_metadata": self.metadata.to_dict(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, ensure_ascii=False) + "\n"

    @classmethod
    def from_dict(cls, raw: dict) -> "AnalysisReport":
        scorecard = None
        if raw.get("scorecard"):
            scorecard = QualityScorecard(
                dimension_scores={
                    k: float(v) for k, v in raw["scorecard"]["dimension_scores"].items()
                },
                rationales=dict(raw["scorecard"].get("rationales") or {}),
            )
        meta = raw.get("pipeline_metadata") or {}
        return cls(
            trace_id=str(raw["trace_id"]),
            status=str(raw.get("status", "completed")),
            findings=tuple(ErrorFinding.from_dict(f) for f in raw.get("findings") or []),
            themes=tuple(
                ThemeGroup(
                    theme_id=str(t["theme_id"]),
                    label=str(t.get("label", "")),
                    member_finding_ids=tuple(t.get("member_finding_ids") or []),
                    causal_note=str(t.get("causal_note", "")),
                )
                for t in raw.get("themes") or []
            ),
            scorecard=scorecard,
            aggregate_score=raw.get("aggregate_score"),
            priority=raw.get("priority"),
            key_insights=tuple(raw.get("key_insights") or []),
            fix_recommendations=tuple(raw.get("fix_recommendations") or []),
            summary=str(raw.get("summary", "")),
            metadata=PipelineMetadata(
                backend_id=str(meta.get("backend_id", "")),
                created_at=float(meta.get("created_at", 0.0)),
                stage_timestamps=dict(meta.get("stage_timestamps") or {}),
                memory_context_used=str(meta.get("memory_context_used", "")),
                warnings=tuple(meta.get("warnings") or []),
            ),
        )


class LogicalClock:
    """Monotone counter used instead of wall time for deterministic runs."""

    def __init__(self):
        self._now = 0.0

    def __call__(self) -> float:
        now = self._now
        self._now += 1.0
        return now


@dataclass
class PipelineConfig:
    backend: BackendConfig
    taxonomy: Taxonomy
    params: PipelineParams = field(default_factory=PipelineParams)
    memory_store: MemoryStore | None = None
    memory_enabled: bool = False
    clock_factory: Callable[[], Callable[[], float]] | None = None

    def make_clock(self) -> Callable[[], float]:
        if self.clock_factory is not None:
            return self.clock_factory()
        if self.backend.mode == "scripted":
            return LogicalClock()
        return time.time


class _SchemaViolation(Exception):
    """Model output does not match the stage schema; triggers one repair."""


_FENCE_RE = re.compile(r"```(?:json)?\s*(.*?)```", re.DOTALL)


def extract_json(text: str) -> object:
    """Pull the JSON payload out of a model response, tolerating code fences
    and leading/trailing prose."""
    candidate = text.strip()
    fenced = _FENCE_RE.search(candidate)
    if fenced:
        candidate = fenced.group(1).strip()
    try:
        return json.loads(candidate)
    except json.JSONDecodeError:
        pass
    for opener, closer in (("{", "}"), ("[", "]")):
        start = candidate.find(opener)
        end = candidate.rfind(closer)
        if start != -1 and end > start:
            try:
                return json.loads(candidate[start : end + 1])
            except json.JSONDecodeError:
                continue
    raise _SchemaViolation("response is not valid JSON")


def _memory_section(memory_context: MemoryContext | None) -> str:
    if memory_context is None or not memory_context.rendered_text:
        return ""
    return f"Prior knowledge from earlier analyses:\n{memory_context.rendered_text}\n\n"


def _prior_section(prior_outputs: dict) -> str:
    parts = []
    if prior_outputs.get("findings"):
        parts.append("Findings so far:\n" + json.dumps(prior_outputs["findings"], ensure_ascii=False))
    if prior_outputs.get("themes"):
        parts.append("Themes so far:\n" + json.dumps(prior_outputs["themes"], ensure_ascii=False))
    if prior_outputs.get("scorecard"):
        parts.append("Scorecard:\n" + json.dumps(prior_outputs["scorecard"], ensure_ascii=False))
    return ("\n\n".join(parts) + "\n\n") if parts else ""


_STAGE_ASKS = {
    "identify": (
        'Report every discrete error you can ground in the outline. Respond with JSON:\n'
        '{"findings": [{"outline_number": "<number>", "error_type": "<taxonomy leaf path>", '
        '"severity": "low|medium|high|critical", "evidence": "<verbatim quote from that span\'s '
        'outline block>", "explanation": "<why this is an error>", "confidence": 0.0}]}'
    ),
    "theme": (
        'Group the findings into themes. Respond with JSON:\n'
        '{"themes": [{"label": "<short name>", "member_finding_ids": ["F001"], '
        '"causal_note": "<how these findings relate>"}]}\n'
        "A finding may appear in at most one theme; leave unrelated findings out."
    ),
    "score": (
        "Score the trace on each dimension in [0, 1]. Respond with JSON:\n"
        '{"scores": {"factual_grounding": 0.0, "safety": 0.0, "plan_execution": 0.0, '
        '"tool_use": 0.0, "efficiency": 0.0}, "rationales": {"factual_grounding": "...", '
        '"safety": "...", "plan_execution": "...", "tool_use": "...", "efficiency": "..."}}'
    ),
    "synthesize": (
        "Write the final synthesis. Respond with JSON:\n"
        '{"summary": "<2-3 sentence assessment>", "key_insights": ["..."], '
        '"fix_recommendations": ["<concrete change the developers should make>"]}'
    ),
}


def _plan_prompt(
    stage: str,
    outline: OutlineDocument,
    prior_outputs: dict,
    memory_context: MemoryContext | None,
) -> str:
    return (
        f"{_memory_section(memory_context)}"
        f"You are planning the '{stage}' stage of a trace review. "
        f"The goal of this stage: {_STAGE_GOALS[stage]}.\n\n"
        f"{_prior_section(prior_outputs)}"
        f"Trace outline:\n{outline.text}\n"
        'State an explicit strategy before doing the work. Respond with JSON:\n'
        '{"strategy": "<step-by-step approach for this stage>", '
        '"focus": ["<outline numbers that deserve the closest look>"]}'
    )


def _execute_prompt(
    stage: str,
    plan: StagePlan,
    outline: OutlineDocument,
    prior_outputs: dict,
    memory_context: MemoryContext | None,
    taxonomy: Taxonomy,
) -> str:
    focus = ""
    if plan.focus_outline_numbers:
        focus = "Focus especially on outline numbers: " + ", ".join(plan.focus_outline_numbers) + "\n\n"
    taxonomy_block = ""
    if stage == "identify":
        taxonomy_block = "Error taxonomy leaves:\n" + "\n".join(taxonomy.leaf_paths()) + "\n\n"
    return (
        f"{_memory_section(memory_context)}"
        f"Execute the '{stage}' stage following this directive exactly:\n"
        f"{plan.strategy_text}\n\n"
        f"{focus}"
        f"{taxonomy_block}"
        f"{_prior_section(prior_outputs)}"
        f"Trace outline:\n{outline.text}\n"
        f"{_STAGE_ASKS[stage]}"
    )


def _validate_plan(payload: object, stage: str, outline: OutlineDocument, warnings: list[str]) -> StagePlan:
    if not isinstance(payload, dict):
        raise _SchemaViolation("plan must be a JSON object")
    strategy = payload.get("strategy")
    if not isinstance(strategy, str) or not strategy.strip():
        raise _SchemaViolation("plan needs a non-empty 'strategy' string")
    focus_raw = payload.get("focus", [])
    if not isinstance(focus_raw, list):
        raise _SchemaViolation("'focus' must be a list of outline numbers")
    focus: list[str] = []
    for item in focus_raw:
        number = str(item)
        if number in outline.index:
            focus.append(number)
        else:
            warnings.append(f"plan[{stage}]: dropped unknown outline number {number!r}")
    return StagePlan(stage=stage, strategy_text=strategy, focus_outline_numbers=tuple(focus))


def _validate_findings(
    payload: object,
    outline: OutlineDocument,
    tree: TraceTree,
    taxonomy: Taxonomy,
    warnings: list[str],
) -> list[ErrorFinding]:
    if not isinstance(payload, dict) or not isinstance(payload.get("findings"), list):
        raise _SchemaViolation("expected an object with a 'findings' list")
    findings: list[ErrorFinding] = []
    for i, raw in enumerate(payload["findings"]):
        if not isinstance(raw, dict):
            warnings.append(f"findings[{i}]: dropped non-object entry")
            continue
        number = str(raw.get("outline_number", ""))
        span_id = outline.index.get(number)
        if span_id is None:
            warnings.append(f"findings[{i}]: dropped, unknown outline number {number!r}")
            continue
        try:
            error_type = resolve_error_type(taxonomy, str(raw.get("error_type", "")))
        except UnknownErrorTypeError as exc:
            warnings.append(f"findings[{i}]: dropped, {exc}")
            continue
        severity = str(raw.get("severity", "")).lower()
        if severity not in SEVERITIES:
            warnings.append(f"findings[{i}]: dropped, invalid severity {raw.get('severity')!r}")
            continue
        evidence = str(raw.get("evidence", ""))
        if not evidence or evidence not in outline.span_text(span_id):
            warnings.append(
                f"findings[{i}]: dropped, evidence is not a verbatim quote from span {span_id}"
            )
            continue
        try:
            confidence = float(raw.get("confidence", 0.0))
        except (TypeError, ValueError):
            warnings.append(f"findings[{i}]: dropped, confidence is not a number")
            continue
        if not 0.0 <= confidence <= 1.0:
            clamped = min(1.0, max(0.0, confidence))
            warnings.append(f"findings[{i}]: confidence {confidence} clamped to {clamped}")
            confidence = clamped
        findings.append(
            ErrorFinding(
                finding_id=f"F{len(findings) + 1:03d}",
                span_id=span_id,
                span_name=tree.nodes[span_id].record.name,
                outline_number=number,
                error_type=error_type,
                severity=severity,
                evidence=evidence,
                explanation=str(raw.get("explanation", "")),
                confidence=confidence,
            )
        )
    return findings


def _validate_themes(
    payload: object, findings: Sequence[ErrorFinding], warnings: list[str]
) -> list[ThemeGroup]:
    if not isinstance(payload, dict) or not isinstance(payload.get("themes"), list):
        raise _SchemaViolation("expected an object with a 'themes' list")
    known = {f.finding_id for f in findings}
    claimed: set[str] = set()
    themes: list[ThemeGroup] = []
    for i, raw in enumerate(payload["themes"]):
        if not isinstance(raw, dict):
            warnings.append(f"themes[{i}]: dropped non-object entry")
            continue
        label = str(raw.get("label", "")).strip()
        if not label:
            warnings.append(f"themes[{i}]: dropped, empty label")
            continue
        members: list[str] = []
        for fid in raw.get("member_finding_ids") or []:
            fid = str(fid)
            if fid not in known:
                warnings.append(f"themes[{i}]: dropped unknown finding id {fid!r}")
            elif fid in claimed:
                warnings.append(f"themes[{i}]: finding {fid} already themed, ignored here")
            else:
                members.append(fid)
        if not members:
            warnings.append(f"themes[{i}]: dropped, no valid members")
            continue
        claimed.update(members)
        themes.append(
            ThemeGroup(
                theme_id=f"T{len(themes) + 1:03d}",
                label=label,
                member_finding_ids=tuple(members),
                causal_note=str(raw.get("causal_note", "")),
            )
        )
    return themes


def _validate_scores(payload: object, warnings: list[str]) -> QualityScorecard:
    if not isinstance(payload, dict) or not isinstance(payload.get("scores"), dict):
        raise _SchemaViolation("expected an object with a 'scores' object")
    raw_scores = payload["scores"]
    scores: dict[str, float] = {}
    for dim in SCORE_DIMENSIONS:
        if dim not in raw_scores:
            raise _SchemaViolation(f"missing score dimension '{dim}'")
        try:
            value = float(raw_scores[dim])
        except (TypeError, ValueError):
            raise _SchemaViolation(f"score for '{dim}' is not a number") from None
        if not 0.0 <= value <= 1.0:
            clamped = min(1.0, max(0.0, value))
            warnings.append(f"score[{dim}]: {value} clamped to {clamped}")
            value = clamped
        scores[dim] = value
    extra = sorted(set(raw_scores) - set(SCORE_DIMENSIONS))
    if extra:
        warnings.append(f"score: ignored unknown dimensions {', '.join(extra)}")
    rationales_raw = payload.get("rationales") or {}
    rationales = {
        dim: str(rationales_raw.get(dim, "")) for dim in SCORE_DIMENSIONS
    }
    return QualityScorecard(dimension_scores=scores, rationales=rationales)


def _validate_summary(payload: object, warnings: list[str]) -> dict:
    if not isinstance(payload, dict):
        raise _SchemaViolation("expected a JSON object")
    for key in ("key_insights", "fix_recommendations"):
        if not isinstance(payload.get(key), list):
            raise _SchemaViolation(f"'{key}' must be a list of strings")
    return {
        "summary": str(payload.get("summary", "")),
        "key_insights": tuple(str(v) for v in payload["key_insights"]),
        "fix_recommendations": tuple(str(v) for v in payload["fix_recommendations"]),
    }


def _structured_call(
    backend: BackendConfig,
    *,
    stage: str,
    phase: str,
    trace_id: str,
    prompt: str,
    schema_tag: str,
    params: PipelineParams,
    validator: Callable[[object], object],
):
    """One chat call plus a single repair pass on schema violations."""

    def call(phase_name: str, text: str) -> ChatResult:
        request = ChatRequest(
            system_text=SYSTEM_TEXT,
            user_text=text,
            response_schema_tag=schema_tag,
            temperature=params.temperature,
            max_output_tokens=params.max_output_tokens,
            stage=stage,
            phase=phase_name,
            trace_id=trace_id,
        )
        try:
            result = chat_complete(backend, request)
        except ScriptKeyError as exc:
            raise StageFailureError(stage, phase_name, str(exc)) from exc
        if result.finish_reason != FINISH_COMPLETE:
            raise StageFailureError(stage, phase_name, f"backend returned {result.finish_reason}")
        return result

    result = call(phase, prompt)
    try:
        return validator(extract_json(result.text))
    except _SchemaViolation as first_error:
        repair_prompt = (
            f"{prompt}\n\nYour previous response was invalid: {first_error}. "
            "Return only the corrected JSON."
        )
        repair = call(f"{phase}_repair", repair_prompt)
        try:
            return validator(extract_json(repair.text))
        except _SchemaViolation as second_error:
            raise StageFailureError(
                stage, phase, f"schema validation failed after repair: {second_error}"
            ) from second_error


def plan_stage(
    stage: str,
    outline: OutlineDocument,
    prior_outputs: dict,
    memory_context: MemoryContext | None,
    *,
    backend: BackendConfig,
    params: PipelineParams,
    trace_id: str,
    warnings: list[str],
) -> StagePlan:
    """Planning phase: elicit an explicit strategy for one stage."""
    prompt = _plan_prompt(stage, outline, prior_outputs, memory_context)
    return _structured_call(
        backend,
        stage=stage,
        phase=PHASE_PLAN,
        trace_id=trace_id,
        prompt=prompt,
        schema_tag="plan",
        params=params,
        validator=lambda payload: _validate_plan(payload, stage, outline, warnings),
    )


def execute_stage(
    stage: str,
    plan: StagePlan,
    outline: OutlineDocument,
    prior_outputs: dict,
    memory_context: MemoryContext | None,
    *,
    backend: BackendConfig,
    params: PipelineParams,
    taxonomy: Taxonomy,
    tree: TraceTree,
    warnings: list[str],
):
    """Execution phase: feed the strategy back as a directive and validate
    the stage-specific output."""
    if plan.stage != stage:
        raise ValueError(f"plan built for stage {plan.stage!r}, not {stage!r}")
    prompt = _execute_prompt(stage, plan, outline, prior_outputs, memory_context, taxonomy)
    validators = {
        "identify": lambda p: _validate_findings(p, outline, tree, taxonomy, warnings),
        "theme": lambda p: _validate_themes(p, prior_outputs.get("_findings", ()), warnings),
        "score": lambda p: _validate_scores(p, warnings),
        "synthesize": lambda p: _validate_summary(p, warnings),
    }
    return _structured_call(
        backend,
        stage=stage,
        phase=PHASE_EXECUTE,
        trace_id=tree.trace_id,
        prompt=prompt,
        schema_tag=_EXECUTE_SCHEMA_TAG[stage],
        params=params,
        validator=validators[stage],
    )


def aggregate_and_prioritize(
    scorecard: QualityScorecard,
    findings: Sequence[ErrorFinding],
    params: PipelineParams = PipelineParams(),
) -> tuple[float, str]:
    """Collapse the scorecard into one score and an intervention priority.

    aggregate = mean(dimension scores) * max(floor, 1 - 0.15*n_critical -
    0.05*n_high); priority buckets by the configured cutoffs, with any
    critical finding escalating the lowest bucket to critical.
    """
    mean = sum(scorecard.dimension_scores[d] for d in SCORE_DIMENSIONS) / len(SCORE_DIMENSIONS)
    n_critical = sum(1 for f in findings if f.severity == "critical")
    n_high = sum(1 for f in findings if f.severity == "high")
    penalty = max(
        params.penalty_floor,
        1.0 - params.critical_penalty * n_critical - params.high_penalty * n_high,
    )
    aggregate = mean * penalty
    critical_cut, high_cut, medium_cut = params.priority_cutoffs
    if aggregate < critical_cut:
        priority = "critical" if n_critical else "high"
    elif aggregate < high_cut:
        priority = "high"
    elif aggregate < medium_cut:
        priority = "medium"
    else:
        priority = "low"
    return aggregate, priority


def _memory_query(tree: TraceTree) -> str:
    roots = ", ".join(r.record.name for r in tree.roots)
    failing = sorted(
        {n.record.name for n in tree.nodes.values() if n.record.status.value == "error"}
    )
    query = f"trace roots: {roots}"
    if failing:
        query += "; failing spans: " + ", ".join(failing)
    return query


def run_pipeline(tree: TraceTree, config: PipelineConfig) -> AnalysisReport:
    """Analyze one trace end to end and return its report.

    Stage order is identify -> theme -> score -> synthesize; a stage failure
    stops the pipeline but preserves everything produced so far under a
    failed_at_<stage> status. With memory enabled, context is retrieved
    before stage one and an episodic entry is recorded afterwards.
    """
    clock = config.make_clock()
    created_at = clock()
    warnings: list[str] = []
    params = config.params
    outline = serialize_outline(tree, params.truncation_limit)

    memory_context: MemoryContext | None = None
    if config.memory_enabled and config.memory_store is not None:
        try:
            memory_context = retrieve_context(
                config.memory_store,
                _memory_query(tree),
                k=params.memory_k,
                token_budget=params.memory_budget,
                trace_id=tree.trace_id,
            )
        except CompassError as exc:
            warnings.append(f"memory retrieval failed: {exc}")

    findings: list[ErrorFinding] = []
    themes: list[ThemeGroup] = []
    scorecard: QualityScorecard | None = None
    synthesis: dict = {"summary": "", "key_insights": (), "fix_recommendations": ()}
    status = "completed"
    stage_timestamps: dict[str, dict[str, float]] = {}
    prior: dict = {}

    for stage in STAGES:
        started = clock()
        try:
            plan = plan_stage(
                stage,
                outline,
                prior,
                memory_context,
                backend=config.backend,
                params=params,
                trace_id=tree.trace_id,
                warnings=warnings,
            )
            output = execute_stage(
                stage,
                plan,
                outline,
                prior,
                memory_context,
                backend=config.backend,
                params=params,
                taxonomy=config.taxonomy,
                tree=tree,
                warnings=warnings,
            )
        except StageFailureError as exc:
            warnings.append(str(exc))
            status = f"failed_at_{stage}"
            stage_timestamps[stage] = {"started": started, "finished": clock()}
            break
        stage_timestamps[stage] = {"started": started, "finished": clock()}
        if stage == "identify":
            findings = output
            prior["findings"] = [f.to_dict() for f in findings]
            prior["_findings"] = findings
        elif stage == "theme":
            themes = output
            prior["themes"] = [t.to_dict() for t in themes]
        elif stage == "score":
            scorecard = output
            prior["scorecard"] = scorecard.to_dict()
        else:
            synthesis = output

    aggregate_score: float | None = None
    priority: str | None = None
    if scorecard is not None:
        aggregate_score, priority = aggregate_and_prioritize(scorecard, findings, params)

    report = AnalysisReport(
        trace_id=tree.trace_id,
        status=status,
        findings=tuple(findings),
        themes=tuple(themes),
        scorecard=scorecard,
        aggregate_score=aggregate_score,
        priority=priority,
        key_insights=tuple(synthesis["key_insights"]),
        fix_recommendations=tuple(synthesis["fix_recommendations"]),
        summary=synthesis["summary"],
        metadata=PipelineMetadata(
            backend_id=config.backend.backend_id,
            created_at=created_at,
            stage_timestamps=stage_timestamps,
            memory_context_used=memory_context.rendered_text if memory_context else "",
            warnings=tuple(warnings),
        ),
    )

    if config.memory_enabled and config.memory_store is not None:
        try:
            record_episodic(config.memory_store, report)
        except MemoryWriteError as exc:
            logger.warning("episodic recording failed for %s: %s", tree.trace_id, exc)

    return report


def render_markdown(report: AnalysisReport) -> str:
    """Human-readable rendering of a report."""
    lines = [
        f"# Trace {report.trace_id}",
        "",
        f"- status: {report.status}",
        f"- aggregate score: "
        + ("n/a" if report.aggregate_score is None else f"{report.aggregate_score:.3f}"),
        f"- priority: {report.priority or 'n/a'}",
        "",
    ]
    if report.summary:
        lines += [report.summary, ""]
    if report.findings:
        lines.append("## Findings")
        for f in report.findings:
            lines.append(
                f"- **{f.finding_id}** [{f.severity}] {f.error_type.path} at {f.outline_number} "
                f"({f.span_name}): {f.explanation or f.evidence}"
            )
        lines.append("")
    if report.themes:
        lines.append("## Themes")
        for t in report.themes:
            lines.append(f"- **{t.label}** ({', '.join(t.member_finding_ids)}): {t.causal_note}")
        lines.append("")
    if report.scorecard:
        lines.append("## Scores")
        for dim in SCORE_DIMENSIONS:
            lines.append(f"- {dim}: {report.scorecard.dimension_scores[dim]:.2f}")
        lines.append("")
    if report.key_insights:
        lines.append("## Key insights")
        lines += [f"- {k}" for k in report.key_insights]
        lines.append("")
    if report.fix_recommendations:
        lines.append("## Fix recommendations")
        lines += [f"- {k}" for k in report.fix_recommendations]
        lines.append("")
    return "\n".join(lines)
