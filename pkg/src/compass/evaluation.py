"""Benchmark-style scoring of predictions against annotated ground truth.

Predicted (span, category) pairs are matched per trace against human
annotations using greedy one-to-one tiers — joint (same span and label),
then category-only, then location-only — and the match sets feed four
metrics: categorization micro-F1, localization accuracy, joint score, and
the Pearson correlation between predicted and human overall quality scores.
Matching is canonicalized by sorting, so prediction order never changes a
metric.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from compass.errors import AnnotationSchemaError, EvaluationInputError
from compass.taxonomy import TaxonomyMapping, map_to_external

JOINT = "joint"
CATEGORY_ONLY = "category_only"
LOCATION_ONLY = "location_only"


@dataclass(frozen=True)
class AnnotatedError:
    span_id: str
    category: str


@dataclass(frozen=True)
class TraceAnnotation:
    trace_id: str
    human_score: float
    errors: tuple[AnnotatedError, ...]


@dataclass(frozen=True)
class GroundTruth:
    traces: dict[str, TraceAnnotation]

    @property
    def trace_count(self) -> int:
        return len(self.traces)

    @property
    def error_count(self) -> int:
        return sum(len(t.errors) for t in self.traces.values())


@dataclass(frozen=True)
class MatchedPair:
    trace_id: str
    finding_id: str
    gt_index: int
    kind: str
    prediction_label: str
    gt_label: str


@dataclass(frozen=True)
class MatchResult:
    pairs: tuple[MatchedPair, ...]
    unmatched_predictions: tuple[tuple[str, str, str], ...]  # (trace, finding_id, label)
    unmatched_ground_truths: tuple[tuple[str, int, str], ...]  # (trace, gt index, label)
    gt_errors: tuple[tuple[str, str, str], ...]  # (trace, span_id, label)
    predicted_spans: dict[str, frozenset[str]] = field(default_factory=dict)


def load_ground_truth(data: bytes, mapping: TaxonomyMapping) -> GroundTruth:
    """Parse the annotation JSON; category labels must be known external labels."""
    try:
        payload = json.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise AnnotationSchemaError(f"annotations are not valid JSON: {exc}") from exc
    if not isinstance(payload, dict) or not isinstance(payload.get("traces"), list):
        raise AnnotationSchemaError("annotation file must be an object with a 'traces' list")
    traces: dict[str, TraceAnnotation] = {}
    for entry in payload["traces"]:
        trace_id = str(entry.get("trace_id", ""))
        if not trace_id:
            raise AnnotationSchemaError("annotation entry missing trace_id")
        if trace_id in traces:
            raise AnnotationSchemaError(f"duplicate annotations for trace {trace_id}")
        try:
            human_score = float(entry.get("human_score"))
        except (TypeError, ValueError):
            raise AnnotationSchemaError(f"trace {trace_id}: human_score must be a number") from None
        errors = []
        for err in entry.get("errors") or []:
            span_id = str(err.get("span_id", ""))
            category = str(err.get("category", ""))
            if not span_id:
                raise AnnotationSchemaError(f"trace {trace_id}: annotated error missing span_id")
            if category not in mapping.external_labels:
                raise AnnotationSchemaError(
                    f"trace {trace_id}: unknown category label {category!r}"
                )
            errors.append(AnnotatedError(span_id, category))
        traces[trace_id] = TraceAnnotation(trace_id, human_score, tuple(errors))
    return GroundTruth(traces=traces)


def match_predictions(
    predictions: Mapping[str, Sequence],
    gt: GroundTruth,
    mapping: TaxonomyMapping,
) -> MatchResult:
    """Greedy tiered one-to-one matching of findings against annotations.

    ``predictions`` maps trace_id -> findings (each with span_id, finding_id,
    error_type). Tiers run joint, category-only, location-only; both sides
    are sorted first so the pairing is order-independent.
    """
    pairs: list[MatchedPair] = []
    unmatched_preds: list[tuple[str, str, str]] = []
    unmatched_gts: list[tuple[str, int, str]] = []
    gt_errors: list[tuple[str, str, str]] = []
    predicted_spans: dict[str, frozenset[str]] = {}

    trace_ids = sorted(set(predictions) | set(gt.traces))
    for trace_id in trace_ids:
        annotation = gt.traces.get(trace_id)
        gts = list(annotation.errors) if annotation else []
        for err in gts:
            gt_errors.append((trace_id, err.span_id, err.category))
        preds = [
            (f.span_id, map_to_external(mapping, f.error_type), f.finding_id)
            for f in predictions.get(trace_id, [])
        ]
        predicted_spans[trace_id] = frozenset(span for span, _, _ in preds)
        preds.sort()
        gt_order = sorted(range(len(gts)), key=lambda i: (gts[i].span_id, gts[i].category, i))

        pred_used = [False] * len(preds)
        gt_used = [False] * len(gts)

        def run_tier(kind: str, matches) -> None:
            for p_idx, (span, label, finding_id) in enumerate(preds):
                if pred_used[p_idx]:
                    continue
                for g_idx in gt_order:
                    if gt_used[g_idx]:
                        continue
                    if matches(span, label, gts[g_idx]):
                        pred_used[p_idx] = True
                        gt_used[g_idx] = True
                        pairs.append(
                            MatchedPair(
                                trace_id=trace_id,
                                finding_id=finding_id,
                                gt_index=g_idx,
                                kind=kind,
                                prediction_label=label,
                                gt_label=gts[g_idx].category,
                            )
                        )
                        break

        run_tier(JOINT, lambda span, label, ann: span == ann.span_id and label == ann.category)
        run_tier(CATEGORY_ONLY, lambda span, label, ann: label == ann.category)
        run_tier(LOCATION_ONLY, lambda span, label, ann: span == ann.span_id)

        for p_idx, (span, label, finding_id) in enumerate(preds):
            if not pred_used[p_idx]:
                unmatched_preds.append((trace_id, finding_id, label))
        for g_idx, err in enumerate(gts):
            if not gt_used[g_idx]:
                unmatched_gts.append((trace_id, g_idx, err.category))

    return MatchResult(
        pairs=tuple(pairs),
        unmatched_predictions=tuple(unmatched_preds),
        unmatched_ground_truths=tuple(unmatched_gts),
        gt_errors=tuple(gt_errors),
        predicted_spans=predicted_spans,
    )


def _counts(match: MatchResult) -> tuple[int, int, int]:
    tp = sum(1 for p in match.pairs if p.kind in (JOINT, CATEGORY_ONLY))
    loc_only = sum(1 for p in match.pairs if p.kind == LOCATION_ONLY)
    fp = len(match.unmatched_predictions) + loc_only
    fn = len(match.unmatched_ground_truths) + loc_only
    return tp, fp, fn


def categorization_f1(match: MatchResult) -> float:
    """Micro-F1 over category-correct matches; empty vs empty scores 1.0."""
    tp, fp, fn = _counts(match)
    if tp == 0 and fp == 0 and fn == 0:
        return 1.0
    denom = 2 * tp + fp + fn
    return (2 * tp / denom) if denom else 0.0


def localization_accuracy(match: MatchResult) -> float:
    """Fraction of annotated errors whose span is hit by any prediction in
    the same trace, label ignored. No annotations at all scores 1.0."""
    if not match.gt_errors:
        return 1.0
    hits = sum(
        1
        for trace_id, span_id, _ in match.gt_errors
        if span_id in match.predicted_spans.get(trace_id, frozenset())
    )
    return hits / len(match.gt_errors)


def joint_score(match: MatchResult) -> float:
    """Fraction of annotated errors matched with both span and label correct."""
    if not match.gt_errors:
        return 1.0
    joint = sum(1 for p in match.pairs if p.kind == JOINT)
    return joint / len(match.gt_errors)


def pearson(xs: Sequence[float], ys: Sequence[float]) -> float | None:
    """Sample Pearson correlation; returns None when either side has zero
    variance (an undefined correlation, deliberately not reported as 0)."""
    if len(xs) != len(ys):
        raise EvaluationInputError(f"length mismatch: {len(xs)} vs {len(ys)}")
    if len(xs) < 2:
        raise EvaluationInputError("pearson requires at least 2 pairs")
    n = len(xs)
    mean_x = sum(xs) / n
    mean_y = sum(ys) / n
    dx = [x - mean_x for x in xs]
    dy = [y - mean_y for y in ys]
    sxx = sum(d * d for d in dx)
    syy = sum(d * d for d in dy)
    if sxx == 0.0 or syy == 0.0:
        return None
    sxy = sum(a * b for a, b in zip(dx, dy))
    return sxy / math.sqrt(sxx * syy)


@dataclass(frozen=True)
class MetricsReport:
    categorization_f1: float
    localization_accuracy: float
    joint_score: float
    pearson_rho: float | None
    per_category: dict[str, dict[str, float]]
    trace_count: int
    prediction_count: int
    gt_error_count: int

    def to_dict(self) -> dict:
        return {
            "categorization_f1": self.categorization_f1,
            "localization_accuracy": self.localization_accuracy,
            "joint_score": self.joint_score,
            "pearson_rho": self.pearson_rho,
            "pearson_undefined": self.pearson_rho is None,
            "per_category": self.per_category,
            "trace_count": self.trace_count,
            "prediction_count": self.prediction_count,
            "gt_error_count": self.gt_error_count,
        }

    def to_text_table(self) -> str:
        rho = "undef" if self.pearson_rho is None else f"{self.pearson_rho:.3f}"
        header = f"{'Run':<12} {'Cat. F1':>8} {'Loc. Acc.':>10} {'Joint':>8} {'rho':>8}"
        row = (
            f"{'reports':<12} {self.categorization_f1:>8.3f} "
            f"{self.localization_accuracy:>10.3f} {self.joint_score:>8.3f} {rho:>8}"
        )
        lines = [header, "-" * len(header), row, ""]
        if self.per_category:
            lines.append(f"{'Category':<36} {'TP':>4} {'FP':>4} {'FN':>4} {'Prec':>7} {'Rec':>7}")
            for label in sorted(self.per_category):
                c = self.per_category[label]
                lines.append(
                    f"{label:<36} {int(c['tp']):>4} {int(c['fp']):>4} {int(c['fn']):>4} "
                    f"{c['precision']:>7.3f} {c['recall']:>7.3f}"
                )
        return "\n".join(lines) + "\n"


def _per_category_table(match: MatchResult) -> dict[str, dict[str, float]]:
    table: dict[str, dict[str, float]] = {}

    def bucket(label: str) -> dict[str, float]:
        return table.setdefault(label, {"tp": 0, "fp": 0, "fn": 0})

    for pair in match.pairs:
        if pair.kind in (JOINT, CATEGORY_ONLY):
            bucket(pair.gt_label)["tp"] += 1
        else:
            bucket(pair.prediction_label)["fp"] += 1
            bucket(pair.gt_label)["fn"] += 1
    for _, _, label in match.unmatched_predictions:
        bucket(label)["fp"] += 1
    for _, _, label in match.unmatched_ground_truths:
        bucket(label)["fn"] += 1
    for counts in table.values():
        tp, fp, fn = counts["tp"], counts["fp"], counts["fn"]
        counts["precision"] = tp / (tp + fp) if tp + fp else 0.0
        counts["recall"] = tp / (tp + fn) if tp + fn else 0.0
    return table


def evaluate_run(
    reports: Sequence,
    gt: GroundTruth,
    mapping: TaxonomyMapping,
) -> MetricsReport:
    """Aggregate matches across all traces and compute the benchmark metrics.

    ``reports`` are AnalysisReports (anything with trace_id, findings, and
    aggregate_score). Every report's trace must be annotated; annotated
    traces without a report count as zero-prediction traces.
    """
    missing = sorted({r.trace_id for r in reports} - set(gt.traces))
    if missing:
        raise EvaluationInputError(f"traces not in ground truth: {', '.join(missing)}")
    duplicates = [r.trace_id for r in reports]
    if len(set(duplicates)) != len(duplicates):
        raise EvaluationInputError("multiple reports for one trace")
    predictions = {r.trace_id: list(r.findings) for r in reports}
    match = match_predictions(predictions, gt, mapping)

    score_pairs = [
        (r.aggregate_score, gt.traces[r.trace_id].human_score)
        for r in sorted(reports, key=lambda r: r.trace_id)
        if r.aggregate_score is not None
    ]
    rho: float | None = None
    if len(score_pairs) >= 2:
        rho = pearson([p[0] for p in score_pairs], [p[1] for p in score_pairs])

    return MetricsReport(
        categorization_f1=categorization_f1(match),
        localization_accuracy=localization_accuracy(match),
        joint_score=joint_score(match),
        pearson_rho=rho,
        per_category=_per_category_table(match),
        trace_count=gt.trace_count,
        prediction_count=sum(len(f) for f in predictions.values()),
        gt_error_count=gt.error_count,
    )
