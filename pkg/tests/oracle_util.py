"""Shared helper: build a scripted-backend oracle for synthetic traces.

Given a generated trace and the fault list that produced it, construct the
eight chat responses (plan + execute for all four stages) such that the
identify stage reports exactly the injected ground truth. Evaluating those
reports against the generated annotations must then score perfectly.
"""

from __future__ import annotations

import json

from compass.pipeline import SCORE_DIMENSIONS
from compass.synth import FaultSpec
from compass.trace_model import build_trace_tree, parse_trace_file, serialize_outline


def expand_fault_leaves(faults: list[FaultSpec]) -> list[str]:
    """Internal leaf (path or unique name) per injected fault instance, in
    the same order generate_trace emits annotations."""
    return [fault.error_type for fault in faults for _ in range(fault.count)]


def oracle_script(trace_bytes: bytes, annotation_bytes: bytes, faults: list[FaultSpec]) -> dict:
    spans = parse_trace_file(trace_bytes, "flat_json")
    tree = build_trace_tree(spans)
    outline = serialize_outline(tree)
    reverse = {span_id: number for number, span_id in outline.index.items()}
    annotation = json.loads(annotation_bytes)["traces"][0]
    trace_id = annotation["trace_id"]
    leaves = expand_fault_leaves(faults)
    assert len(leaves) == len(annotation["errors"])

    findings = []
    for leaf, error in zip(leaves, annotation["errors"]):
        span_id = error["span_id"]
        findings.append(
            {
                "outline_number": reverse[span_id],
                "error_type": leaf,
                "severity": "high",
                "evidence": outline.span_text(span_id).splitlines()[0].strip()[:60],
                "explanation": f"injected {leaf} fault",
                "confidence": 0.9,
            }
        )

    themes = []
    if findings:
        themes = [
            {
                "label": "injected faults",
                "member_finding_ids": [f"F{i + 1:03d}" for i in range(len(findings))],
                "causal_note": "all findings come from the same synthetic fault batch",
            }
        ]
    scores = {d: 0.9 if not findings else 0.6 for d in SCORE_DIMENSIONS}

    return {
        f"identify:plan:{trace_id}": json.dumps(
            {"strategy": "check every span marked status=error", "focus": []}
        ),
        f"identify:execute:{trace_id}": json.dumps({"findings": findings}),
        f"theme:plan:{trace_id}": json.dumps({"strategy": "one theme per fault batch", "focus": []}),
        f"theme:execute:{trace_id}": json.dumps({"themes": themes}),
        f"score:plan:{trace_id}": json.dumps({"strategy": "penalize injected faults", "focus": []}),
        f"score:execute:{trace_id}": json.dumps(
            {"scores": scores, "rationales": {d: "synthetic" for d in SCORE_DIMENSIONS}}
        ),
        f"synthesize:plan:{trace_id}": json.dumps({"strategy": "wrap up", "focus": []}),
        f"synthesize:execute:{trace_id}": json.dumps(
            {
                "summary": f"{len(findings)} injected fault(s) confirmed",
                "key_insights": ["synthetic corpus behaves as constructed"],
                "fix_recommendations": ["remove the fault injection"],
            }
        ),
    }
