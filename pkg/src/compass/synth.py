"""Synthetic agentic-trace generator with taxonomy-labeled fault injection.

Builds deterministic traces (flat_json) shaped by depth/fanout/tool_calls
plus matching ground-truth annotations for every injected fault, closing the
loop for desk-scale end-to-end testing: generated traces parse, build valid
trees, and evaluate perfectly against their own annotations when predictions
are taken from the fault list. Randomness comes from a SplitMix64 generator
so outputs are byte-identical across runs and platforms for a given seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

from compass.errors import TraceGenerationError
from compass.taxonomy import (
    Taxonomy,
    TaxonomyMapping,
    load_mapping,
    load_taxonomy,
    map_to_external,
    resolve_error_type,
)

_BASE_EPOCH_NS = 1_700_000_000_000_000_000


class SplitMix64:
    """SplitMix64 PRNG; 64-bit state, fixed constants, platform independent."""

    _MASK = (1 << 64) - 1

    def __init__(self, seed: int):
        self._state = seed & self._MASK

    def next_u64(self) -> int:
        self._state = (self._state + 0x9E3779B97F4A7C15) & self._MASK
        z = self._state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & self._MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & self._MASK
        return z ^ (z >> 31)

    def below(self, n: int) -> int:
        if n <= 0:
            raise ValueError("below() needs n >= 1")
        return self.next_u64() % n


@dataclass(frozen=True)
class TraceShape:
    depth: int = 3
    fanout: int = 2
    tool_calls: int = 2

    def __post_init__(self):
        if self.depth < 1:
            raise TraceGenerationError("depth must be >= 1")
        if self.fanout < 1:
            raise TraceGenerationError("fanout must be >= 1")
        if self.tool_calls < 0:
            raise TraceGenerationError("tool_calls must be >= 0")


@dataclass(frozen=True)
class FaultSpec:
    error_type: str  # taxonomy leaf path or unique leaf name
    target: str  # tool_span | llm_span | root
    payload: str  # may reference {span} and {n}
    count: int = 1

    def __post_init__(self):
        if self.target not in ("tool_span", "llm_span", "root"):
            raise TraceGenerationError(f"unknown fault target {self.target!r}")
        if self.count < 1:
            raise TraceGenerationError("fault count must be >= 1")


def _build_span(
    span_id: str,
    parent: str | None,
    trace_id: str,
    name: str,
    kind: str,
    start_ns: int,
    end_ns: int,
    attributes: dict,
) -> dict:
    return {
        "span_id": span_id,
        "parent_span_id": parent,
        "trace_id": trace_id,
        "name": name,
        "kind": kind,
        "start_ns": start_ns,
        "end_ns": end_ns,
        "status": "ok",
        "attributes": attributes,
        "events": [],
    }


def generate_trace(
    seed: int,
    shape: TraceShape,
    faults: list[FaultSpec],
    taxonomy: Taxonomy | None = None,
    mapping: TaxonomyMapping | None = None,
) -> tuple[bytes, bytes]:
    """Generate one synthetic trace plus its ground-truth annotations.

    Returns (flat_json trace bytes, annotation bytes). The span count is a
    pure function of the shape: a complete fanout-ary tree of the given
    depth plus tool_calls tool spans under the deepest layer. Each fault
    instance marks one eligible span (status=error, payload in attributes
    and an exception event) and yields one annotation with the externally
    mapped category. A fault whose target class has no spans (for example
    tool_span with tool_calls=0) raises TraceGenerationError.
    """
    taxonomy = taxonomy or load_taxonomy()
    mapping = mapping or load_mapping()
    rng = SplitMix64(seed)
    trace_id = f"synth-{seed & 0xFFFFFFFF:08x}"

    spans: list[dict] = []
    counter = 0

    def new_span_id() -> str:
        nonlocal counter
        sid = f"{trace_id}-s{counter:04d}"
        counter += 1
        return sid

    # structural tree: root agent span, then alternating llm/chain layers
    levels: list[list[dict]] = []
    root = _build_span(
        new_span_id(),
        None,
        trace_id,
        "agent.run",
        "agent",
        0,
        0,
        {"task": f"synthetic task {seed}", "agent.version": "1.0"},
    )
    spans.append(root)
    levels.append([root])
    for depth in range(1, shape.depth):
        layer: list[dict] = []
        kind = "llm" if depth % 2 == 1 else "chain"
        for parent in levels[depth - 1]:
            for j in range(shape.fanout):
                name = f"llm.call_{depth}_{j}" if kind == "llm" else f"chain.step_{depth}_{j}"
                attributes = (
                    {
                        "llm.model_name": "synth-model",
                        "input.value": f"prompt {depth}/{j} for {parent['name']}",
                        "output.value": f"completion {depth}/{j}",
                    }
                    if kind == "llm"
                    else {"step": f"{depth}/{j}"}
                )
                span = _build_span(
                    new_span_id(), parent["span_id"], trace_id, name, kind, 0, 0, attributes
                )
                spans.append(span)
                layer.append(span)
        levels.append(layer)

    tool_spans: list[dict] = []
    deepest = levels[-1]
    for i in range(shape.tool_calls):
        parent = deepest[i % len(deepest)]
        span = _build_span(
            new_span_id(),
            parent["span_id"],
            trace_id,
            f"tool.invoke_{i}",
            "tool",
            0,
            0,
            {
                "tool.name": f"tool_{i}",
                "input.value": json.dumps({"query": f"lookup {i}", "page": i}),
                "output.value": f"result {i}",
            },
        )
        spans.append(span)
        tool_spans.append(span)

    # place timestamps: nested windows, deterministic jitter
    children_of: dict[str, list[dict]] = {}
    for span in spans:
        if span["parent_span_id"]:
            children_of.setdefault(span["parent_span_id"], []).append(span)

    def place(span: dict, start_ns: int) -> int:
        span["start_ns"] = start_ns
        cursor = start_ns + 1_000_000 + rng.below(1_000_000)
        for child in children_of.get(span["span_id"], []):
            cursor = place(child, cursor) + 500_000 + rng.below(500_000)
        span["end_ns"] = cursor + 1_000_000 + rng.below(1_000_000)
        return span["end_ns"]

    place(root, _BASE_EPOCH_NS + (seed % 1_000_000) * 1_000_000_000)

    # fault injection
    llm_spans = [s for s in spans if s["kind"] == "llm"]
    eligible = {"tool_span": tool_spans, "llm_span": llm_spans, "root": [root]}
    annotations: list[dict] = []
    for fault in faults:
        error_type = resolve_error_type(taxonomy, fault.error_type)
        targets = eligible[fault.target]
        if not targets:
            raise TraceGenerationError(
                f"fault targets {fault.target} but the shape produced no such spans"
            )
        for n in range(fault.count):
            span = targets[rng.below(len(targets))]
            payload = fault.payload.format(span=span["name"], n=n)
            span["status"] = "error"
            key = "error.message"
            suffix = 0
            while key in span["attributes"]:
                suffix += 1
                key = f"error.message.{suffix}"
            span["attributes"][key] = payload
            span["events"].append(
                {
                    "timestamp_ns": span["start_ns"] + 100_000,
                    "name": "exception",
                    "attributes": {"exception.message": payload, "error.type": error_type.leaf},
                }
            )
            annotations.append(
                {"span_id": span["span_id"], "category": map_to_external(mapping, error_type)}
            )

    human_score = 1.0 if not annotations else round(max(0.2, 1.0 - 0.1 * len(annotations)), 2)
    annotation_doc = {
        "traces": [
            {"trace_id": trace_id, "human_score": human_score, "errors": annotations}
        ]
    }
    trace_bytes = (json.dumps(spans, indent=2, ensure_ascii=False) + "\n").encode("utf-8")
    annotation_bytes = (json.dumps(annotation_doc, indent=2, ensure_ascii=False) + "\n").encode(
        "utf-8"
    )
    return trace_bytes, annotation_bytes


def load_fault_specs(data: bytes) -> list[FaultSpec]:
    """Parse a faults.json file: a list of fault spec objects."""
    payload = json.loads(data.decode("utf-8"))
    if not isinstance(payload, list):
        raise TraceGenerationError("faults file must be a JSON array")
    specs = []
    for raw in payload:
        specs.append(
            FaultSpec(
                error_type=str(raw["error_type"]),
                target=str(raw.get("target", "tool_span")),
                payload=str(raw.get("payload", "injected fault {n} on {span}")),
                count=int(raw.get("count", 1)),
            )
        )
    return specs
