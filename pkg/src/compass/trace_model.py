"""Trace ingestion: span parsing, tree reconstruction, outline serialization.

Raw telemetry arrives as JSON (either OTLP/JSON export shape or the flat
array format documented in docs/formats.md). Spans are reconstructed into a
causal tree and then rendered as a numbered hierarchical outline, which is
the document the analysis stages read. All types here are immutable after
construction and all operations are pure, so values can be shared freely
across threads.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping

from compass.errors import (
    EmptyTraceError,
    TraceInvariantError,
    TraceParseError,
    TraceSchemaError,
)

DEFAULT_TRUNCATION_LIMIT = 2000
MIN_TRUNCATION_LIMIT = 64


class SpanKind(str, Enum):
    AGENT = "agent"
    LLM = "llm"
    TOOL = "tool"
    RETRIEVAL = "retrieval"
    CHAIN = "chain"
    OTHER = "other"


class SpanStatus(str, Enum):
    OK = "ok"
    ERROR = "error"
    UNSET = "unset"


@dataclass(frozen=True)
class SpanEvent:
    timestamp_ns: int
    name: str
    attributes: dict[str, object] = field(default_factory=dict)


@dataclass(frozen=True)
class SpanRecord:
    """One timed operation in a trace."""

    span_id: str
    parent_span_id: str | None
    trace_id: str
    name: str
    kind: SpanKind
    start_ns: int
    end_ns: int
    status: SpanStatus
    attributes: dict[str, object] = field(default_factory=dict)
    events: tuple[SpanEvent, ...] = ()

    def __post_init__(self):
        if not self.span_id:
            raise TraceInvariantError("span_id must be non-empty")
        if self.end_ns < self.start_ns:
            raise TraceInvariantError(
                f"span {self.span_id}: end_ns {self.end_ns} < start_ns {self.start_ns}"
            )

    @property
    def duration_ms(self) -> float:
        return (self.end_ns - self.start_ns) / 1e6


@dataclass
class TraceNode:
    record: SpanRecord
    children: list["TraceNode"] = field(default_factory=list)


@dataclass
class TraceTree:
    """Causal hierarchy of one trace; orphans are re-rooted, never dropped."""

    trace_id: str
    roots: list[TraceNode]
    nodes: dict[str, TraceNode]
    orphan_count: int


@dataclass
class OutlineDocument:
    """Numbered hierarchical text rendering of a TraceTree.

    ``index`` maps outline numbers like "2.1.3" to span ids (a bijection);
    ``span_ranges`` holds the [start, end) character range of each span's
    own block (header plus attribute/event lines, excluding children).
    """

    text: str
    index: dict[str, str]
    truncation_limit: int
    span_ranges: dict[str, tuple[int, int]] = field(default_factory=dict)

    def span_text(self, span_id: str) -> str:
        start, end = self.span_ranges[span_id]
        return self.text[start:end]

    def outline_number_of(self, span_id: str) -> str | None:
        for number, sid in self.index.items():
            if sid == span_id:
                return number
        return None


_KIND_ALIASES = {
    "agent": SpanKind.AGENT,
    "llm": SpanKind.LLM,
    "tool": SpanKind.TOOL,
    "retrieval": SpanKind.RETRIEVAL,
    "retriever": SpanKind.RETRIEVAL,
    "chain": SpanKind.CHAIN,
    "other": SpanKind.OTHER,
}

_STATUS_ALIASES = {
    "ok": SpanStatus.OK,
    "error": SpanStatus.ERROR,
    "unset": SpanStatus.UNSET,
}


def infer_span_kind(
    name: str, attributes: Mapping[str, object], declared: str | None = None
) -> SpanKind:
    """Map well-known attribute keys / name prefixes onto a SpanKind.

    An explicitly declared kind wins; otherwise `openinference.span.kind`
    and `span.kind` attributes are consulted, then the `tool.` / `llm.`
    name prefixes. Anything unrecognized is `other`.
    """
    if declared is not None:
        resolved = _KIND_ALIASES.get(str(declared).strip().lower())
        if resolved is not None:
            return resolved
    for key in ("openinference.span.kind", "span.kind"):
        value = attributes.get(key)
        if isinstance(value, str):
            resolved = _KIND_ALIASES.get(value.strip().lower())
            if resolved is not None:
                return resolved
    if name.startswith("tool."):
        return SpanKind.TOOL
    if name.startswith("llm."):
        return SpanKind.LLM
    return SpanKind.OTHER


def _parse_status(raw: object) -> SpanStatus:
    if raw is None:
        return SpanStatus.UNSET
    return _STATUS_ALIASES.get(str(raw).strip().lower(), SpanStatus.UNSET)


def _require(record: Mapping[str, object], key: str, index: int) -> object:
    value = record.get(key)
    if value is None or value == "":
        raise TraceSchemaError(key, index)
    return value


def _as_int(value: object, key: str, index: int) -> int:
    try:
        return int(value)  # type: ignore[arg-type]
    except (TypeError, ValueError):
        raise TraceSchemaError(key, index, f"not an integer: {value!r}") from None


def _parse_events(raw: object, span_start_ns: int) -> tuple[SpanEvent, ...]:
    if not isinstance(raw, list):
        return ()
    events = []
    for item in raw:
        if not isinstance(item, dict):
            continue
        ts = item.get("timestamp_ns", span_start_ns)
        try:
            ts = int(ts)
        except (TypeError, ValueError):
            ts = span_start_ns
        attrs = item.get("attributes") or {}
        events.append(SpanEvent(ts, str(item.get("name", "")), dict(attrs)))
    return tuple(events)


def _parse_flat_record(record: object, index: int) -> SpanRecord:
    if not isinstance(record, dict):
        raise TraceSchemaError("span", index, "record is not an object")
    span_id = str(_require(record, "span_id", index))
    trace_id = str(_require(record, "trace_id", index))
    start_ns = _as_int(_require(record, "start_ns", index), "start_ns", index)
    end_ns = _as_int(_require(record, "end_ns", index), "end_ns", index)
    parent = record.get("parent_span_id")
    attributes = dict(record.get("attributes") or {})
    name = str(record.get("name", ""))
    return SpanRecord(
        span_id=span_id,
        parent_span_id=str(parent) if parent else None,
        trace_id=trace_id,
        name=name,
        kind=infer_span_kind(name, attributes, record.get("kind")),
        start_ns=start_ns,
        end_ns=end_ns,
        status=_parse_status(record.get("status")),
        attributes=attributes,
        events=_parse_events(record.get("events"), start_ns),
    )


def _unwrap_any_value(value: object) -> object:
    """Unwrap an OTLP AnyValue; non-scalar values are kept as JSON text."""
    if not isinstance(value, dict):
        return value
    if "stringValue" in value:
        return value["stringValue"]
    if "boolValue" in value:
        return bool(value["boolValue"])
    if "intValue" in value:
        return int(value["intValue"])
    if "doubleValue" in value:
        return float(value["doubleValue"])
    if "bytesValue" in value:
        return value["bytesValue"]
    if "arrayValue" in value:
        inner = value["arrayValue"].get("values", [])
        return json.dumps([_unwrap_any_value(v) for v in inner], ensure_ascii=False)
    if "kvlistValue" in value:
        inner = value["kvlistValue"].get("values", [])
        return json.dumps(
            {kv.get("key", ""): _unwrap_any_value(kv.get("value")) for kv in inner},
            ensure_ascii=False,
        )
    return json.dumps(value, ensure_ascii=False)


def _otlp_attributes(raw: object) -> dict[str, object]:
    attrs: dict[str, object] = {}
    if isinstance(raw, list):
        for kv in raw:
            if isinstance(kv, dict) and "key" in kv:
                attrs[str(kv["key"])] = _unwrap_any_value(kv.get("value"))
    return attrs


_OTLP_STATUS = {0: SpanStatus.UNSET, 1: SpanStatus.OK, 2: SpanStatus.ERROR}


def _parse_otlp_span(span: dict, index: int) -> SpanRecord:
    span_id = str(_require(span, "spanId", index))
    trace_id = str(_require(span, "traceId", index))
    start_ns = _as_int(_require(span, "startTimeUnixNano", index), "startTimeUnixNano", index)
    end_ns = _as_int(_require(span, "endTimeUnixNano", index), "endTimeUnixNano", index)
    attributes = _otlp_attributes(span.get("attributes"))
    name = str(span.get("name", ""))
    status_code = 0
    status = span.get("status")
    if isinstance(status, dict):
        try:
            status_code = int(status.get("code", 0))
        except (TypeError, ValueError):
            status_code = 0
    events = []
    for ev in span.get("events") or []:
        if not isinstance(ev, dict):
            continue
        try:
            ts = int(ev.get("timeUnixNano", start_ns))
        except (TypeError, ValueError):
            ts = start_ns
        events.append(
            SpanEvent(ts, str(ev.get("name", "")), _otlp_attributes(ev.get("attributes")))
        )
    parent = span.get("parentSpanId")
    return SpanRecord(
        span_id=span_id,
        parent_span_id=str(parent) if parent else None,
        trace_id=trace_id,
        name=name,
        kind=infer_span_kind(name, attributes),
        start_ns=start_ns,
        end_ns=end_ns,
        status=_OTLP_STATUS.get(status_code, SpanStatus.UNSET),
        attributes=attributes,
        events=tuple(events),
    )


def parse_trace_file(data: bytes, format: str = "flat_json") -> list[SpanRecord]:
    """Parse trace bytes into SpanRecords, preserving file order.

    ``format`` is "flat_json" (array of flat span objects) or "otlp_json"
    (standard OTLP/JSON export). Malformed JSON raises TraceParseError with
    the byte offset; a span missing span_id/trace_id/start/end raises
    TraceSchemaError naming the field and record index.
    """
    if format not in ("flat_json", "otlp_json"):
        raise ValueError(f"unknown trace format {format!r}")
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise TraceParseError(f"not valid UTF-8: {exc.reason}", exc.start) from exc
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as exc:
        raise TraceParseError(exc.msg, exc.pos) from exc

    if format == "flat_json":
        if not isinstance(payload, list):
            raise TraceParseError("flat_json payload must be a JSON array", 0)
        return [_parse_flat_record(rec, i) for i, rec in enumerate(payload)]

    if not isinstance(payload, dict) or "resourceSpans" not in payload:
        raise TraceParseError("otlp_json payload must contain resourceSpans", 0)
    spans: list[SpanRecord] = []
    index = 0
    for rs in payload.get("resourceSpans") or []:
        for ss in (rs or {}).get("scopeSpans") or []:
            for span in (ss or {}).get("spans") or []:
                spans.append(_parse_otlp_span(span, index))
                index += 1
    return spans


def _sort_key(record: SpanRecord) -> tuple[int, str]:
    return (record.start_ns, record.span_id)


def build_trace_tree(spans: Iterable[SpanRecord]) -> TraceTree:
    """Reconstruct the causal hierarchy of one trace.

    Spans whose parent is absent become additional roots (orphan_count
    increments). A parent cycle is broken by detaching the edge whose child
    has the latest start_ns (ties by span_id); that child becomes a root and
    also counts as an orphan. Node count always equals input span count.
    """
    span_list = list(spans)
    if not span_list:
        raise EmptyTraceError("cannot build a tree from zero spans")
    trace_ids = sorted({s.trace_id for s in span_list})
    if len(trace_ids) > 1:
        raise TraceInvariantError(f"mixed trace ids: {', '.join(trace_ids)}")
    by_id: dict[str, SpanRecord] = {}
    for s in span_list:
        if s.span_id in by_id:
            raise TraceInvariantError(f"duplicate span_id: {s.span_id}")
        by_id[s.span_id] = s

    orphan_count = 0
    parent: dict[str, str | None] = {}
    for s in span_list:
        if s.parent_span_id is None:
            parent[s.span_id] = None
        elif s.parent_span_id not in by_id or s.parent_span_id == s.span_id:
            # missing parent, or a self-loop (a one-edge cycle)
            parent[s.span_id] = None
            orphan_count += 1
        else:
            parent[s.span_id] = s.parent_span_id

    # Break remaining parent cycles: walk each unresolved chain; when the
    # walk revisits a node on the current path, the loop between the two
    # visits is a cycle.
    state: dict[str, int] = {}  # 0/absent = unvisited, 1 = on path, 2 = done
    for start in sorted(by_id):
        if state.get(start):
            continue
        path: list[str] = []
        node: str | None = start
        while node is not None and state.get(node, 0) == 0:
            state[node] = 1
            path.append(node)
            node = parent[node]
        if node is not None and state.get(node) == 1:
            cycle = path[path.index(node):]
            breaker = max(cycle, key=lambda sid: (by_id[sid].start_ns, sid))
            parent[breaker] = None
            orphan_count += 1
        for sid in path:
            state[sid] = 2

    nodes = {sid: TraceNode(record) for sid, record in by_id.items()}
    roots: list[TraceNode] = []
    for sid in by_id:
        p = parent[sid]
        if p is None:
            roots.append(nodes[sid])
        else:
            nodes[p].children.append(nodes[sid])
    for node_obj in nodes.values():
        node_obj.children.sort(key=lambda n: _sort_key(n.record))
    roots.sort(key=lambda n: _sort_key(n.record))
    return TraceTree(trace_id=trace_ids[0], roots=roots, nodes=nodes, orphan_count=orphan_count)


def _truncate(value: str, limit: int) -> str:
    if len(value) <= limit:
        return value
    return value[:limit] + f"…[truncated {len(value) - limit} chars]"


def _render_value(value: object) -> str:
    if isinstance(value, str):
        return value
    return json.dumps(value, ensure_ascii=False) if isinstance(value, (dict, list)) else str(value)


def serialize_outline(
    tree: TraceTree, truncation_limit: int = DEFAULT_TRUNCATION_LIMIT
) -> OutlineDocument:
    """Render a TraceTree as a numbered, hierarchical text outline.

    Each span emits one header line
    ``<number>. [<kind>] <name> (status=<status>, duration=<ms>ms)`` plus
    indented attribute/event lines; attribute values longer than
    ``truncation_limit`` characters are cut with a ``…[truncated N chars]``
    suffix. Emission is depth-first and byte-deterministic.
    """
    if truncation_limit < MIN_TRUNCATION_LIMIT:
        raise ValueError(f"truncation_limit must be >= {MIN_TRUNCATION_LIMIT}")
    parts: list[str] = []
    index: dict[str, str] = {}
    ranges: dict[str, tuple[int, int]] = {}
    offset = 0

    # explicit stack: deep span chains must not hit the recursion limit
    stack: list[tuple[TraceNode, str, int]] = [
        (root, str(i), 0) for i, root in reversed(list(enumerate(tree.roots, start=1)))
    ]
    while stack:
        node, number, depth = stack.pop()
        rec = node.record
        head_indent = "  " * depth
        attr_indent = "  " * (depth + 1)
        lines = [
            f"{head_indent}{number}. [{rec.kind.value}] {rec.name} "
            f"(status={rec.status.value}, duration={rec.duration_ms:.1f}ms)"
        ]
        for key, value in rec.attributes.items():
            lines.append(f"{attr_indent}- {key}: {_truncate(_render_value(value), truncation_limit)}")
        for event in rec.events:
            offset_ms = max(0, event.timestamp_ns - rec.start_ns) / 1e6
            rendered = ", ".join(
                f"{k}={_truncate(_render_value(v), truncation_limit)}"
                for k, v in event.attributes.items()
            )
            lines.append(f"{attr_indent}- event {event.name} @+{offset_ms:.1f}ms: {rendered}")
        block = "\n".join(lines) + "\n"
        parts.append(block)
        index[number] = rec.span_id
        ranges[rec.span_id] = (offset, offset + len(block))
        offset += len(block)
        for i, child in reversed(list(enumerate(node.children, start=1))):
            stack.append((child, f"{number}.{i}", depth + 1))

    return OutlineDocument(
        text="".join(parts),
        index=index,
        truncation_limit=truncation_limit,
        span_ranges=ranges,
    )
