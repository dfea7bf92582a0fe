"""Episodic and semantic memory stores.

Both stores are line-delimited JSON files under one directory: episodic
entries record what each pipeline run found on a specific trace; semantic
patterns are durable cross-trace error patterns promoted from recurring
high-confidence findings. Appends take a per-store file lock so concurrent
pipelines can record safely; readers see a consistent prefix of the log.
Retrieval embeds a query and injects the best matches back into analysis
prompts.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
from dataclasses import dataclass
from pathlib import Path

from filelock import FileLock

from compass.backend import EmbedderConfig, Vector, embed
from compass.errors import EmbeddingUnavailableError, MemoryWriteError, ZeroVectorError

logger = logging.getLogger(__name__)

DEFAULT_RETRIEVAL_K = 5
DEFAULT_CONTEXT_BUDGET = 1500  # characters of rendered memory text


@dataclass(frozen=True)
class EpisodicEntry:
    trace_id: str
    created_at: float
    findings_digest: tuple[dict, ...]  # {error_type, span_name, severity, confidence}
    aggregate_score: float | None
    summary: str
    status: str = "completed"

    def to_dict(self) -> dict:
        return {
            "trace_id": self.trace_id,
            "created_at": self.created_at,
            "findings_digest": list(self.findings_digest),
            "aggregate_score": self.aggregate_score,
            "summary": self.summary,
            "status": self.status,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "EpisodicEntry":
        return cls(
            trace_id=str(raw["trace_id"]),
            created_at=float(raw["created_at"]),
            findings_digest=tuple(raw.get("findings_digest") or []),
            aggregate_score=raw.get("aggregate_score"),
            summary=str(raw.get("summary", "")),
            status=str(raw.get("status", "completed")),
        )


@dataclass(frozen=True)
class SemanticPattern:
    pattern_id: str
    error_type_path: str
    pattern_text: str
    support_count: int
    mean_confidence: float
    embedding: tuple[float, ...]
    first_seen: float
    last_seen: float

    def to_dict(self) -> dict:
        return {
            "pattern_id": self.pattern_id,
            "error_type_path": self.error_type_path,
            "pattern_text": self.pattern_text,
            "support_count": self.support_count,
            "mean_confidence": self.mean_confidence,
            "embedding": list(self.embedding),
            "first_seen": self.first_seen,
            "last_seen": self.last_seen,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "SemanticPattern":
        return cls(
            pattern_id=str(raw["pattern_id"]),
            error_type_path=str(raw["error_type_path"]),
            pattern_text=str(raw["pattern_text"]),
            support_count=int(raw["support_count"]),
            mean_confidence=float(raw["mean_confidence"]),
            embedding=tuple(float(v) for v in raw["embedding"]),
            first_seen=float(raw["first_seen"]),
            last_seen=float(raw["last_seen"]),
        )


@dataclass(frozen=True)
class RetrievedItem:
    source: str  # "episodic" | "semantic"
    text: str
    similarity: float


@dataclass(frozen=True)
class MemoryContext:
    retrieved: tuple[RetrievedItem, ...]
    rendered_text: str
    token_budget: int


@dataclass(frozen=True)
class PromotionRules:
    min_support: int = 3
    min_confidence: float = 0.7


class MemoryStore:
    """JSONL-backed episodic + semantic stores under one directory."""

    def __init__(self, directory: str | Path, embedder: EmbedderConfig | None = None):
        self.directory = Path(directory)
        self.embedder = embedder or EmbedderConfig()
        self.episodic_path = self.directory / "episodic.jsonl"
        self.semantic_path = self.directory / "semantic.jsonl"
        self._write_lock = threading.Lock()

    def _file_lock(self, path: Path) -> FileLock:
        return FileLock(str(path) + ".lock")

    def _read_jsonl(self, path: Path) -> list[dict]:
        try:
            text = path.read_text(encoding="utf-8")
        except FileNotFoundError:
            return []
        except OSError as exc:
            logger.warning("could not read %s: %s", path, exc)
            return []
        records = []
        for line_no, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError:
                logger.warning("skipping malformed line %d in %s", line_no, path)
        return records

    def read_episodic(self) -> list[EpisodicEntry]:
        return [EpisodicEntry.from_dict(r) for r in self._read_jsonl(self.episodic_path)]

    def read_semantic(self) -> list[SemanticPattern]:
        return [SemanticPattern.from_dict(r) for r in self._read_jsonl(self.semantic_path)]

    def append_episodic(self, entry: EpisodicEntry) -> None:
        line = json.dumps(entry.to_dict(), ensure_ascii=False)
        try:
            self.directory.mkdir(parents=True, exist_ok=True)
            with self._write_lock, self._file_lock(self.episodic_path):
                with open(self.episodic_path, "a", encoding="utf-8") as fh:
                    fh.write(line + "\n")
                    fh.flush()
                    os.fsync(fh.fileno())
        except OSError as exc:
            raise MemoryWriteError(f"could not append episodic entry: {exc}") from exc

    def rewrite_semantic(self, patterns: list[SemanticPattern]) -> None:
        body = "".join(json.dumps(p.to_dict(), ensure_ascii=False) + "\n" for p in patterns)
        tmp = self.semantic_path.with_suffix(".jsonl.tmp")
        try:
            self.directory.mkdir(parents=True, exist_ok=True)
            with self._write_lock, self._file_lock(self.semantic_path):
                tmp.write_text(body, encoding="utf-8")
                os.replace(tmp, self.semantic_path)
        except OSError as exc:
            raise MemoryWriteError(f"could not rewrite semantic store: {exc}") from exc


def record_episodic(store: MemoryStore, report) -> EpisodicEntry:
    """Durably append one entry mirroring a pipeline report.

    Re-running a trace appends another entry; runs are told apart by
    created_at and file order.
    """
    digest = tuple(
        {
            "error_type": f.error_type.path,
            "span_name": f.span_name,
            "severity": f.severity,
            "confidence": f.confidence,
        }
        for f in report.findings
    )
    entry = EpisodicEntry(
        trace_id=report.trace_id,
        created_at=report.created_at,
        findings_digest=digest,
        aggregate_score=report.aggregate_score,
        summary=report.summary,
        status=report.status,
    )
    store.append_episodic(entry)
    return entry


def _pattern_text(path: str, support: int, mean_confidence: float, span_names: list[str]) -> str:
    spans = ", ".join(sorted(set(span_names))[:3]) or "various spans"
    return (
        f"{path}: recurring failure seen in {support} traces "
        f"(mean confidence {mean_confidence:.2f}); typically on spans: {spans}"
    )


def promote(store: MemoryStore, rules: PromotionRules = PromotionRules()) -> list[SemanticPattern]:
    """Promote recurring high-confidence findings into semantic patterns.

    Findings are grouped by error type across episodic entries; a group
    qualifies when it spans at least min_support distinct traces with mean
    confidence at or above min_confidence. The semantic store is recomputed
    from the episodic log, so repeated promotion is idempotent and support
    never decreases. If the embedder is unavailable the promotion is
    deferred and the stores are left untouched.
    """
    entries = store.read_episodic()
    groups: dict[str, dict] = {}
    for entry in entries:
        for item in entry.findings_digest:
            path = str(item.get("error_type", ""))
            if not path:
                continue
            group = groups.setdefault(
                path,
                {"traces": set(), "confidences": [], "span_names": [], "first": None, "last": None},
            )
            group["traces"].add(entry.trace_id)
            group["confidences"].append(float(item.get("confidence", 0.0)))
            group["span_names"].append(str(item.get("span_name", "")))
            created = entry.created_at
            group["first"] = created if group["first"] is None else min(group["first"], created)
            group["last"] = created if group["last"] is None else max(group["last"], created)

    patterns: list[SemanticPattern] = []
    try:
        for path in sorted(groups):
            group = groups[path]
            support = len(group["traces"])
            mean_conf = sum(group["confidences"]) / len(group["confidences"])
            if support < rules.min_support or mean_conf < rules.min_confidence:
                continue
            text = _pattern_text(path, support, mean_conf, group["span_names"])
            vector = embed(store.embedder, text)
            pattern_id = "PAT-" + hashlib.sha256(path.encode("utf-8")).hexdigest()[:10]
            patterns.append(
                SemanticPattern(
                    pattern_id=pattern_id,
                    error_type_path=path,
                    pattern_text=text,
                    support_count=support,
                    mean_confidence=mean_conf,
                    embedding=vector.values,
                    first_seen=group["first"],
                    last_seen=group["last"],
                )
            )
    except (EmbeddingUnavailableError, ZeroVectorError) as exc:
        logger.warning("promotion deferred, embedder unavailable: %s", exc)
        return store.read_semantic()
    store.rewrite_semantic(patterns)
    return patterns


def retrieve_context(
    store: MemoryStore,
    query_text: str,
    k: int = DEFAULT_RETRIEVAL_K,
    token_budget: int = DEFAULT_CONTEXT_BUDGET,
    trace_id: str | None = None,
) -> MemoryContext:
    """Fetch prior knowledge relevant to a query.

    Returns the top-k semantic patterns by cosine similarity plus, when the
    trace has been analyzed before, its most recent episodic entry. Entries
    are rendered one per line and whole entries are dropped from the tail to
    respect the character budget. Never mutates either store; an unavailable
    embedder yields an empty context so analysis can proceed memory-free.
    """
    if k < 0:
        raise ValueError("k must be >= 0")
    items: list[RetrievedItem] = []

    if trace_id is not None:
        history = [e for e in store.read_episodic() if e.trace_id == trace_id]
        if history:
            last = max(enumerate(history), key=lambda pair: (pair[1].created_at, pair[0]))[1]
            score = "n/a" if last.aggregate_score is None else f"{last.aggregate_score:.2f}"
            items.append(
                RetrievedItem(
                    source="episodic",
                    text=(
                        f"last run of this trace ({last.status}, score={score}, "
                        f"{len(last.findings_digest)} findings): {last.summary}"
                    ),
                    similarity=1.0,
                )
            )

    patterns = store.read_semantic()
    if k > 0 and patterns:
        try:
            query = embed(store.embedder, query_text)
        except (EmbeddingUnavailableError, ZeroVectorError) as exc:
            logger.warning("memory retrieval skipped, embedder unavailable: %s", exc)
            return MemoryContext(retrieved=(), rendered_text="", token_budget=token_budget)
        scored = sorted(
            (
                (query.cosine(Vector(p.embedding)), p.pattern_id, p)
                for p in patterns
            ),
            key=lambda t: (-t[0], t[1]),
        )
        for sim, _, pattern in scored[:k]:
            items.append(RetrievedItem(source="semantic", text=pattern.pattern_text, similarity=sim))

    items.sort(key=lambda item: -item.similarity)
    kept: list[RetrievedItem] = []
    used = 0
    for item in items:
        line = f"[{item.source}] {item.text}"
        cost = len(line) + (1 if kept else 0)
        if used + cost > token_budget:
            break
        kept.append(item)
        used += cost
    rendered = "\n".join(f"[{item.source}] {item.text}" for item in kept)
    return MemoryContext(retrieved=tuple(kept), rendered_text=rendered, token_budget=token_budget)
