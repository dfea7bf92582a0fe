from __future__ import annotations

import socket

import pytest

from compass.backend import EmbedderConfig, hash_embed
from compass.errors import MemoryWriteError
from compass.memory import (
    EpisodicEntry,
    MemoryStore,
    PromotionRules,
    SemanticPattern,
    promote,
    record_episodic,
    retrieve_context,
)
from compass.pipeline import (
    AnalysisReport,
    ErrorFinding,
    PipelineMetadata,
)
from compass.taxonomy import load_taxonomy, resolve_error_type

TAXONOMY = load_taxonomy()


def make_finding(finding_id, leaf="Rate Limit", confidence=0.9, span_name="tool.fetch"):
    return ErrorFinding(
        finding_id=finding_id,
        span_id=f"s-{finding_id}",
        span_name=span_name,
        outline_number="1.1",
        error_type=resolve_error_type(TAXONOMY, leaf),
        severity="high",
        evidence="HTTP 429",
        explanation="throttled",
        confidence=confidence,
    )


def make_report(trace_id, findings, created_at=0.0, aggregate=0.7, summary="throttling run"):
    return AnalysisReport(
        trace_id=trace_id,
        status="completed",
        findings=tuple(findings),
        themes=(),
        scorecard=None,
        aggregate_score=aggregate,
        priority="medium",
        key_insights=(),
        fix_recommendations=(),
        summary=summary,
        metadata=PipelineMetadata(
            backend_id="scripted",
            created_at=created_at,
            stage_timestamps={},
            memory_context_used="",
            warnings=(),
        ),
    )


def dead_embedder():
    probe = socket.socket()
    probe.bind(("127.0.0.1", 0))
    port = probe.getsockname()[1]
    probe.close()
    import os

    os.environ.setdefault("COMPASS_API_KEY", "test")
    return EmbedderConfig(
        mode="live", url=f"http://127.0.0.1:{port}/embed", model="m", timeout_s=0.2
    )


class TestRecordEpisodic:
    def test_digest_mirrors_findings(self, tmp_path):
        store = MemoryStore(tmp_path)
        report = make_report("T1", [make_finding(f"F{i:03d}") for i in range(3)])
        entry = record_episodic(store, report)
        assert len(entry.findings_digest) == 3
        assert entry.findings_digest[0]["error_type"].endswith("Rate Limit")
        assert entry.findings_digest[0]["span_name"] == "tool.fetch"

    def test_durable_across_store_instances(self, tmp_path):
        record_episodic(MemoryStore(tmp_path), make_report("T1", [make_finding("F001")]))
        fresh = MemoryStore(tmp_path)
        entries = fresh.read_episodic()
        assert len(entries) == 1
        assert entries[0].trace_id == "T1"

    def test_two_runs_append_two_entries(self, tmp_path):
        store = MemoryStore(tmp_path)
        record_episodic(store, make_report("T1", [], created_at=0.0))
        record_episodic(store, make_report("T1", [], created_at=1.0))
        assert len([e for e in store.read_episodic() if e.trace_id == "T1"]) == 2

    def test_write_failure_raises_memory_error(self, tmp_path):
        store = MemoryStore(tmp_path)
        store.episodic_path.mkdir()  # a directory cannot be appended to
        with pytest.raises(MemoryWriteError):
            record_episodic(store, make_report("T1", []))

    def test_concurrent_appends_all_land(self, tmp_path):
        from concurrent.futures import ThreadPoolExecutor

        store = MemoryStore(tmp_path)

        def write(i):
            record_episodic(store, make_report(f"T{i % 5}", [], created_at=float(i)))

        with ThreadPoolExecutor(max_workers=8) as pool:
            list(pool.map(write, range(80)))
        entries = store.read_episodic()
        assert len(entries) == 80
        assert sorted(e.created_at for e in entries) == [float(i) for i in range(80)]


class TestPromote:
    def fill_three_traces(self, store, leaf="Rate Limit", confidence=0.9):
        for i, trace_id in enumerate(["T1", "T2", "T3"]):
            record_episodic(
                store,
                make_report(
                    trace_id,
                    [make_finding("F001", leaf=leaf, confidence=confidence)],
                    created_at=float(i),
                ),
            )

    def test_three_traces_promote_one_pattern(self, tmp_path):
        store = MemoryStore(tmp_path)
        self.fill_three_traces(store)
        patterns = promote(store, PromotionRules(min_support=3, min_confidence=0.7))
        assert len(patterns) == 1
        assert patterns[0].support_count == 3
        assert patterns[0].error_type_path.endswith("Rate Limit")
        assert patterns[0].first_seen == 0.0 and patterns[0].last_seen == 2.0

    def test_same_trace_three_times_is_support_one(self, tmp_path):
        store = MemoryStore(tmp_path)
        for run in range(3):
            record_episodic(
                store, make_report("T1", [make_finding("F001")], created_at=float(run))
            )
        patterns = promote(store, PromotionRules(min_support=3, min_confidence=0.7))
        assert patterns == []

    def test_low_confidence_not_promoted(self, tmp_path):
        store = MemoryStore(tmp_path)
        self.fill_three_traces(store, confidence=0.4)
        assert promote(store, PromotionRules(min_support=3, min_confidence=0.7)) == []

    def test_idempotent(self, tmp_path):
        store = MemoryStore(tmp_path)
        self.fill_three_traces(store)
        promote(store)
        first = store.semantic_path.read_bytes()
        promote(store)
        assert store.semantic_path.read_bytes() == first

    def test_support_monotone(self, tmp_path):
        store = MemoryStore(tmp_path)
        self.fill_three_traces(store)
        before = promote(store)[0].support_count
        record_episodic(store, make_report("T4", [make_finding("F001")], created_at=3.0))
        after = promote(store)[0].support_count
        assert after >= before
        assert after == 4

    def test_embedder_unavailable_defers(self, tmp_path):
        store = MemoryStore(tmp_path, embedder=dead_embedder())
        self.fill_three_traces(store)
        patterns = promote(store)
        assert patterns == []
        assert not store.semantic_path.exists()  # untouched
        assert len(store.read_episodic()) == 3  # episodic intact


class TestRetrieve:
    def seed_patterns(self, store, texts):
        patterns = []
        for i, text in enumerate(texts):
            patterns.append(
                SemanticPattern(
                    pattern_id=f"PAT-{i:04d}",
                    error_type_path="Tool & System Failures/Execution Environment/Rate Limit",
                    pattern_text=text,
                    support_count=3,
                    mean_confidence=0.9,
                    embedding=hash_embed(text, store.embedder.dim).values,
                    first_seen=0.0,
                    last_seen=1.0,
                )
            )
        store.rewrite_semantic(patterns)
        return patterns

    def test_empty_stores_empty_context(self, tmp_path):
        context = retrieve_context(MemoryStore(tmp_path), "anything", k=5)
        assert context.rendered_text == ""
        assert context.retrieved == ()

    def test_top_k_by_cosine_descending(self, tmp_path):
        store = MemoryStore(tmp_path)
        texts = [
            "rate limit tool timeout retry storm",
            "rate limit errors on search tool",
            "hallucinated final answer content",
            "goal drift away from the task",
            "credential exposure in logs",
        ]
        self.seed_patterns(store, texts)
        query = "tool rate limit timeout"
        # oracle: direct cosine ranking with the same hash embedder
        query_vec = hash_embed(query, store.embedder.dim)
        ranked = sorted(
            texts,
            key=lambda t: -query_vec.cosine(hash_embed(t, store.embedder.dim)),
        )
        context = retrieve_context(store, query, k=2)
        assert len(context.retrieved) == 2
        assert [item.text for item in context.retrieved] == ranked[:2]
        sims = [item.similarity for item in context.retrieved]
        assert sims == sorted(sims, reverse=True)

    def test_includes_latest_episodic_for_trace(self, tmp_path):
        store = MemoryStore(tmp_path)
        record_episodic(store, make_report("T1", [], created_at=0.0, summary="first run"))
        record_episodic(store, make_report("T1", [], created_at=5.0, summary="second run"))
        context = retrieve_context(store, "query text", k=0, trace_id="T1")
        assert len(context.retrieved) == 1
        assert context.retrieved[0].source == "episodic"
        assert "second run" in context.retrieved[0].text

    def test_budget_drops_whole_entries(self, tmp_path):
        store = MemoryStore(tmp_path)
        texts = ["alpha beta gamma " * 10, "delta epsilon zeta " * 10]
        self.seed_patterns(store, texts)
        full = retrieve_context(store, "alpha delta", k=2, token_budget=10_000)
        assert len(full.retrieved) == 2
        line_len = len(f"[semantic] {full.retrieved[0].text}")
        tight = retrieve_context(store, "alpha delta", k=2, token_budget=line_len + 5)
        assert len(tight.retrieved) == 1
        assert tight.rendered_text == f"[semantic] {tight.retrieved[0].text}"
        assert len(tight.rendered_text) <= line_len + 5

    def test_retrieval_is_read_only(self, tmp_path):
        store = MemoryStore(tmp_path)
        self.seed_patterns(store, ["one pattern text"])
        record_episodic(store, make_report("T1", []))
        episodic_before = store.episodic_path.read_bytes()
        semantic_before = store.semantic_path.read_bytes()
        retrieve_context(store, "query", k=3, trace_id="T1")
        assert store.episodic_path.read_bytes() == episodic_before
        assert store.semantic_path.read_bytes() == semantic_before

    def test_embedder_unavailable_empty_context(self, tmp_path):
        store = MemoryStore(tmp_path)
        self.seed_patterns(store, ["a pattern"])
        broken = MemoryStore(tmp_path, embedder=dead_embedder())
        context = retrieve_context(broken, "query", k=2)
        assert context.rendered_text == ""
        assert context.retrieved == ()

    def test_entry_round_trip(self, tmp_path):
        entry = EpisodicEntry(
            trace_id="T1",
            created_at=1.5,
            findings_digest=({"error_type": "a/b/c", "span_name": "s", "severity": "low", "confidence": 0.5},),
            aggregate_score=0.8,
            summary="sum",
        )
        assert EpisodicEntry.from_dict(entry.to_dict()) == entry
