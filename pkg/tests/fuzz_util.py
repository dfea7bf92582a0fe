"""Seeded random span-set generator used by fuzz and acceptance tests.

Produces messy-but-realistic inputs: spans out of order, orphaned parents,
parent cycles, and occasional self-loops.
"""

from __future__ import annotations

import random

from compass.trace_model import SpanKind, SpanRecord, SpanStatus

_KINDS = list(SpanKind)
_STATUSES = list(SpanStatus)


def random_span_set(rng: random.Random, max_spans: int = 30) -> list[SpanRecord]:
    n = rng.randint(1, max_spans)
    ids = [f"s{i:03d}" for i in range(n)]
    spans: list[SpanRecord] = []
    for i, span_id in enumerate(ids):
        roll = rng.random()
        if i == 0 or roll < 0.15:
            parent = None
        elif roll < 0.25:
            parent = f"missing-{rng.randint(0, 5)}"  # orphan
        elif roll < 0.32:
            parent = rng.choice(ids)  # may point forward: possible cycle
        elif roll < 0.34:
            parent = span_id  # self-loop
        else:
            parent = ids[rng.randrange(0, i)]
        start = rng.randint(0, 10**9)
        spans.append(
            SpanRecord(
                span_id=span_id,
                parent_span_id=parent,
                trace_id="fuzz-trace",
                name=rng.choice(["agent.run", "llm.call", "tool.fetch", "step"]),
                kind=rng.choice(_KINDS),
                start_ns=start,
                end_ns=start + rng.randint(0, 10**8),
                status=rng.choice(_STATUSES),
                attributes={"k": "v" * rng.randint(0, 50), "i": rng.randint(0, 99)},
            )
        )
    rng.shuffle(spans)
    return spans
