"""Cross-trace issue discovery via density-based clustering.

Findings are featurized to text, embedded, and clustered with a from-scratch
HDBSCAN: core distances, mutual reachability, a deterministically tie-broken
minimum spanning tree, hierarchy condensation at min_cluster_size, and
excess-of-mass (maximum stability) cluster extraction. Noise points are then
probabilistically re-assigned to the nearest cluster when their softmax
membership clears a threshold, and surviving clusters are emitted as
trackable issues.

Determinism: MST edges are sorted by (weight, low index, high index), argmax
ties resolve to the lower cluster index, modal-type ties to the smaller path,
and cluster labels are canonicalized by first member occurrence. Repeated
runs over identical inputs produce identical results regardless of point
order (up to that canonical renumbering).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from compass.backend import Vector
from compass.errors import TraceInvariantError
from compass.taxonomy import ErrorTypeId

# Substitute for an infinite density level on zero-distance merges.
LAMBDA_MAX = 1e12


@dataclass(frozen=True)
class ClusterParams:
    min_cluster_size: int = 3
    min_samples: int = 2
    metric: str = "euclidean"
    soft_threshold: float = 0.6
    softmax_temperature: float = 0.25

    def __post_init__(self):
        if self.min_cluster_size < 2:
            raise ValueError("min_cluster_size must be >= 2")
        if self.min_samples < 1:
            raise ValueError("min_samples must be >= 1")
        if self.min_samples > self.min_cluster_size:
            raise ValueError("min_samples must be <= min_cluster_size")
        if self.metric != "euclidean":
            raise ValueError("only the euclidean metric is supported")
        if not 0.0 < self.soft_threshold < 1.0:
            raise ValueError("soft_threshold must be in (0, 1)")
        if self.softmax_temperature <= 0.0:
            raise ValueError("softmax_temperature must be > 0")


@dataclass(frozen=True)
class ClusteringResult:
    labels: tuple[int, ...]
    probabilities: tuple[float, ...]
    n_clusters: int
    exemplars: dict[int, tuple[int, ...]]
    soft_assigned: frozenset[int] = frozenset()


@dataclass(frozen=True)
class Issue:
    issue_id: str
    title: str
    members: tuple[tuple[str, str], ...]  # (trace_id, finding_id)
    dominant_error_type: ErrorTypeId
    trace_count: int
    first_seen: float
    last_seen: float
    representative_evidence: str


def featurize_finding(finding) -> str:
    """Concatenate a finding's key semantic features into one embedding text.

    Template: ``<error_type path> | <explanation> | <evidence>`` with runs of
    whitespace collapsed to single spaces.
    """

    def squash(text: str) -> str:
        return " ".join(text.split())

    return (
        f"{squash(finding.error_type.path)} | "
        f"{squash(finding.explanation)} | {squash(finding.evidence)}"
    )


def _as_matrix(points: Sequence[Vector]) -> np.ndarray:
    dims = {p.dim for p in points}
    if len(dims) > 1:
        raise TraceInvariantError(f"points have mixed dimensions: {sorted(dims)}")
    return np.asarray([p.values for p in points], dtype=np.float64)


def _lam(distance: float) -> float:
    if distance <= 0.0:
        return LAMBDA_MAX
    return min(1.0 / distance, LAMBDA_MAX)


def _mutual_reachability(x: np.ndarray, min_samples: int) -> np.ndarray:
    n = x.shape[0]
    diff = x[:, None, :] - x[None, :, :]
    dist = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    k = min(min_samples, n - 1)
    # row-sorted distances include self at column 0, so column k is the
    # k-th nearest *other* point
    core = np.sort(dist, axis=1)[:, k]
    return np.maximum(dist, np.maximum(core[:, None], core[None, :]))


class _UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, i: int) -> int:
        root = i
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[i] != root:
            self.parent[i], i = root, self.parent[i]
        return root

    def union(self, a: int, b: int) -> None:
        self.parent[self.find(a)] = self.find(b)


def _minimum_spanning_tree(weights: np.ndarray) -> list[tuple[float, int, int]]:
    """Kruskal MST; edge ties broken by the smaller (i, j) index pair."""
    n = weights.shape[0]
    ii, jj = np.triu_indices(n, k=1)
    ww = weights[ii, jj]
    order = np.lexsort((jj, ii, ww))
    uf = _UnionFind(n)
    edges: list[tuple[float, int, int]] = []
    for idx in order:
        a, b = int(ii[idx]), int(jj[idx])
        if uf.find(a) != uf.find(b):
            uf.union(a, b)
            edges.append((float(ww[idx]), a, b))
            if len(edges) == n - 1:
                break
    return edges


@dataclass
class _Dendrogram:
    # nodes 0..n-1 are points; n..2n-2 are merges in ascending distance order
    left: dict[int, int]
    right: dict[int, int]
    dist: dict[int, float]
    size: dict[int, int]
    root: int
    n: int

    def leaves(self, node: int) -> list[int]:
        out: list[int] = []
        stack = [node]
        while stack:
            cur = stack.pop()
            if cur < self.n:
                out.append(cur)
            else:
                stack.append(self.left[cur])
                stack.append(self.right[cur])
        return out


def _single_linkage(n: int, mst_edges: list[tuple[float, int, int]]) -> _Dendrogram:
    left: dict[int, int] = {}
    right: dict[int, int] = {}
    dist: dict[int, float] = {}
    size: dict[int, int] = {i: 1 for i in range(n)}
    uf = _UnionFind(2 * n - 1)
    node_of: dict[int, int] = {i: i for i in range(n)}
    next_node = n
    for w, a, b in mst_edges:  # already ascending by (w, i, j)
        ra, rb = uf.find(a), uf.find(b)
        left[next_node] = node_of[ra]
        right[next_node] = node_of[rb]
        dist[next_node] = w
        size[next_node] = size[node_of[ra]] + size[node_of[rb]]
        uf.union(ra, rb)
        node_of[uf.find(ra)] = next_node
        next_node += 1
    return _Dendrogram(left, right, dist, size, root=next_node - 1, n=n)


@dataclass
class CondensedHierarchy:
    """Condensed cluster tree: per-cluster point exits and child clusters."""

    point_rows: dict[int, list[tuple[int, float]]]  # cluster -> [(point, lambda)]
    child_rows: dict[int, list[tuple[int, float, int]]]  # cluster -> [(child, lambda, size)]
    birth: dict[int, float]
    children: dict[int, list[int]]
    stability: dict[int, float]


def condense_hierarchy(dendro: _Dendrogram, min_cluster_size: int) -> CondensedHierarchy:
    """Collapse the single-linkage tree, keeping only splits where both sides
    reach min_cluster_size; smaller sides fall out of their parent cluster at
    the split's density level (lambda = 1 / distance)."""
    point_rows: dict[int, list[tuple[int, float]]] = {0: []}
    child_rows: dict[int, list[tuple[int, float, int]]] = {0: []}
    birth: dict[int, float] = {0: 0.0}
    children: dict[int, list[int]] = {0: []}
    next_cid = 1
    stack: list[tuple[int, int]] = [(dendro.root, 0)]
    while stack:
        node, cid = stack.pop()
        lam = _lam(dendro.dist[node])
        l, r = dendro.left[node], dendro.right[node]
        sl, sr = dendro.size[l], dendro.size[r]
        if sl >= min_cluster_size and sr >= min_cluster_size:
            for side in (l, r):
                new_cid = next_cid
                next_cid += 1
                point_rows[new_cid] = []
                child_rows[new_cid] = []
                children[new_cid] = []
                birth[new_cid] = lam
                child_rows[cid].append((new_cid, lam, dendro.size[side]))
                children[cid].append(new_cid)
                if side >= dendro.n:
                    stack.append((side, new_cid))
                else:  # pragma: no cover - a leaf can't reach min_cluster_size >= 2
                    point_rows[new_cid].append((side, lam))
        else:
            survivor = None
            for side in (l, r):
                if dendro.size[side] >= min_cluster_size:
                    survivor = side
                else:
                    for point in dendro.leaves(side):
                        point_rows[cid].append((point, lam))
            if survivor is not None:
                stack.append((survivor, cid))

    stability = {}
    for cid in birth:
        total = sum((lam - birth[cid]) for _, lam in point_rows[cid])
        total += sum((lam - birth[cid]) * size for _, lam, size in child_rows[cid])
        stability[cid] = total
    return CondensedHierarchy(point_rows, child_rows, birth, children, stability)


def extract_clusters_eom(hierarchy: CondensedHierarchy) -> list[int]:
    """Excess-of-mass extraction: keep a cluster when its own stability is at
    least the combined stability of its best descendants."""
    cids = sorted(hierarchy.stability)
    best = dict(hierarchy.stability)
    keep = {cid: True for cid in cids}
    for cid in reversed(cids):
        kids = hierarchy.children[cid]
        if not kids:
            continue
        child_total = sum(best[k] for k in kids)
        if child_total > hierarchy.stability[cid]:
            keep[cid] = False
            best[cid] = child_total
    selected: list[int] = []
    stack = [0]
    while stack:
        cid = stack.pop()
        if keep[cid]:
            selected.append(cid)
        else:
            stack.extend(hierarchy.children[cid])
    return sorted(selected)


def _subtree_points(hierarchy: CondensedHierarchy, cid: int) -> list[tuple[int, float]]:
    out: list[tuple[int, float]] = []
    stack = [cid]
    while stack:
        cur = stack.pop()
        out.extend(hierarchy.point_rows[cur])
        stack.extend(hierarchy.children[cur])
    return out


def hdbscan(points: Sequence[Vector], params: ClusterParams) -> ClusteringResult:
    """Cluster points with HDBSCAN semantics.

    Fewer points than min_cluster_size yields all noise (label -1). Member
    probabilities are the point's density level normalized by its cluster's
    death level; exemplars are the points attaining the maximum level.
    """
    n = len(points)
    if n == 0:
        raise TraceInvariantError("hdbscan requires at least one point")
    x = _as_matrix(points)
    if n < params.min_cluster_size:
        return ClusteringResult(
            labels=tuple([-1] * n),
            probabilities=tuple([0.0] * n),
            n_clusters=0,
            exemplars={},
        )
    mreach = _mutual_reachability(x, params.min_samples)
    mst_edges = _minimum_spanning_tree(mreach)
    dendro = _single_linkage(n, mst_edges)
    hierarchy = condense_hierarchy(dendro, params.min_cluster_size)
    selected = extract_clusters_eom(hierarchy)

    members: dict[int, list[tuple[int, float]]] = {
        cid: sorted(_subtree_points(hierarchy, cid)) for cid in selected
    }
    # canonical numbering: clusters ordered by their first member point
    ordered = sorted(selected, key=lambda cid: min(p for p, _ in members[cid]))
    labels = [-1] * n
    probabilities = [0.0] * n
    exemplars: dict[int, tuple[int, ...]] = {}
    for label, cid in enumerate(ordered):
        lam_death = max(lam for _, lam in members[cid])
        for point, lam in members[cid]:
            labels[point] = label
            probabilities[point] = min(1.0, lam / lam_death)
        exemplars[label] = tuple(p for p, lam in members[cid] if lam == lam_death)
    return ClusteringResult(
        labels=tuple(labels),
        probabilities=tuple(probabilities),
        n_clusters=len(ordered),
        exemplars=exemplars,
    )


def soft_assign_noise(
    points: Sequence[Vector], result: ClusteringResult, params: ClusterParams
) -> ClusteringResult:
    """Re-assign noise points whose softmax cluster membership clears the
    threshold; distances are measured to each cluster's nearest exemplar.
    Existing cluster labels never change and n_clusters is preserved."""
    if result.n_clusters < 1:
        return result
    x = _as_matrix(points)
    exemplar_coords = {
        label: x[list(idxs)] for label, idxs in sorted(result.exemplars.items())
    }
    labels = list(result.labels)
    probabilities = list(result.probabilities)
    soft: set[int] = set(result.soft_assigned)
    for i, label in enumerate(result.labels):
        if label != -1:
            continue
        dists = np.array(
            [
                float(np.min(np.linalg.norm(coords - x[i], axis=1)))
                for _, coords in sorted(exemplar_coords.items())
            ]
        )
        logits = -dists / params.softmax_temperature
        logits -= logits.max()
        weights = np.exp(logits)
        probs = weights / weights.sum()
        best = int(np.argmax(probs))  # ties resolve to the lower index
        best_p = float(probs[best])
        if best_p >= params.soft_threshold:
            labels[i] = best
            probabilities[i] = best_p
            soft.add(i)
    return ClusteringResult(
        labels=tuple(labels),
        probabilities=tuple(probabilities),
        n_clusters=result.n_clusters,
        exemplars=result.exemplars,
        soft_assigned=frozenset(soft),
    )


def emit_issues(
    findings_by_trace: Mapping[str, Mapping[str, object]],
    result: ClusteringResult,
    embedding_order: Sequence[tuple[str, str]],
    trace_timestamps: Mapping[str, float] | None = None,
) -> list[Issue]:
    """Turn clusters into trackable issues.

    ``embedding_order`` maps point index -> (trace_id, finding_id). The
    dominant error type is the modal member type (ties to the smaller path);
    the representative evidence comes from the highest-probability member.
    Residual noise emits no issue.
    """
    if len(embedding_order) != len(result.labels):
        raise TraceInvariantError("embedding_order length must match clustering labels")
    timestamps = trace_timestamps or {}
    issues: list[Issue] = []
    for label in range(result.n_clusters):
        point_indices = [i for i, lbl in enumerate(result.labels) if lbl == label]
        if not point_indices:
            continue
        member_refs = [embedding_order[i] for i in point_indices]
        findings = [
            findings_by_trace[trace_id][finding_id] for trace_id, finding_id in member_refs
        ]
        counts: dict[str, int] = {}
        for f in findings:
            counts[f.error_type.path] = counts.get(f.error_type.path, 0) + 1
        dominant_path = min(counts, key=lambda path: (-counts[path], path))
        dominant = next(f.error_type for f in findings if f.error_type.path == dominant_path)
        rep_idx = max(point_indices, key=lambda i: (result.probabilities[i], -i))
        rep_trace, rep_finding = embedding_order[rep_idx]
        trace_ids = sorted({t for t, _ in member_refs})
        seen = [timestamps.get(t, 0.0) for t in trace_ids]
        digest = hashlib.sha256(
            "\n".join(sorted(f"{t}/{f}" for t, f in member_refs)).encode("utf-8")
        ).hexdigest()
        issues.append(
            Issue(
                issue_id=f"ISS-{digest[:12]}",
                title=(
                    f"{dominant.leaf}: {len(member_refs)} occurrences "
                    f"across {len(trace_ids)} traces"
                ),
                members=tuple(sorted(member_refs)),
                dominant_error_type=dominant,
                trace_count=len(trace_ids),
                first_seen=min(seen) if seen else 0.0,
                last_seen=max(seen) if seen else 0.0,
                representative_evidence=findings_by_trace[rep_trace][rep_finding].evidence,
            )
        )
    return issues
