from __future__ import annotations

import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.cluster.hierarchy import linkage
from scipy.sparse.csgraph import minimum_spanning_tree as scipy_mst
from scipy.spatial.distance import squareform
from sklearn.metrics import adjusted_rand_score

from compass.backend import Vector
from compass.clustering import (
    ClusteringResult,
    ClusterParams,
    CondensedHierarchy,
    _as_matrix,
    _minimum_spanning_tree,
    _mutual_reachability,
    _single_linkage,
    condense_hierarchy,
    emit_issues,
    extract_clusters_eom,
    featurize_finding,
    hdbscan,
    soft_assign_noise,
)
from compass.errors import TraceInvariantError
from compass.pipeline import ErrorFinding
from compass.taxonomy import load_taxonomy, resolve_error_type

TAXONOMY = load_taxonomy()


def vectors(rows) -> list[Vector]:
    return [Vector(tuple(float(v) for v in row)) for row in rows]


def make_finding(finding_id, leaf="Goal Drift", explanation="agent abandoned goal",
                 evidence="final answer: 42", confidence=0.9):
    return ErrorFinding(
        finding_id=finding_id,
        span_id=f"span-{finding_id}",
        span_name="agent.run",
        outline_number="1",
        error_type=resolve_error_type(TAXONOMY, leaf),
        severity="high",
        evidence=evidence,
        explanation=explanation,
        confidence=confidence,
    )


def three_blob_points(seed=12345, per_blob=20, separation=20.0):
    rng = np.random.default_rng(seed)
    centers = np.array(
        [[0.0, 0.0], [separation, 0.0], [separation / 2, separation * np.sqrt(3) / 2]]
    )
    points, labels = [], []
    for ci, center in enumerate(centers):
        for _ in range(per_blob):
            points.append(center + rng.normal(size=2))
            labels.append(ci)
    return vectors(points), labels


class TestFeaturize:
    def test_template(self):
        finding = make_finding("F001")
        assert featurize_finding(finding) == (
            "Workflow & Task Gaps/Task Management/Goal Drift | "
            "agent abandoned goal | final answer: 42"
        )

    def test_identical_fields_identical_strings(self):
        assert featurize_finding(make_finding("F001")) == featurize_finding(make_finding("F099"))

    def test_whitespace_squashed(self):
        finding = make_finding("F001", explanation="agent  abandoned\n goal")
        assert " | agent abandoned goal | " in featurize_finding(finding)


class TestHdbscan:
    def test_identical_points_single_cluster(self):
        points = vectors([[1.0, 2.0]] * 4)
        result = hdbscan(points, ClusterParams(min_cluster_size=2, min_samples=1))
        assert result.n_clusters == 1
        assert result.labels == (0, 0, 0, 0)
        assert all(p == 1.0 for p in result.probabilities)

    def test_fewer_points_than_min_cluster_size_all_noise(self):
        points = vectors([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]])
        result = hdbscan(points, ClusterParams(min_cluster_size=5, min_samples=2))
        assert result.labels == (-1, -1, -1)
        assert result.probabilities == (0.0, 0.0, 0.0)
        assert result.n_clusters == 0

    def test_dimension_mismatch(self):
        with pytest.raises(TraceInvariantError):
            hdbscan([Vector((1.0,)), Vector((1.0, 2.0))], ClusterParams())

    def test_three_blobs_recovered(self):
        points, generating = three_blob_points()
        result = hdbscan(points, ClusterParams(min_cluster_size=5, min_samples=2))
        assert result.n_clusters == 3
        assert adjusted_rand_score(generating, result.labels) >= 0.99

    def test_probabilities_in_unit_interval(self):
        points, _ = three_blob_points(seed=7)
        result = hdbscan(points, ClusterParams(min_cluster_size=5, min_samples=2))
        assert all(0.0 <= p <= 1.0 for p in result.probabilities)
        for label, idxs in result.exemplars.items():
            for i in idxs:
                assert result.labels[i] == label

    def test_permutation_equivariance(self):
        points, _ = three_blob_points(seed=99, per_blob=10)
        params = ClusterParams(min_cluster_size=4, min_samples=2)
        base = hdbscan(points, params)
        rng = random.Random(5)
        perm = list(range(len(points)))
        rng.shuffle(perm)
        permuted = [points[i] for i in perm]
        shuffled = hdbscan(permuted, params)

        def partition(labels, index_map):
            groups: dict[int, set[int]] = {}
            noise = set()
            for pos, label in enumerate(labels):
                original = index_map[pos]
                if label == -1:
                    noise.add(original)
                else:
                    groups.setdefault(label, set()).add(original)
            return frozenset(frozenset(g) for g in groups.values()), noise

        base_partition = partition(base.labels, list(range(len(points))))
        perm_partition = partition(shuffled.labels, perm)
        assert base_partition == perm_partition


class TestAgainstReferenceOracles:
    """Dual-route checks: MST weights vs scipy, linkage heights vs scipy,
    and EOM extraction vs exhaustive antichain maximization."""

    def mutual_reachability(self, points, params):
        return _mutual_reachability(_as_matrix(points), params.min_samples)

    def test_mst_total_weight_matches_scipy(self):
        points, _ = three_blob_points(seed=3, per_blob=8)
        params = ClusterParams(min_cluster_size=4, min_samples=2)
        mreach = self.mutual_reachability(points, params)
        mine = sum(w for w, _, _ in _minimum_spanning_tree(mreach))
        reference = scipy_mst(mreach).sum()
        assert mine == pytest.approx(reference, abs=1e-9)

    def test_single_linkage_heights_match_scipy(self):
        points, _ = three_blob_points(seed=11, per_blob=7)
        params = ClusterParams(min_cluster_size=3, min_samples=2)
        mreach = self.mutual_reachability(points, params)
        np.fill_diagonal(mreach, 0.0)
        heights = sorted(w for w, _, _ in _minimum_spanning_tree(mreach))
        reference = sorted(linkage(squareform(mreach, checks=False), method="single")[:, 2])
        assert np.allclose(heights, reference, atol=1e-9)

    def test_blob_partition_matches_sklearn_hdbscan(self):
        sklearn_cluster = pytest.importorskip("sklearn.cluster")
        if not hasattr(sklearn_cluster, "HDBSCAN"):
            pytest.skip("sklearn build without HDBSCAN")
        points, _ = three_blob_points()
        mine = hdbscan(points, ClusterParams(min_cluster_size=5, min_samples=2))
        reference = sklearn_cluster.HDBSCAN(min_cluster_size=5, min_samples=2).fit(
            np.array([p.values for p in points])
        )
        assert adjusted_rand_score(reference.labels_, mine.labels) == 1.0

    @pytest.mark.parametrize("seed,k,dim", [(1, 2, 2), (2, 3, 2), (3, 4, 2), (4, 2, 8), (5, 3, 8)])
    def test_separated_blobs_match_sklearn_across_configs(self, seed, k, dim):
        sklearn_cluster = pytest.importorskip("sklearn.cluster")
        if not hasattr(sklearn_cluster, "HDBSCAN"):
            pytest.skip("sklearn build without HDBSCAN")
        rng = np.random.default_rng(seed)
        # random centers pushed far apart so the density structure is unambiguous
        centers = rng.uniform(-1, 1, size=(k, dim))
        centers *= 100.0 / max(1e-9, np.min(
            [np.linalg.norm(a - b) for i, a in enumerate(centers) for b in centers[i + 1:]]
        ))
        rows = np.concatenate([c + rng.normal(size=(15, dim)) for c in centers])
        mine = hdbscan(vectors(rows), ClusterParams(min_cluster_size=5, min_samples=3))
        reference = sklearn_cluster.HDBSCAN(min_cluster_size=5, min_samples=3).fit(rows)
        assert mine.n_clusters == k
        assert adjusted_rand_score(reference.labels_, mine.labels) == 1.0


    @staticmethod
    def antichains(hierarchy: CondensedHierarchy, cid: int = 0):
        """All antichains within the subtree of cid, as (set, total) pairs."""
        own = [(frozenset({cid}), hierarchy.stability[cid])]
        kids = hierarchy.children[cid]
        if not kids:
            return own + [(frozenset(), 0.0)]
        combos = [(frozenset(), 0.0)]
        for kid in kids:
            options = TestAgainstReferenceOracles.antichains(hierarchy, kid)
            combos = [
                (acc | pick, total + sub)
                for acc, total in combos
                for pick, sub in options
            ]
        return own + combos

    def exhaustive_best(self, hierarchy):
        options = self.antichains(hierarchy)
        best_total = max(total for _, total in options)
        winners = [sel for sel, total in options if total == pytest.approx(best_total, abs=1e-9)]
        return best_total, winners

    @pytest.mark.parametrize("seed", range(30))
    def test_eom_matches_exhaustive_oracle_small_instances(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 13))
        points = vectors(rng.uniform(-5, 5, size=(n, 2)))
        mcs = int(rng.integers(2, max(3, n // 2 + 1)))
        params = ClusterParams(min_cluster_size=mcs, min_samples=min(2, mcs))
        if n < mcs:
            assert hdbscan(points, params).n_clusters == 0
            return
        mreach = self.mutual_reachability(points, params)
        dendro = _single_linkage(n, _minimum_spanning_tree(mreach))
        hierarchy = condense_hierarchy(dendro, mcs)
        selected = set(extract_clusters_eom(hierarchy))
        best_total, winners = self.exhaustive_best(hierarchy)
        got_total = sum(hierarchy.stability[c] for c in selected)
        assert got_total == pytest.approx(best_total, abs=1e-9)
        if len(winners) == 1:
            assert selected == set(winners[0])


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10**9))
def test_result_structural_invariants(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 40))
    dim = int(rng.integers(1, 5))
    points = vectors(rng.uniform(-3, 3, size=(n, dim)))
    mcs = int(rng.integers(2, 7))
    params = ClusterParams(
        min_cluster_size=mcs,
        min_samples=int(rng.integers(1, mcs + 1)),
        soft_threshold=float(rng.uniform(0.35, 0.9)),
    )
    result = hdbscan(points, params)
    assert len(result.labels) == n
    assert len(result.probabilities) == n
    assert set(result.exemplars) == set(range(result.n_clusters))
    for i, label in enumerate(result.labels):
        assert -1 <= label < result.n_clusters
        if label == -1:
            assert result.probabilities[i] == 0.0
        else:
            assert 0.0 < result.probabilities[i] <= 1.0
    for label, idxs in result.exemplars.items():
        assert idxs
        assert all(result.labels[i] == label for i in idxs)
        assert all(result.probabilities[i] == 1.0 for i in idxs)

    after = soft_assign_noise(points, result, params)
    assert after.n_clusters == result.n_clusters
    assert after.soft_assigned <= {i for i, l in enumerate(result.labels) if l == -1}
    for i in after.soft_assigned:
        assert after.labels[i] != -1
        assert after.probabilities[i] >= params.soft_threshold


class TestSoftAssign:
    def symmetric_case(self):
        # two tight mirrored blobs; the stray point is farther from both
        # than they are from each other, so it falls out of the root
        points = vectors(
            [
                [-10.0, 0.0], [-10.0, 0.1], [-10.0, -0.1],
                [10.0, 0.0], [10.0, 0.1], [10.0, -0.1],
                [0.0, 30.0],
            ]
        )
        params = ClusterParams(min_cluster_size=3, min_samples=2, soft_threshold=0.6)
        return points, params, hdbscan(points, params)

    def test_equidistant_point_stays_noise_at_half(self):
        points, params, result = self.symmetric_case()
        assert result.n_clusters == 2
        assert result.labels[6] == -1
        after = soft_assign_noise(points, result, params)
        assert after.labels[6] == -1
        assert after.soft_assigned == frozenset()

    def test_equidistant_probability_exactly_half(self):
        points, params, result = self.symmetric_case()
        permissive = ClusterParams(
            min_cluster_size=3, min_samples=2, soft_threshold=0.5, softmax_temperature=0.25
        )
        after = soft_assign_noise(points, result, permissive)
        assert after.labels[6] == 0  # tie resolves to the lower cluster index
        assert after.probabilities[6] == 0.5  # exact by symmetry
        assert after.soft_assigned == frozenset({6})

    def test_coincident_exemplar_assigned_with_high_probability(self):
        # crafted result: point 6 sits exactly on an exemplar of cluster 0
        points = vectors(
            [
                [0.0, 0.0], [0.0, 0.1], [0.0, -0.1],
                [20.0, 0.0], [20.0, 0.1], [20.0, -0.1],
                [0.0, 0.0],
            ]
        )
        result = ClusteringResult(
            labels=(0, 0, 0, 1, 1, 1, -1),
            probabilities=(1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.0),
            n_clusters=2,
            exemplars={0: (0, 1, 2), 1: (3, 4, 5)},
        )
        params = ClusterParams(min_cluster_size=3, min_samples=2, soft_threshold=0.6)
        after = soft_assign_noise(points, result, params)
        assert after.labels[6] == 0
        assert after.probabilities[6] >= 0.99
        assert 6 in after.soft_assigned

    def test_zero_clusters_noop(self):
        points = vectors([[0.0, 0.0], [5.0, 5.0]])
        result = hdbscan(points, ClusterParams(min_cluster_size=3, min_samples=2))
        assert result.n_clusters == 0
        assert soft_assign_noise(points, result, ClusterParams()) == result

    def test_never_relabels_members_or_shrinks_clusters(self):
        points, params, result = self.symmetric_case()
        after = soft_assign_noise(points, result, params)
        assert after.n_clusters == result.n_clusters
        for before_label, after_label in zip(result.labels, after.labels):
            if before_label != -1:
                assert after_label == before_label


class TestEmitIssues:
    def build_inputs(self, labels, probabilities, finding_specs):
        findings_by_trace: dict[str, dict[str, ErrorFinding]] = {}
        order = []
        for (trace_id, finding_id, leaf) in finding_specs:
            finding = make_finding(finding_id, leaf=leaf)
            findings_by_trace.setdefault(trace_id, {})[finding_id] = finding
            order.append((trace_id, finding_id))
        exemplars = {}
        for label in set(labels) - {-1}:
            exemplars[label] = tuple(i for i, l in enumerate(labels) if l == label)[:1]
        result = ClusteringResult(
            labels=tuple(labels),
            probabilities=tuple(probabilities),
            n_clusters=len(set(labels) - {-1}),
            exemplars=exemplars,
        )
        return findings_by_trace, result, order

    def test_counts_and_trace_count(self):
        findings, result, order = self.build_inputs(
            [0, 0, 0],
            [1.0, 0.8, 0.9],
            [("T1", "F001", "Goal Drift"), ("T1", "F002", "Goal Drift"), ("T2", "F001", "Goal Drift")],
        )
        (issue,) = emit_issues(findings, result, order, {"T1": 5.0, "T2": 9.0})
        assert issue.trace_count == 2
        assert len(issue.members) == 3
        assert issue.title == "Goal Drift: 3 occurrences across 2 traces"
        assert issue.first_seen == 5.0 and issue.last_seen == 9.0

    def test_all_noise_emits_nothing(self):
        findings, result, order = self.build_inputs(
            [-1, -1], [0.0, 0.0], [("T1", "F001", "Goal Drift"), ("T1", "F002", "Rate Limit")]
        )
        assert emit_issues(findings, result, order) == []

    def test_modal_tie_takes_smaller_path(self):
        findings, result, order = self.build_inputs(
            [0, 0, 0, 0],
            [0.5, 0.6, 0.7, 0.8],
            [
                ("T1", "F001", "Rate Limit"),
                ("T1", "F002", "Rate Limit"),
                ("T2", "F001", "Goal Drift"),
                ("T2", "F002", "Goal Drift"),
            ],
        )
        (issue,) = emit_issues(findings, result, order)
        # tie between 2x Rate Limit and 2x Goal Drift: smaller path wins
        assert issue.dominant_error_type.path == (
            "Tool & System Failures/Execution Environment/Rate Limit"
        )

    def test_representative_evidence_from_highest_probability(self):
        findings, result, order = self.build_inputs(
            [0, 0],
            [0.4, 0.9],
            [("T1", "F001", "Goal Drift"), ("T2", "F001", "Goal Drift")],
        )
        findings["T2"]["F001"] = make_finding("F001", evidence="the telling quote")
        (issue,) = emit_issues(findings, result, order)
        assert issue.representative_evidence == "the telling quote"

    def test_conservation_members_plus_noise(self):
        findings, result, order = self.build_inputs(
            [0, -1, 0, 1, 1, 1, -1],
            [1.0, 0.0, 0.9, 1.0, 0.9, 0.8, 0.0],
            [(f"T{i}", f"F{i:03d}", "Goal Drift") for i in range(7)],
        )
        issues = emit_issues(findings, result, order)
        member_total = sum(len(i.members) for i in issues)
        noise = sum(1 for label in result.labels if label == -1)
        assert member_total + noise == len(order)

    def test_stable_issue_id(self):
        findings, result, order = self.build_inputs(
            [0, 0], [1.0, 1.0], [("T1", "F001", "Goal Drift"), ("T2", "F001", "Goal Drift")]
        )
        first = emit_issues(findings, result, order)[0].issue_id
        second = emit_issues(findings, result, order)[0].issue_id
        assert first == second
        assert first.startswith("ISS-")


class TestParams:
    def test_validation(self):
        with pytest.raises(ValueError):
            ClusterParams(min_cluster_size=1)
        with pytest.raises(ValueError):
            ClusterParams(min_samples=5, min_cluster_size=3)
        with pytest.raises(ValueError):
            ClusterParams(soft_threshold=1.5)
        with pytest.raises(ValueError):
            ClusterParams(softmax_temperature=0.0)
        with pytest.raises(ValueError):
            ClusterParams(metric="cosine")
