"""Hierarchical error taxonomy and mapping onto external benchmark labels.

The taxonomy is a fixed three-level tree (category / subcategory / error
type). A built-in default ships with five top-level categories covering
reasoning, safety, tooling, workflow, and reflection failures; both the
tree and the external-label mapping can be replaced via JSON config files
(see docs/formats.md) when the built-in reconstruction needs correcting.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from compass.errors import MappingConfigError, TaxonomyConfigError, UnknownErrorTypeError


@dataclass(frozen=True)
class ErrorTypeId:
    """A validated leaf of the taxonomy, addressed by its slash path."""

    path: str
    category: str
    subcategory: str
    leaf: str

    @classmethod
    def from_path(cls, path: str) -> "ErrorTypeId":
        parts = path.split("/")
        if len(parts) != 3 or not all(parts):
            raise UnknownErrorTypeError(path, [])
        return cls(path=path, category=parts[0], subcategory=parts[1], leaf=parts[2])


@dataclass(frozen=True)
class SubcategoryNode:
    name: str
    error_types: tuple[str, ...]


@dataclass(frozen=True)
class CategoryNode:
    name: str
    subcategories: tuple[SubcategoryNode, ...]


@dataclass(frozen=True)
class Taxonomy:
    version: str
    categories: tuple[CategoryNode, ...]
    _leaf_index: dict[str, ErrorTypeId] = field(repr=False, default_factory=dict)

    def leaves(self) -> list[ErrorTypeId]:
        return list(self._leaf_index.values())

    def leaf_paths(self) -> list[str]:
        return list(self._leaf_index.keys())

    def get(self, path: str) -> ErrorTypeId | None:
        return self._leaf_index.get(path)


@dataclass(frozen=True)
class TaxonomyMapping:
    """Many-to-one mapping from internal leaf paths to external labels."""

    entries: dict[str, str]
    external_labels: frozenset[str]
    default_label: str | None = None


DEFAULT_TAXONOMY_CONFIG: dict = {
    "version": "builtin-1",
    "categories": [
        {
            "name": "Thinking & Response Issues",
            "subcategories": [
                {
                    "name": "Hallucinations",
                    "error_types": ["Hallucinated Content", "Hallucinated Tool Result"],
                },
                {
                    "name": "Output Violations",
                    "error_types": ["Output Format Violation", "Instruction Non-compliance"],
                },
            ],
        },
        {
            "name": "Safety & Security Risks",
            "subcategories": [
                {
                    "name": "Data Protection",
                    "error_types": ["PII Leakage", "Credential Exposure", "Data Exposure"],
                },
                {"name": "Content Safety", "error_types": ["Unsafe Content"]},
            ],
        },
        {
            "name": "Tool & System Failures",
            "subcategories": [
                {
                    "name": "Tool Invocation",
                    "error_types": ["API Failure", "Invalid Tool Params", "Tool Selection Error"],
                },
                {
                    "name": "Execution Environment",
                    "error_types": ["Rate Limit", "Runtime Exception", "Misconfiguration"],
                },
            ],
        },
        {
            "name": "Workflow & Task Gaps",
            "subcategories": [
                {
                    "name": "Task Management",
                    "error_types": ["Context Loss", "Goal Drift", "Task Orchestration Failure"],
                },
                {
                    "name": "Efficiency",
                    "error_types": ["Redundant Action", "Poor Information Retrieval"],
                },
            ],
        },
        {
            "name": "Reflection Gaps",
            "subcategories": [
                {
                    "name": "Planning",
                    "error_types": ["Lack of Self-Correction", "Missing ReAct Planning"],
                },
            ],
        },
    ],
}

TRAIL_EXTERNAL_LABELS: tuple[str, ...] = (
    "Language-only",
    "Tool-related",
    "Poor Information Retrieval",
    "Tool Output Misinterpretation",
    "Incorrect Problem Identification",
    "Tool Selection Errors",
    "Formatting Errors",
    "Instruction Non-compliance",
    "Tool Definition Issues",
    "Environment Setup Errors",
    "Rate Limiting",
    "Authentication Errors",
    "Service Errors",
    "Resource Not Found",
    "Resource Exhaustion",
    "Timeout Issues",
    "Context Handling Failures",
    "Resource Abuse",
    "Goal Deviation",
    "Task Orchestration",
    "Other",
)

DEFAULT_MAPPING_CONFIG: dict = {
    "external_labels": list(TRAIL_EXTERNAL_LABELS),
    "default_label": "Other",
    "entries": {
        "Thinking & Response Issues/Hallucinations/Hallucinated Content": "Language-only",
        "Thinking & Response Issues/Hallucinations/Hallucinated Tool Result": "Language-only",
        "Thinking & Response Issues/Output Violations/Output Format Violation": "Formatting Errors",
        "Thinking & Response Issues/Output Violations/Instruction Non-compliance": "Instruction Non-compliance",
        "Safety & Security Risks/Data Protection/PII Leakage": "Other",
        "Safety & Security Risks/Data Protection/Credential Exposure": "Other",
        "Safety & Security Risks/Data Protection/Data Exposure": "Other",
        "Safety & Security Risks/Content Safety/Unsafe Content": "Other",
        "Tool & System Failures/Tool Invocation/API Failure": "Service Errors",
        "Tool & System Failures/Tool Invocation/Invalid Tool Params": "Formatting Errors",
        "Tool & System Failures/Tool Invocation/Tool Selection Error": "Tool Selection Errors",
        "Tool & System Failures/Execution Environment/Rate Limit": "Rate Limiting",
        "Tool & System Failures/Execution Environment/Runtime Exception": "Service Errors",
        "Tool & System Failures/Execution Environment/Misconfiguration": "Environment Setup Errors",
        "Workflow & Task Gaps/Task Management/Context Loss": "Context Handling Failures",
        "Workflow & Task Gaps/Task Management/Goal Drift": "Goal Deviation",
        "Workflow & Task Gaps/Task Management/Task Orchestration Failure": "Task Orchestration",
        "Workflow & Task Gaps/Efficiency/Redundant Action": "Resource Abuse",
        "Workflow & Task Gaps/Efficiency/Poor Information Retrieval": "Poor Information Retrieval",
        "Reflection Gaps/Planning/Lack of Self-Correction": "Other",
        "Reflection Gaps/Planning/Missing ReAct Planning": "Other",
    },
}


def load_taxonomy(config_bytes: bytes | None = None) -> Taxonomy:
    """Load a taxonomy config; None/empty input loads the built-in default.

    Raises TaxonomyConfigError on duplicate leaf paths or any branch whose
    depth is not exactly three levels.
    """
    if config_bytes:
        try:
            config = json.loads(config_bytes.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise TaxonomyConfigError(f"taxonomy config is not valid JSON: {exc}") from exc
    else:
        config = DEFAULT_TAXONOMY_CONFIG
    if not isinstance(config, dict) or not isinstance(config.get("categories"), list):
        raise TaxonomyConfigError("taxonomy config must be an object with a 'categories' list")

    categories: list[CategoryNode] = []
    leaf_index: dict[str, ErrorTypeId] = {}
    for cat in config["categories"]:
        cat_name = str(cat.get("name", "")).strip()
        subs_raw = cat.get("subcategories")
        if not cat_name or not isinstance(subs_raw, list) or not subs_raw:
            raise TaxonomyConfigError(
                f"category {cat_name!r} must have a name and at least one subcategory (depth must be 3)"
            )
        subs: list[SubcategoryNode] = []
        for sub in subs_raw:
            sub_name = str(sub.get("name", "")).strip()
            leaves_raw = sub.get("error_types")
            if not sub_name or not isinstance(leaves_raw, list) or not leaves_raw:
                raise TaxonomyConfigError(
                    f"subcategory {sub_name!r} under {cat_name!r} must have at least one "
                    "error type (depth must be 3)"
                )
            leaves = tuple(str(leaf).strip() for leaf in leaves_raw)
            for leaf in leaves:
                if not leaf:
                    raise TaxonomyConfigError(
                        f"empty error type under {cat_name}/{sub_name} (depth must be 3)"
                    )
                path = f"{cat_name}/{sub_name}/{leaf}"
                if path in leaf_index:
                    raise TaxonomyConfigError(f"duplicate leaf path: {path}")
                leaf_index[path] = ErrorTypeId(path, cat_name, sub_name, leaf)
            subs.append(SubcategoryNode(sub_name, leaves))
        categories.append(CategoryNode(cat_name, tuple(subs)))
    if not categories:
        raise TaxonomyConfigError("taxonomy has no categories")
    return Taxonomy(
        version=str(config.get("version", "custom")),
        categories=tuple(categories),
        _leaf_index=leaf_index,
    )


def _levenshtein(a: str, b: str) -> int:
    if not a:
        return len(b)
    if not b:
        return len(a)
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        cur = [i]
        for j, cb in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def _normalized_distance(a: str, b: str) -> float:
    longest = max(len(a), len(b))
    return _levenshtein(a, b) / longest if longest else 0.0


def resolve_error_type(taxonomy: Taxonomy, path_or_fuzzy: str) -> ErrorTypeId:
    """Resolve a model-emitted label to a taxonomy leaf.

    An exact path wins; otherwise a unique case-insensitive leaf-name match
    is accepted. Ambiguous leaf names require the full path. No match raises
    UnknownErrorTypeError carrying the three closest leaf names.
    """
    query = path_or_fuzzy.strip()
    exact = taxonomy.get(query)
    if exact is not None:
        return exact
    folded = query.lower()
    by_leaf = [etid for etid in taxonomy.leaves() if etid.leaf.lower() == folded]
    if len(by_leaf) == 1:
        return by_leaf[0]
    if len(by_leaf) > 1:
        raise UnknownErrorTypeError(query, sorted(e.path for e in by_leaf))
    ranked = sorted(
        taxonomy.leaves(),
        key=lambda e: (_normalized_distance(folded, e.leaf.lower()), e.leaf),
    )
    raise UnknownErrorTypeError(query, [e.leaf for e in ranked[:3]])


def load_mapping(config_bytes: bytes | None = None) -> TaxonomyMapping:
    """Load a mapping config; None/empty loads the shipped TRAIL-style one."""
    if config_bytes:
        try:
            config = json.loads(config_bytes.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise MappingConfigError(f"mapping config is not valid JSON: {exc}") from exc
    else:
        config = DEFAULT_MAPPING_CONFIG
    labels = config.get("external_labels")
    if not isinstance(labels, list) or not labels:
        raise MappingConfigError("mapping config needs a non-empty 'external_labels' list")
    entries = {str(k): str(v) for k, v in (config.get("entries") or {}).items()}
    default_label = config.get("default_label")
    return TaxonomyMapping(
        entries=entries,
        external_labels=frozenset(str(v) for v in labels),
        default_label=str(default_label) if default_label is not None else None,
    )


def validate_mapping(mapping: TaxonomyMapping, taxonomy: Taxonomy) -> None:
    """Check the mapping is total over the taxonomy and internally consistent."""
    known = set(taxonomy.leaf_paths())
    unknown = sorted(set(mapping.entries) - known)
    if unknown:
        raise MappingConfigError(f"mapping entries reference unknown leaves: {', '.join(unknown)}")
    bad_labels = sorted(
        {label for label in mapping.entries.values() if label not in mapping.external_labels}
    )
    if mapping.default_label is not None and mapping.default_label not in mapping.external_labels:
        bad_labels.append(mapping.default_label)
    if bad_labels:
        raise MappingConfigError(f"labels not in external_labels: {', '.join(bad_labels)}")
    if mapping.default_label is None:
        unmapped = sorted(known - set(mapping.entries))
        if unmapped:
            raise MappingConfigError(
                f"mapping is not total and has no default_label; unmapped leaves: {', '.join(unmapped)}"
            )


def map_to_external(mapping: TaxonomyMapping, error_type: ErrorTypeId) -> str:
    """Map a taxonomy leaf to its external benchmark label."""
    label = mapping.entries.get(error_type.path)
    if label is not None:
        return label
    if mapping.default_label is not None:
        return mapping.default_label
    raise MappingConfigError(f"no mapping for leaf {error_type.path} and no default_label")
