"""Defenses: vocabulary scanning, weight-drift diagnostics, trigger probing.

Scanning diffs a suspect model's token inventory against the released
vocabulary; any entry added after release is flagged. This catches every
embedding-level attack by construction and, just as importantly, stays blind
to denoiser fine-tuning, which touches no vocabulary entry; the drift report
covers that side by ranking per-tensor (and per-embedding-row) changes
against a clean reference checkpoint. Brute-force probing generates images
for candidate identifiers and scores how far the produced category
distribution sits from the candidate's literal class; its cost is linear in
the candidate list, which is exactly why dictionary-wide searches are
expensive.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .bundle import ModelBundle
from .diffusion import sample
from .errors import BudgetError
from .eval import Oracle, oracle_logits, require_oracle_gate
from .rng import stream_key
from .tokenizer import Vocabulary

# Tensors where the row count may legitimately grow after release; drift is
# reported per row and extra suspect rows are listed as additions.
ROW_TENSORS = ("textenc.embeddings", "textenc.nouveau")


@dataclass
class VocabDiff:
    added: list[dict] = field(default_factory=list)
    removed: list[dict] = field(default_factory=list)
    suspect_size: int = 0
    reference_size: int = 0
    suspect_base_size: int = 0
    reference_base_size: int = 0

    @property
    def is_clean(self) -> bool:
        return not self.added and not self.removed

    def to_json_dict(self) -> dict:
        return {
            "kind": "vocab-diff",
            "added": self.added,
            "removed": self.removed,
            "suspect_size": self.suspect_size,
            "reference_size": self.reference_size,
            "suspect_base_size": self.suspect_base_size,
            "reference_base_size": self.reference_base_size,
        }


def scan_vocabulary(suspect: ModelBundle, reference: Vocabulary) -> VocabDiff:
    """Exact (surface, kind) set difference between suspect and release."""
    suspect_entries = {
        (surface, kind): i for i, (surface, kind) in enumerate(suspect.vocab.entries())
    }
    reference_entries = {
        (surface, kind): i for i, (surface, kind) in enumerate(reference.entries())
    }
    added = [
        {"surface": s, "id": suspect_entries[(s, k)], "kind": k}
        for (s, k) in suspect_entries
        if (s, k) not in reference_entries
    ]
    removed = [
        {"surface": s, "id": reference_entries[(s, k)], "kind": k}
        for (s, k) in reference_entries
        if (s, k) not in suspect_entries
    ]
    added.sort(key=lambda e: e["id"])
    removed.sort(key=lambda e: e["id"])
    return VocabDiff(
        added=added,
        removed=removed,
        suspect_size=len(suspect.vocab),
        reference_size=len(reference),
        suspect_base_size=suspect.vocab.base_size,
        reference_base_size=reference.base_size,
    )


@dataclass
class DriftReport:
    tensor_drift: dict[str, float]
    row_drift: dict[str, list[float]]
    added_rows: dict[str, int]
    ranked: list[tuple[str, float]]

    def to_json_dict(self) -> dict:
        return {
            "kind": "drift",
            "tensor_drift": self.tensor_drift,
            "row_drift": self.row_drift,
            "added_rows": self.added_rows,
            "ranked": [[name, value] for name, value in self.ranked],
        }


def _relative_drift(suspect: np.ndarray, reference: np.ndarray, eps: float = 1e-12) -> float:
    return float(
        np.linalg.norm(suspect - reference) / (np.linalg.norm(reference) + eps)
    )


def weight_drift(suspect: ModelBundle, reference: ModelBundle) -> DriftReport:
    """Relative Frobenius drift per tensor, plus per-row drift for embeddings.

    Embedding-table tensors may have grown in the suspect; common rows are
    compared and extra rows are counted separately. Any other name or shape
    mismatch is an error.
    """
    suspect_names = set(suspect.params.names())
    reference_names = set(reference.params.names())
    if suspect_names != reference_names:
        raise ValueError(
            f"tensor name mismatch: only-suspect={sorted(suspect_names - reference_names)}, "
            f"only-reference={sorted(reference_names - suspect_names)}"
        )
    tensor_drift: dict[str, float] = {}
    row_drift: dict[str, list[float]] = {}
    added_rows: dict[str, int] = {}
    for name in sorted(suspect_names):
        s = suspect.params.value(name)
        r = reference.params.value(name)
        if name in ROW_TENSORS:
            if s.ndim != 2 or r.ndim != 2 or s.shape[1] != r.shape[1] or s.shape[0] < r.shape[0]:
                raise ValueError(f"incompatible embedding shapes for {name}: {s.shape} vs {r.shape}")
            common = r.shape[0]
            tensor_drift[name] = _relative_drift(s[:common], r) if common else 0.0
            row_drift[name] = [
                float(np.linalg.norm(s[i] - r[i]) / (np.linalg.norm(r[i]) + 1e-12))
                for i in range(common)
            ]
            if s.shape[0] > common:
                added_rows[name] = s.shape[0] - common
        else:
            if s.shape != r.shape:
                raise ValueError(f"shape mismatch for {name}: {s.shape} vs {r.shape}")
            tensor_drift[name] = _relative_drift(s, r)
    ranked = sorted(tensor_drift.items(), key=lambda kv: kv[1], reverse=True)
    return DriftReport(
        tensor_drift=tensor_drift, row_drift=row_drift, added_rows=added_rows, ranked=ranked
    )


@dataclass
class ProbeResult:
    identifier: str
    expected_category: str
    score: float
    histogram: dict[str, int]

    def to_json_dict(self) -> dict:
        return {
            "identifier": self.identifier,
            "expected_category": self.expected_category,
            "score": self.score,
            "histogram": self.histogram,
        }


@dataclass
class ProbeReport:
    results: list[ProbeResult]
    probes_used: int
    n_per_candidate: int

    def to_json_dict(self) -> dict:
        return {
            "kind": "probe",
            "results": [r.to_json_dict() for r in self.results],
            "probes_used": self.probes_used,
            "n_per_candidate": self.n_per_candidate,
        }


def probe_triggers(
    bundle: ModelBundle,
    candidates: list[str],
    oracle: Oracle,
    n: int,
    expected_categories: list[str],
    template: str = "a photo of a {} on a road",
    seed: int = 0,
    budget: int | None = None,
) -> ProbeReport:
    """Brute-force trigger search over candidate identifiers.

    Each candidate is dropped into the prompt template, n images are
    generated, and the suspicion score is the total-variation distance
    between the produced category distribution and a point mass on the
    candidate's literal class: 1 - (fraction classified as expected).
    Results come back sorted, most suspicious first.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if len(candidates) != len(expected_categories):
        raise ValueError("candidates and expected_categories must be parallel lists")
    needed = len(candidates) * n
    if budget is not None and needed > budget:
        raise BudgetError(f"probing needs {needed} generations, budget is {budget}")
    require_oracle_gate(oracle)
    results = []
    for i, (candidate, expected) in enumerate(zip(candidates, expected_categories)):
        expected_idx = oracle.category_index(expected)
        images = sample(bundle, template.format(candidate), n, stream_key(seed, "probe", i))
        predictions = oracle_logits(oracle, images).argmax(axis=1)
        histogram = {
            c: int((predictions == j).sum()) for j, c in enumerate(oracle.categories)
        }
        score = 1.0 - histogram[oracle.categories[expected_idx]] / n
        results.append(
            ProbeResult(
                identifier=candidate,
                expected_category=expected,
                score=float(score),
                histogram=histogram,
            )
        )
    results.sort(key=lambda r: (-r.score, r.identifier))
    return ProbeReport(results=results, probes_used=needed, n_per_candidate=n)
