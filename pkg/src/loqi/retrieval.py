"""Descriptor extraction, exact nearest-neighbor search, Recall@N, and
delta reports between configurations.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import cv2
import numpy as np
import torch

from .datamodel import DatasetManifest, DescriptorDB, geodesic_distance
from .errors import ValidationError
from .modeladapter import ExtractorHandle

DEFAULT_NS = (1, 2, 5, 10)


def extract_descriptors(handle: ExtractorHandle, manifest: DatasetManifest) -> DescriptorDB:
    """One L2-normalized descriptor per manifest record."""
    unreadable = [r.id for r in manifest.records
                  if cv2.imread(r.path, cv2.IMREAD_COLOR) is None]
    if unreadable:
        raise ValidationError(f"unreadable images: {', '.join(unreadable)}")
    db = DescriptorDB(manifest_ref=manifest.name, dim=handle.descriptor_dim,
                      normalized=True)
    with torch.no_grad():
        for r in manifest.records:
            img = cv2.imread(r.path, cv2.IMREAD_COLOR)
            v = handle.describe(img).detach().cpu().numpy().astype(np.float32)
            norm = float(np.linalg.norm(v))
            if norm == 0.0:
                raise ValidationError(f"zero descriptor for record {r.id!r}")
            db.add(r.id, v / norm)
    return db


@dataclass(frozen=True)
class RetrievalResult:
    query_id: str
    ranked_db_ids: tuple[str, ...]
    distances: tuple[float, ...]

    def __post_init__(self):
        if list(self.distances) != sorted(self.distances):
            raise ValidationError("distances must be non-decreasing")
        if len(set(self.ranked_db_ids)) != len(self.ranked_db_ids):
            raise ValidationError("ranked ids must be unique")


def knn_search(query_db: DescriptorDB, database_db: DescriptorDB,
               n: int) -> list[RetrievalResult]:
    """Exact top-n by Euclidean distance; ties break by database id order."""
    if query_db.dim != database_db.dim:
        raise ValidationError(
            f"dimension mismatch: queries {query_db.dim}, database {database_db.dim}")
    if len(database_db) == 0:
        raise ValidationError("database is empty")
    if n > len(database_db):
        raise ValidationError(f"n={n} exceeds database size {len(database_db)}")
    db_ids, db_mat = database_db.matrix()
    results = []
    for qid in sorted(query_db.entries):
        q = query_db.entries[qid]
        d = np.linalg.norm(db_mat - q[None, :], axis=1)
        # db_ids is lexicographically sorted, so stable sort on distance
        # breaks ties by id
        order = np.argsort(d, kind="stable")[:n]
        results.append(RetrievalResult(
            query_id=qid,
            ranked_db_ids=tuple(db_ids[i] for i in order),
            distances=tuple(float(d[i]) for i in order)))
    return results


@dataclass(frozen=True)
class RecallReport:
    dataset: str
    threshold: float
    recall: dict      # N -> percentage
    config_label: str = ""

    def __post_init__(self):
        ns = sorted(self.recall)
        vals = [self.recall[n] for n in ns]
        if any(not 0.0 <= v <= 100.0 for v in vals):
            raise ValidationError("recall values must lie in [0, 100]")
        if any(a > b + 1e-9 for a, b in zip(vals, vals[1:])):
            raise ValidationError("recall must be non-decreasing in N")


def recall_at_n(results: list[RetrievalResult], query_manifest: DatasetManifest,
                db_manifest: DatasetManifest, threshold: float = 25.0,
                ns=DEFAULT_NS, config_label: str = "") -> RecallReport:
    """Percentage of queries with a correct match among the top N.

    A retrieved database image counts as correct when its pose lies
    within the threshold of the query's pose.
    """
    q_poses = {r.id: r.pose for r in query_manifest.records}
    db_poses = {r.id: r.pose for r in db_manifest.records}
    if not results:
        raise ValidationError("no retrieval results to score")
    ns = sorted(ns)
    hits = {n: 0 for n in ns}
    for res in results:
        if res.query_id not in q_poses:
            raise ValidationError(f"no pose for query {res.query_id!r}")
        q_pose = q_poses[res.query_id]
        within = []
        for db_id in res.ranked_db_ids[:max(ns)]:
            if db_id not in db_poses:
                raise ValidationError(f"no pose for database image {db_id!r}")
            within.append(geodesic_distance(q_pose, db_poses[db_id]) <= threshold)
        if not any(
                geodesic_distance(q_pose, p) <= threshold for p in db_poses.values()):
            raise ValidationError(
                f"query {res.query_id!r} has no database image within "
                f"{threshold}; ground truth is empty")
        for n in ns:
            if any(within[:n]):
                hits[n] += 1
    total = len(results)
    return RecallReport(
        dataset=query_manifest.name, threshold=threshold,
        recall={n: 100.0 * hits[n] / total for n in ns},
        config_label=config_label)


def delta_report(baseline: RecallReport, treated: RecallReport) -> dict:
    """Signed treated-minus-baseline recall change per N."""
    if baseline.dataset != treated.dataset:
        raise ValidationError(
            f"dataset mismatch: {baseline.dataset!r} vs {treated.dataset!r}")
    if baseline.threshold != treated.threshold:
        raise ValidationError("threshold mismatch between reports")
    if set(baseline.recall) != set(treated.recall):
        raise ValidationError("reports cover different N values")
    return {n: treated.recall[n] - baseline.recall[n] for n in sorted(baseline.recall)}


def format_recall(report: RecallReport) -> str:
    ns = sorted(report.recall)
    head = f"# dataset={report.dataset} threshold={report.threshold:g} config={report.config_label}\n"
    rows = "".join(f"R@{n}\t{report.recall[n]:.2f}\n" for n in ns)
    return head + rows


def format_delta(deltas: dict) -> str:
    return "".join(f"R@{n}\t{deltas[n]:+.2f}\n" for n in sorted(deltas))
