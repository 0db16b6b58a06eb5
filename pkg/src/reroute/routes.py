"""Route analytics: similarity search, score dispersion, policy evolution.

A route matrix flattens every per-iteration score vector of every routed
stage into one row per sample; L1 geometry over those rows is what the
neighbor and class-separation tools operate on.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import AnalysisError
from .reset import RouteRecord


@dataclass
class RouteMatrix:
    matrix: np.ndarray                 # [N, D] concatenated score vectors
    sample_ids: np.ndarray             # [N]
    labels: np.ndarray                 # [N]
    layout: List[Tuple[int, int, int]]  # (stage_index, iterations, options)

    def __post_init__(self):
        if self.matrix.ndim != 2:
            raise AnalysisError(f"route matrix must be 2-d, got shape {self.matrix.shape}")
        if len(self.sample_ids) != len(self.matrix) or len(self.labels) != len(self.matrix):
            raise AnalysisError("sample ids / labels length mismatch with matrix rows")

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    def row_of(self, sample_id: int) -> int:
        hits = np.nonzero(self.sample_ids == sample_id)[0]
        if hits.size == 0:
            raise AnalysisError(f"sample id {sample_id} not present")
        return int(hits[0])


def route_matrix_from_record(route: RouteRecord, labels: np.ndarray,
                             sample_ids: Optional[np.ndarray] = None) -> RouteMatrix:
    mat = route.to_matrix()
    ids = np.arange(mat.shape[0]) if sample_ids is None else np.asarray(sample_ids)
    layout = [(s.stage_index, len(s.iterations), s.n_options) for s in route.stages]
    return RouteMatrix(mat, ids, np.asarray(labels), layout)


def manhattan_neighbors(routes: RouteMatrix, query: int, top: int = 5) -> List[Tuple[int, float]]:
    """Closest sample ids by L1 distance over route vectors, query excluded.

    Ties break toward the smaller sample id.
    """
    qi = routes.row_of(query)
    d = np.abs(routes.matrix - routes.matrix[qi]).sum(axis=1)
    mask = routes.sample_ids != query
    ids = routes.sample_ids[mask]
    dist = d[mask]
    order = np.lexsort((ids, dist))[:top]
    return [(int(ids[i]), float(dist[i])) for i in order]


def score_std(routes: RouteMatrix) -> np.ndarray:
    """Population standard deviation of every route-vector component."""
    return routes.matrix.std(axis=0)


def class_route_separation(routes: RouteMatrix, pairs: int = 10000, seed: int = 0) -> dict:
    """Mean within-class vs between-class L1 distance over sampled pairs."""
    labels = routes.labels
    classes = np.unique(labels)
    if classes.size < 2:
        raise AnalysisError("class separation needs at least two classes")
    rng = np.random.default_rng(seed)
    by_class = {c: np.nonzero(labels == c)[0] for c in classes}
    eligible = [c for c in classes if by_class[c].size >= 2]
    if not eligible:
        raise AnalysisError("no class has two or more samples")

    intra = np.empty(pairs)
    for k in range(pairs):
        c = eligible[rng.integers(len(eligible))]
        i, j = rng.choice(by_class[c], size=2, replace=False)
        intra[k] = np.abs(routes.matrix[i] - routes.matrix[j]).sum()
    inter = np.empty(pairs)
    for k in range(pairs):
        ca, cb = rng.choice(classes, size=2, replace=False)
        i = rng.choice(by_class[ca])
        j = rng.choice(by_class[cb])
        inter[k] = np.abs(routes.matrix[i] - routes.matrix[j]).sum()
    intra_m, inter_m = float(intra.mean()), float(inter.mean())
    if inter_m == 0:
        raise AnalysisError("between-class distance is zero; ratio undefined")
    return {"intra_class_mean_l1": intra_m, "inter_class_mean_l1": inter_m,
            "ratio": intra_m / inter_m}


# ------------------------------------------------------------------ exports


def write_policy_csv(path, rows: Sequence[tuple]) -> None:
    """Rows are (step, stage, iteration, unit, mean_score)."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "stage", "iteration", "unit", "mean_score"])
        for r in rows:
            w.writerow(list(r))


def export_routes_jsonl(path, route: RouteRecord, labels: np.ndarray,
                        sample_ids: Optional[np.ndarray] = None) -> int:
    """One JSON line per (sample, stage, iteration); returns the line count."""
    n = route.n_samples
    ids = np.arange(n) if sample_ids is None else np.asarray(sample_ids)
    lines = 0
    with open(path, "w") as f:
        for s in route.stages:
            sampled = s.sampled_array()
            weights = s.weights_array()
            for j in range(weights.shape[1]):
                for i in range(n):
                    sel = None if sampled is None else int(sampled[i, j])
                    skipped = (s.zero_index is not None and sel == s.zero_index)
                    rec = {
                        "sample_id": int(ids[i]),
                        "label": int(labels[i]),
                        "stage": int(s.stage_index),
                        "iteration": int(j),
                        "weights": [round(float(v), 6) for v in weights[i, j]],
                        "selected": sel,
                        "skipped": bool(skipped),
                    }
                    f.write(json.dumps(rec) + "\n")
                    lines += 1
    return lines
