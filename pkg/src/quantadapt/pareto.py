"""Objective normalization, Pareto dominance, segmented filtering and 2-D
hypervolume (both objectives minimized, reference point (1, 1)).
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np

REF_POINT = (1.0, 1.0)


def normalize_objectives(loss: float, loss_max: float, bits: float, bits_max: float):
    """Divide-by-max normalization of both objectives, clamped to [0, 1]."""
    if loss_max <= 0 or bits_max <= 0:
        raise ValueError("normalization maxima must be positive")
    return (min(max(loss / loss_max, 0.0), 1.0), min(max(bits / bits_max, 0.0), 1.0))


def normalize_accuracy(acc_percent: float) -> float:
    """Accuracy-style metric (0..100, larger better) onto the minimized scale."""
    return 1.0 - acc_percent / 100.0


def pareto_front(points) -> list:
    """Non-dominated subset (minimization); exact duplicates are all retained.

    Sort-and-sweep: a point is dominated iff some point with strictly smaller
    first coordinate has second coordinate <= its own, or an equal-first-
    coordinate point has strictly smaller second coordinate.
    """
    points = list(points)
    pts = [tuple(map(float, p)) for p in points]
    if not pts:
        return []
    order = sorted(range(len(pts)), key=lambda i: pts[i])
    keep = []
    best_f2_before = np.inf  # min f2 among strictly smaller f1
    i = 0
    while i < len(order):
        f1 = pts[order[i]][0]
        group = []
        while i < len(order) and pts[order[i]][0] == f1:
            group.append(order[i])
            i += 1
        group_min_f2 = pts[group[0]][1]  # group sorted by f2 ascending
        for idx in group:
            f2 = pts[idx][1]
            if best_f2_before <= f2 or group_min_f2 < f2:
                continue
            keep.append(idx)
        best_f2_before = min(best_f2_before, group_min_f2)
    keep.sort()
    return [points[i] for i in keep]


def segment_index(f2: float, lo: float, hi: float, n_segments: int) -> int:
    """Equal-width segment of f2 over [lo, hi]; the last segment is right-closed."""
    if hi <= lo:
        return 0
    k = int((f2 - lo) / (hi - lo) * n_segments)
    return min(max(k, 0), n_segments - 1)


def segmented_filter(points, n_segments: int) -> list:
    """Union of per-segment Pareto fronts over equal-width slices of the f2 range."""
    if n_segments < 1:
        raise ValueError("need at least one segment")
    pts = list(points)
    if not pts:
        return []
    f2s = [float(p[1]) for p in pts]
    lo, hi = min(f2s), max(f2s)
    buckets: dict[int, list] = {}
    for p, f2 in zip(pts, f2s):
        buckets.setdefault(segment_index(f2, lo, hi, n_segments), []).append(p)
    out = []
    for k in sorted(buckets):
        out.extend(pareto_front(buckets[k]))
    return out


def hypervolume_2d(points, ref=REF_POINT) -> float:
    """Area dominated by the set's front, relative to the reference point.

    Points beyond the reference in any coordinate contribute nothing and are
    dropped with a warning.
    """
    r1, r2 = ref
    pts = [tuple(map(float, p)) for p in points]
    inside = [p for p in pts if p[0] <= r1 and p[1] <= r2]
    if len(inside) < len(pts):
        warnings.warn(f"dropping {len(pts) - len(inside)} point(s) beyond the reference {ref}")
    front = sorted(set(pareto_front(inside)))
    hv = 0.0
    prev_y = r2
    for x, y in front:
        hv += (r1 - x) * (prev_y - y)
        prev_y = y
    return hv


def hvi(point, front, ref=REF_POINT) -> float:
    """Marginal hypervolume contribution of one point; 0 when dominated."""
    base = hypervolume_2d(front, ref)
    return hypervolume_2d(list(front) + [tuple(point)], ref) - base


# --- evaluated-configuration archive ---


@dataclass
class ArchiveEntry:
    config_id: int
    ranks: np.ndarray          # integer ladder ranks, one per layer
    avg_bits: float
    loss: float
    snapshot_id: int           # which adapter snapshot produced `loss`

    def objectives(self, loss_max: float, bits_max: float):
        return normalize_objectives(self.loss, loss_max, self.bits_for_norm(), bits_max)

    def bits_for_norm(self) -> float:
        return self.avg_bits


@dataclass
class ParetoArchive:
    """Every evaluated configuration, plus which ones the filter retained.

    Normalization maxima are fixed when the archive is created so hypervolume
    is comparable across epochs.
    """

    loss_max: float
    bits_max: float
    n_segments: int
    ref: tuple = REF_POINT
    entries: list[ArchiveEntry] = field(default_factory=list)
    retained_ids: list[int] = field(default_factory=list)

    def add(self, ranks, avg_bits_value: float, loss: float, snapshot_id: int) -> ArchiveEntry:
        e = ArchiveEntry(
            config_id=len(self.entries),
            ranks=np.asarray(ranks, dtype=np.int64).copy(),
            avg_bits=float(avg_bits_value),
            loss=float(loss),
            snapshot_id=snapshot_id,
        )
        self.entries.append(e)
        self.retained_ids.append(e.config_id)
        return e

    def has_ranks(self, ranks) -> bool:
        key = tuple(int(r) for r in ranks)
        return any(tuple(e.ranks) == key for e in self.entries)

    def objective_points(self, entries=None) -> list[tuple[float, float]]:
        entries = self.entries if entries is None else entries
        return [e.objectives(self.loss_max, self.bits_max) for e in entries]

    def front_points(self) -> list[tuple[float, float]]:
        return pareto_front(self.objective_points())

    def hypervolume(self) -> float:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")  # clamped points sit exactly at ref
            return hypervolume_2d(self.objective_points(), self.ref)

    def refilter(self, candidate_ids: list[int]) -> list[int]:
        """Segmented-filter the given entries; store and return the retained ids."""
        cand = [self.entries[i] for i in candidate_ids]
        pts = self.objective_points(cand)
        tagged = [(p[0], p[1], e.config_id) for p, e in zip(pts, cand)]
        kept = segmented_filter(tagged, self.n_segments)
        self.retained_ids = sorted(t[2] for t in kept)
        return self.retained_ids

    def retained_entries(self) -> list[ArchiveEntry]:
        return [self.entries[i] for i in self.retained_ids]

    def to_csv(self, path) -> None:
        pts = self.objective_points()
        front = set(pareto_front(pts))
        f2s = [p[1] for p in pts]
        lo, hi = (min(f2s), max(f2s)) if f2s else (0.0, 0.0)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["config_id", "avg_bits", "loss", "f1_norm", "f2_norm",
                        "on_global_front", "segment_index"])
            for e, p in zip(self.entries, pts):
                w.writerow([
                    e.config_id,
                    repr(e.avg_bits),
                    repr(e.loss),
                    repr(p[0]),
                    repr(p[1]),
                    int(p in front),
                    segment_index(p[1], lo, hi, self.n_segments),
                ])
