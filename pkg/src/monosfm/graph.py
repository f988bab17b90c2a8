"""Correspondence graph: feature tracks from pairwise matches, pair ranking
and next-view candidate ordering."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import IndexOutOfRange

PairId = Tuple[str, str]


@dataclass
class PairMatches:
    a: str
    b: str
    matches: np.ndarray  # (M, 3): idx_a, idx_b, score
    verified: bool = True

    def __post_init__(self):
        m = np.asarray(self.matches, dtype=float).reshape(-1, 3)
        self.matches = m


def canonical_pair(a: str, b: str) -> PairId:
    return (a, b) if a <= b else (b, a)


def _dedupe(m: np.ndarray) -> np.ndarray:
    """Drop matches reusing a keypoint on either side; highest score wins,
    then lowest (idx_a, idx_b)."""
    if len(m) == 0:
        return m
    order = np.lexsort((m[:, 1], m[:, 0], -m[:, 2]))
    seen_a, seen_b, keep = set(), set(), []
    for k in order:
        ia, ib = int(m[k, 0]), int(m[k, 1])
        if ia in seen_a or ib in seen_b:
            continue
        seen_a.add(ia)
        seen_b.add(ib)
        keep.append(k)
    out = m[keep]
    return out[np.lexsort((out[:, 1], out[:, 0]))]


class _UnionFind:
    def __init__(self, n: int):
        self.parent = np.arange(n)

    def find(self, x: int) -> int:
        p = self.parent
        root = x
        while p[root] != root:
            root = p[root]
        while p[x] != root:
            p[x], x = root, p[x]
        return int(root)


@dataclass
class CorrespondenceGraph:
    keypoints: Dict[str, np.ndarray]           # image -> (N, 3) u, v, sigma_px
    pairs: Dict[PairId, np.ndarray]            # canonical pair -> (M, 3) deduped matches
    inlier_counts: Dict[PairId, int]
    score_sums: Dict[PairId, float]
    track_of: Dict[str, np.ndarray]            # image -> (N,) track id per keypoint
    tracks: Dict[int, List[Tuple[str, int]]]
    conflicts: set = field(default_factory=set)  # flagged (image, kp) nodes

    @property
    def images(self) -> List[str]:
        return sorted(self.keypoints)

    def matches_between(self, a: str, b: str) -> np.ndarray:
        """Matches oriented so column 0 indexes `a` and column 1 indexes `b`."""
        key = canonical_pair(a, b)
        m = self.pairs.get(key)
        if m is None:
            return np.zeros((0, 3))
        return m if key == (a, b) else m[:, [1, 0, 2]]

    def neighbors(self, image: str) -> List[str]:
        out = []
        for a, b in self.pairs:
            if a == image:
                out.append(b)
            elif b == image:
                out.append(a)
        return sorted(out)

    def track_length_histogram(self) -> Dict[int, int]:
        hist: Dict[int, int] = {}
        for t in self.tracks.values():
            hist[len(t)] = hist.get(len(t), 0) + 1
        return hist


def build_graph(keypoints: Dict[str, np.ndarray], pair_matches: Iterable[PairMatches]) -> CorrespondenceGraph:
    keypoints = {k: np.asarray(v, dtype=float).reshape(-1, 3) for k, v in keypoints.items()}
    merged: Dict[PairId, List[np.ndarray]] = {}
    for pm in pair_matches:
        if not pm.verified:
            continue
        for img in (pm.a, pm.b):
            if img not in keypoints:
                raise IndexOutOfRange(f"matches reference unknown image {img!r}")
        if pm.a == pm.b:
            raise IndexOutOfRange(f"self-pair {pm.a!r}")
        m = pm.matches
        if len(m):
            na, nb = len(keypoints[pm.a]), len(keypoints[pm.b])
            ia, ib = m[:, 0], m[:, 1]
            if ia.min() < 0 or ia.max() >= na or ib.min() < 0 or ib.max() >= nb:
                raise IndexOutOfRange(f"keypoint index out of range in pair ({pm.a}, {pm.b})")
            if np.any(m[:, 2] <= 0):
                raise IndexOutOfRange(f"non-positive match score in pair ({pm.a}, {pm.b})")
        key = canonical_pair(pm.a, pm.b)
        merged.setdefault(key, []).append(m if key == (pm.a, pm.b) else m[:, [1, 0, 2]])

    pairs: Dict[PairId, np.ndarray] = {}
    for key in sorted(merged):
        m = _dedupe(np.concatenate(merged[key], axis=0))
        if len(m):
            pairs[key] = m

    images = sorted(keypoints)
    offsets, total = {}, 0
    for img in images:
        offsets[img] = total
        total += len(keypoints[img])
    node_image = np.empty(total, dtype=object)
    for img in images:
        node_image[offsets[img]:offsets[img] + len(keypoints[img])] = img

    uf = _UnionFind(total)
    members: Dict[int, Dict[str, int]] = {}
    conflicts = set()
    for (a, b), m in pairs.items():
        for ia, ib, _ in m:
            na, nb = offsets[a] + int(ia), offsets[b] + int(ib)
            ra, rb = uf.find(na), uf.find(nb)
            if ra == rb:
                continue
            ma = members.get(ra, {a: int(ia)})
            mb = members.get(rb, {b: int(ib)})
            if set(ma) & set(mb):
                conflicts.add((a, int(ia)))
                conflicts.add((b, int(ib)))
                continue
            # deterministic root: the smaller node index
            root, child = (ra, rb) if ra < rb else (rb, ra)
            uf.parent[child] = root
            ma.update(mb)
            members[root] = ma
            members.pop(child, None)

    roots = np.array([uf.find(n) for n in range(total)], dtype=int)
    # track ids numbered by first appearance over the sorted node order
    _, first, inverse = np.unique(roots, return_index=True, return_inverse=True)
    rank = np.argsort(np.argsort(first))
    tid = rank[inverse]
    track_of = {img: tid[offsets[img]:offsets[img] + len(keypoints[img])] for img in images}
    tracks: Dict[int, List[Tuple[str, int]]] = {}
    for img in images:
        for kp, t in enumerate(track_of[img]):
            tracks.setdefault(int(t), []).append((img, kp))

    counts = {k: int(len(m)) for k, m in pairs.items()}
    sums = {k: float(m[:, 2].sum()) for k, m in pairs.items()}
    return CorrespondenceGraph(keypoints, pairs, counts, sums, track_of, tracks, conflicts)


def rank_init_pairs(graph: CorrespondenceGraph) -> List[PairId]:
    return sorted(graph.pairs, key=lambda k: (-graph.inlier_counts[k], -graph.score_sums[k], k))


def next_view_candidates(
    graph: CorrespondenceGraph,
    registered: Sequence[str],
    mode: str = "score_sum",
    has_point: Optional[Dict[str, np.ndarray]] = None,
) -> List[str]:
    """Unregistered images ordered by their best connection to the registered set.

    mode: "score_sum" (default), "inlier_count", or "visible_points"; the last
    needs `has_point`, a per-image boolean mask of keypoints that already carry
    a scene point.
    """
    reg = set(registered)
    scores = {}
    for c in graph.images:
        if c in reg:
            continue
        best = 0.0
        if mode == "visible_points":
            seen = set()
            for i in reg:
                m = graph.matches_between(c, i)
                if len(m) and has_point is not None and i in has_point:
                    hit = has_point[i][m[:, 1].astype(int)]
                    seen.update(m[hit, 0].astype(int).tolist())
            best = float(len(seen))
        else:
            for i in reg:
                key = canonical_pair(c, i)
                if key not in graph.pairs:
                    continue
                val = graph.score_sums[key] if mode == "score_sum" else graph.inlier_counts[key]
                best = max(best, float(val))
        scores[c] = best
    return sorted(scores, key=lambda c: (-scores[c], c))
