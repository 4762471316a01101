"""Triplet selection: semi-hard band mining, hardest-pair mining, random triplets."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

STRATEGIES = ("semi-hard", "hard", "random")


@dataclass(frozen=True)
class TripletBatch:
    triplets: np.ndarray  # (m, 3) int64 rows of (anchor, positive, negative)
    strategy: str

    def __len__(self) -> int:
        return int(self.triplets.shape[0])

    def validate(self, labels) -> None:
        """Raise if any triple breaks the label constraints."""
        labels = np.asarray(labels)
        t = self.triplets
        if t.size == 0:
            return
        a, p, n = t[:, 0], t[:, 1], t[:, 2]
        if np.any(a == p):
            raise AssertionError("anchor equals positive")
        if np.any(labels[a] != labels[p]):
            raise AssertionError("positive has a different label")
        if np.any(labels[a] == labels[n]):
            raise AssertionError("negative shares the anchor label")


def _empty(strategy: str) -> TripletBatch:
    return TripletBatch(np.zeros((0, 3), dtype=np.int64), strategy)


def _distances(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 1:
        z = z[:, None]
    sq = np.sum(z * z, axis=1)
    return np.sqrt(np.maximum(sq[:, None] + sq[None, :] - 2.0 * z @ z.T, 0.0))


def _check_labels(labels) -> np.ndarray:
    labels = np.asarray(labels)
    if np.unique(labels).size < 2:
        raise ValueError("mining needs at least two classes")
    return labels


def semi_hard_mine(z, labels, margin: float, seed: int = 0) -> TripletBatch:
    """One triple per anchor with ``d_p < |z_a - z_n| < d_p + margin``.

    Distances are Euclidean (not squared).  The positive is drawn uniformly
    from the anchor's classmates, then the negative uniformly from the band;
    anchors without a classmate or with an empty band emit nothing.
    """
    labels = _check_labels(labels)
    dist = _distances(z)
    rng = np.random.default_rng(seed)
    out = []
    idx = np.arange(labels.size)
    for a in range(labels.size):
        same = labels == labels[a]
        positives = idx[same & (idx != a)]
        if positives.size == 0:
            continue
        p = positives[rng.integers(positives.size)]
        d_p = dist[a, p]
        band = idx[(~same) & (dist[a] > d_p) & (dist[a] < d_p + margin)]
        if band.size == 0:
            continue
        out.append((a, p, band[rng.integers(band.size)]))
    if not out:
        return _empty("semi-hard")
    return TripletBatch(np.asarray(out, dtype=np.int64), "semi-hard")


def hard_mine(z, labels) -> TripletBatch:
    """Farthest positive and nearest negative for every anchor.

    Ties go to the smallest sample index.
    """
    labels = _check_labels(labels)
    dist = _distances(z)
    n = labels.size
    same = labels[:, None] == labels[None, :]
    self_mask = np.eye(n, dtype=bool)
    pos_d = np.where(same & ~self_mask, dist, -np.inf)
    neg_d = np.where(~same, dist, np.inf)
    # argmax/argmin return the first occurrence, i.e. the smallest index
    p = np.argmax(pos_d, axis=1)
    q = np.argmin(neg_d, axis=1)
    has_pos = np.isfinite(pos_d.max(axis=1))
    keep = np.flatnonzero(has_pos)
    if keep.size == 0:
        return _empty("hard")
    return TripletBatch(np.column_stack([keep, p[keep], q[keep]]).astype(np.int64), "hard")


def random_triplets(labels, count: int, seed: int = 0) -> TripletBatch:
    """``count`` uniformly drawn valid triples.

    Anchors are drawn among samples that have at least one classmate; the
    positive and negative are then drawn uniformly from the valid sets.
    """
    labels = _check_labels(labels)
    if count <= 0:
        return _empty("random")
    rng = np.random.default_rng(seed)
    idx = np.arange(labels.size)
    classes, inverse, counts = np.unique(labels, return_inverse=True, return_counts=True)
    anchors_ok = idx[counts[inverse] >= 2]
    if anchors_ok.size == 0:
        return _empty("random")
    members = [idx[inverse == c] for c in range(classes.size)]
    others = [idx[inverse != c] for c in range(classes.size)]
    out = np.empty((count, 3), dtype=np.int64)
    anchors = anchors_ok[rng.integers(anchors_ok.size, size=count)]
    for row, a in enumerate(anchors):
        c = inverse[a]
        pool = members[c]
        # draw from the pool with the anchor removed
        j = rng.integers(pool.size - 1)
        p = pool[j + 1] if j >= np.searchsorted(pool, a) else pool[j]
        neg = others[c]
        out[row] = (a, p, neg[rng.integers(neg.size)])
    return TripletBatch(out, "random")


def mine(strategy: str, z, labels, margin: float, seed: int, count: int | None = None
         ) -> TripletBatch:
    if strategy == "semi-hard":
        return semi_hard_mine(z, labels, margin, seed)
    if strategy == "hard":
        return hard_mine(z, labels)
    if strategy == "random":
        return random_triplets(labels, len(labels) if count is None else count, seed)
    raise ValueError(f"unknown mining strategy {strategy!r}; choose from {STRATEGIES}")
