"""Clustering, label-agreement and neighborhood-preservation metrics.

All distances are Euclidean.  Every function here is a pure function of its
inputs; K-Means is the only randomized routine and takes an explicit seed.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

DEFAULT_K_NEIGHBORS = 10
TABLE_COLUMNS = ("Sil.", "DB", "CH", "SR", "Cont.", "Trust.", "ARI", "NMI")


@dataclass(frozen=True)
class MetricsReport:
    silhouette: float
    davies_bouldin: float
    calinski_harabasz: float
    separation_ratio: float
    continuity: float
    trustworthiness: float
    ari: float
    nmi: float
    k_neighbors: int = DEFAULT_K_NEIGHBORS

    def table_values(self) -> tuple[float, ...]:
        """Scores in table column order: Sil, DB, CH, SR, Cont., Trust., ARI, NMI."""
        return (self.silhouette, self.davies_bouldin, self.calinski_harabasz,
                self.separation_ratio, self.continuity, self.trustworthiness,
                self.ari, self.nmi)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ClusterAssignment:
    labels: np.ndarray
    centroids: np.ndarray
    inertia: float


def pairwise_distances(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    sq = np.sum(x * x, axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * x @ x.T, 0.0)
    np.fill_diagonal(d2, 0.0)
    return np.sqrt(d2)


def _as_points(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x[:, None] if x.ndim == 1 else x


def _dense_labels(labels):
    _, inverse = np.unique(np.asarray(labels), return_inverse=True)
    return inverse.reshape(-1)


def _sq_dist_to(x, centers):
    return np.maximum(
        np.sum(x * x, axis=1)[:, None] + np.sum(centers * centers, axis=1)[None, :]
        - 2.0 * x @ centers.T, 0.0)


def _kmeans_pp(x, k, rng):
    n = x.shape[0]
    centers = [x[rng.integers(n)]]
    closest = _sq_dist_to(x, np.asarray(centers))[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        centers.append(x[idx])
        closest = np.minimum(closest, _sq_dist_to(x, x[idx][None, :])[:, 0])
    return np.asarray(centers)


def kmeans(x, k: int, seed: int = 0, restarts: int = 10, max_iter: int = 300,
           tol: float = 1e-10) -> ClusterAssignment:
    """Lloyd's algorithm with k-means++ seeding; best of ``restarts`` by inertia.

    A cluster that empties during an update is re-seeded at the point
    farthest from its current center.
    """
    x = _as_points(x)
    n = x.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k={k} must lie in [1, n={n}]")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(max(1, restarts)):
        centers = _kmeans_pp(x, k, rng)
        for _ in range(max_iter):
            d2 = _sq_dist_to(x, centers)
            assign = np.argmin(d2, axis=1)
            new = centers.copy()
            for c in range(k):
                members = assign == c
                if members.any():
                    new[c] = x[members].mean(axis=0)
                else:
                    far = int(np.argmax(d2[np.arange(n), assign]))
                    new[c] = x[far]
                    assign[far] = c
            shift = float(np.max(np.sum((new - centers) ** 2, axis=1)))
            centers = new
            if shift <= tol:
                break
        d2 = _sq_dist_to(x, centers)
        assign = np.argmin(d2, axis=1)
        inertia = float(np.sum(d2[np.arange(n), assign]))
        if best is None or inertia < best.inertia:
            best = ClusterAssignment(assign, centers, inertia)
    return best


def silhouette(x, labels, dist=None) -> float:
    """Mean silhouette; members of singleton clusters score 0."""
    x = _as_points(x)
    lab = _dense_labels(labels)
    k = lab.max() + 1 if lab.size else 0
    if k < 2:
        raise ValueError("silhouette needs at least two clusters")
    d = pairwise_distances(x) if dist is None else dist
    onehot = np.eye(k)[lab]
    counts = onehot.sum(axis=0)
    sums = d @ onehot  # (n, k) total distance to each cluster
    own = counts[lab]
    a = np.where(own > 1, sums[np.arange(lab.size), lab] / np.maximum(own - 1, 1), 0.0)
    mean_other = sums / counts
    mean_other[np.arange(lab.size), lab] = np.inf
    b = mean_other.min(axis=1)
    denom = np.maximum(a, b)
    s = np.where(denom > 0, (b - a) / np.where(denom > 0, denom, 1.0), 0.0)
    s[own == 1] = 0.0
    return float(s.mean())


def davies_bouldin(x, labels) -> float:
    x = _as_points(x)
    lab = _dense_labels(labels)
    k = lab.max() + 1
    if k < 2:
        raise ValueError("Davies-Bouldin needs at least two clusters")
    cent = np.stack([x[lab == c].mean(axis=0) for c in range(k)])
    sigma = np.array([np.mean(np.linalg.norm(x[lab == c] - cent[c], axis=1)) for c in range(k)])
    # direct differences: the Gram-matrix shortcut loses digits for close centroids
    cd = np.linalg.norm(cent[:, None, :] - cent[None, :, :], axis=2)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = (sigma[:, None] + sigma[None, :]) / cd
    ratio[cd == 0] = np.inf
    np.fill_diagonal(ratio, -np.inf)
    return float(np.mean(ratio.max(axis=1)))


def calinski_harabasz(x, labels) -> float:
    x = _as_points(x)
    lab = _dense_labels(labels)
    n, k = lab.size, lab.max() + 1
    if k < 2:
        raise ValueError("Calinski-Harabasz needs at least two clusters")
    if n == k:
        raise ValueError("Calinski-Harabasz needs more samples than clusters")
    mean = x.mean(axis=0)
    between = within = 0.0
    for c in range(k):
        members = x[lab == c]
        cent = members.mean(axis=0)
        between += members.shape[0] * float(np.sum((cent - mean) ** 2))
        within += float(np.sum((members - cent) ** 2))
    if within == 0.0:
        return math.inf
    return between / within * (n - k) / (k - 1)


def internal_metrics(x, labels) -> tuple[float, float, float]:
    """(silhouette, Davies-Bouldin, Calinski-Harabasz) of a labeling of ``x``."""
    return silhouette(x, labels), davies_bouldin(x, labels), calinski_harabasz(x, labels)


def contingency(true, pred) -> np.ndarray:
    t, p = _dense_labels(true), _dense_labels(pred)
    table = np.zeros((t.max() + 1, p.max() + 1), dtype=np.int64)
    np.add.at(table, (t, p), 1)
    return table


def adjusted_rand_index(true, pred) -> float:
    table = contingency(true, pred)
    n = int(table.sum())
    if n < 2:
        raise ValueError("ARI needs at least two samples")

    def comb2(v):
        v = np.asarray(v, dtype=np.float64)
        return v * (v - 1) / 2.0

    index = comb2(table).sum()
    sum_a = comb2(table.sum(axis=1)).sum()
    sum_b = comb2(table.sum(axis=0)).sum()
    expected = sum_a * sum_b / comb2(n)
    max_index = 0.5 * (sum_a + sum_b)
    if max_index == expected:
        # both partitions trivial (all-in-one or all singletons) and identical in kind
        return 1.0
    return float((index - expected) / (max_index - expected))


def normalized_mutual_info(true, pred) -> float:
    """``2 I(Y; Y_hat) / (H(Y) + H(Y_hat))`` with natural logarithms."""
    table = contingency(true, pred).astype(np.float64)
    n = table.sum()
    if n < 2:
        raise ValueError("NMI needs at least two samples")
    pij = table / n
    pi = pij.sum(axis=1)
    pj = pij.sum(axis=0)
    nz = pij > 0
    mi = float(np.sum(pij[nz] * np.log(pij[nz] / np.outer(pi, pj)[nz])))
    h_true = float(-np.sum(pi[pi > 0] * np.log(pi[pi > 0])))
    h_pred = float(-np.sum(pj[pj > 0] * np.log(pj[pj > 0])))
    if h_true + h_pred == 0.0:
        return 1.0
    return float(min(max(2.0 * mi / (h_true + h_pred), 0.0), 1.0))


def external_metrics(true, pred) -> tuple[float, float]:
    """(ARI, NMI) between true labels and predicted clusters."""
    if len(true) != len(pred):
        raise ValueError("label vectors differ in length")
    return adjusted_rand_index(true, pred), normalized_mutual_info(true, pred)


def separation_ratio(z, labels) -> float:
    """Mean inter-class distance over mean intra-class distance.

    Returns ``inf`` when every same-class pair coincides (collapsed classes).
    """
    z = _as_points(z)
    labels = np.asarray(labels)
    d = pairwise_distances(z)
    iu = np.triu_indices(labels.size, k=1)
    same = (labels[:, None] == labels[None, :])[iu]
    if not same.any():
        raise ValueError("separation ratio needs at least one same-class pair")
    if same.all():
        raise ValueError("separation ratio needs at least two classes")
    dist = d[iu]
    intra = float(dist[same].mean())
    inter = float(dist[~same].mean())
    if intra == 0.0:
        return math.inf
    return inter / intra


def _rank_matrix(x) -> np.ndarray:
    """``ranks[i, j]`` = neighbor rank of j around i (1 = nearest), self = 0.

    Equal distances are ranked by sample index.
    """
    d = pairwise_distances(x)
    n = d.shape[0]
    np.fill_diagonal(d, -np.inf)
    order = np.argsort(d, axis=1, kind="stable")
    ranks = np.empty((n, n), dtype=np.int64)
    rows = np.arange(n)[:, None]
    ranks[rows, order] = np.arange(n)[None, :]
    return ranks


def neighborhood_metrics(x_original, x_embedded, k: int = DEFAULT_K_NEIGHBORS
                         ) -> tuple[float, float]:
    """(trustworthiness, continuity) at neighborhood size ``k``.

    Trustworthiness penalizes embedding neighbors that are not original
    neighbors by their original rank beyond ``k``; continuity penalizes
    original neighbors missing from the embedding neighborhood by their
    embedding rank beyond ``k``.  Both use the normalizer
    ``2 / (n k (2n - 3k - 1))``.
    """
    xo, xe = _as_points(x_original), _as_points(x_embedded)
    n = xo.shape[0]
    if xe.shape[0] != n:
        raise ValueError("both spaces need the same number of points")
    if k < 1 or 2 * k >= n:
        raise ValueError(f"need 1 <= k and 2k < n (k={k}, n={n})")
    r_o, r_e = _rank_matrix(xo), _rank_matrix(xe)
    in_o = (r_o >= 1) & (r_o <= k)
    in_e = (r_e >= 1) & (r_e <= k)
    intruders = in_e & ~in_o
    missing = in_o & ~in_e
    norm = 2.0 / (n * k * (2 * n - 3 * k - 1))
    trust = 1.0 - norm * float(np.sum((r_o - k)[intruders]))
    cont = 1.0 - norm * float(np.sum((r_e - k)[missing]))
    return trust, cont


def distance_histograms(z, labels, bins: int = 30):
    """Histograms of intra- and inter-class pair distances on shared edges.

    Returns ``(intra_counts, inter_counts, edges)``.
    """
    if bins < 1:
        raise ValueError("bins must be >= 1")
    z = _as_points(z)
    labels = np.asarray(labels)
    iu = np.triu_indices(labels.size, k=1)
    dist = pairwise_distances(z)[iu]
    same = (labels[:, None] == labels[None, :])[iu]
    hi = float(dist.max()) if dist.size else 1.0
    edges = np.linspace(0.0, hi if hi > 0 else 1.0, bins + 1)
    intra, _ = np.histogram(dist[same], bins=edges)
    inter, _ = np.histogram(dist[~same], bins=edges)
    return intra, inter, edges


def evaluate(x_original, embedding, labels, *, n_clusters: int | None = None,
             k_neighbors: int = DEFAULT_K_NEIGHBORS, seed: int = 0,
             restarts: int = 10) -> MetricsReport:
    """Score one embedding the way the comparison tables do.

    Internal metrics and the separation ratio use the true labels; ARI and
    NMI compare K-Means clusters (k = number of classes) with the labels.
    """
    labels = np.asarray(labels)
    emb = _as_points(embedding)
    k = int(np.unique(labels).size) if n_clusters is None else n_clusters
    clusters = kmeans(emb, k, seed=seed, restarts=restarts).labels
    sil, db, ch = internal_metrics(emb, labels)
    sr = separation_ratio(emb, labels)
    trust, cont = neighborhood_metrics(x_original, emb, k_neighbors)
    ari, nmi = external_metrics(labels, clusters)
    return MetricsReport(sil, db, ch, sr, cont, trust, ari, nmi, k_neighbors)
