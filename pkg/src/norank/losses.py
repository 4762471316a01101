"""Triplet objective, embedding regularizers and locality terms.

Every loss returns its value together with the gradient with respect to the
embedding matrix ``Z`` (rows are samples).  Reductions run in a fixed order
so repeated evaluations are bitwise identical.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

logger = logging.getLogger(__name__)

MAX_GLOBAL_PAIRS_PER_SAMPLE = 20


@dataclass(frozen=True)
class LossConfig:
    margin: float = 2.0
    lambda_div: float = 0.1
    lambda_uniform: float = 0.1
    lambda_local: float = 0.01
    lambda_global: float = 0.01
    k: int = 10
    delta_local: float = 0.5
    delta_global: float = 1.0

    def __post_init__(self):
        if self.margin <= 0:
            raise ValueError("margin must be positive")
        if self.delta_local <= 0 or self.delta_global <= 0:
            raise ValueError("locality thresholds must be positive")
        if self.k < 1:
            raise ValueError("neighborhood size k must be >= 1")
        for name in ("lambda_div", "lambda_uniform", "lambda_local", "lambda_global"):
            value = getattr(self, name)
            if not np.isfinite(value) or value < 0:
                raise ValueError(f"{name} must be finite and non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "LossConfig":
        return cls(**data)


@dataclass(frozen=True)
class LossBreakdown:
    triplet: float
    diversity: float
    uniformity: float
    local: float
    global_: float
    total: float

    def as_row(self) -> dict:
        return {"triplet": self.triplet, "diversity": self.diversity,
                "uniformity": self.uniformity, "local": self.local,
                "global": self.global_, "total": self.total}


def triplet_loss(z, triplets, margin: float):
    """Hinge triplet loss summed over ``triplets`` (an ``(m, 3)`` index array).

    A triplet is active when ``|a-p|^2 - |a-n|^2 + margin > 0``; triplets
    exactly on the boundary contribute neither loss nor gradient.

    Returns
    -------
    value : float
    grad : ndarray, same shape as ``z``
    """
    z = np.asarray(z, dtype=np.float64)
    grad = np.zeros_like(z)
    t = np.asarray(triplets, dtype=np.int64).reshape(-1, 3)
    if t.shape[0] == 0:
        return 0.0, grad
    za, zp, zn = z[t[:, 0]], z[t[:, 1]], z[t[:, 2]]
    d_ap = np.sum((za - zp) ** 2, axis=1)
    d_an = np.sum((za - zn) ** 2, axis=1)
    hinge = d_ap - d_an + margin
    active = hinge > 0
    value = float(np.sum(hinge[active]))
    ta = t[active]
    za, zp, zn = za[active], zp[active], zn[active]
    np.add.at(grad, ta[:, 0], 2.0 * (zn - zp))
    np.add.at(grad, ta[:, 1], 2.0 * (zp - za))
    np.add.at(grad, ta[:, 2], 2.0 * (za - zn))
    return value, grad


@dataclass
class RegularizerResult:
    diversity: float
    uniformity: float
    grad_diversity: np.ndarray
    grad_uniformity: np.ndarray
    constant_columns: tuple[int, ...] = ()


def diversity_penalty(z):
    """Mean absolute off-diagonal column correlation of ``z`` and its gradient.

    Columns are centered and scaled to unit norm before forming ``C = Zn^T Zn``
    so the penalty lies in [0, 1].  A constant column has no correlation;
    it counts as perfectly correlated with every other column, gets zero
    gradient, and is reported in the third return value.
    """
    z = np.asarray(z, dtype=np.float64)
    n, d = z.shape
    if d < 2:
        raise ValueError("diversity needs at least two embedding dimensions")
    zc = z - z.mean(axis=0)
    norms = np.linalg.norm(zc, axis=0)
    scale = np.max(np.abs(z)) if z.size else 0.0
    const = norms <= 1e-12 * max(scale, 1.0) * np.sqrt(n)
    safe = np.where(const, 1.0, norms)
    zn = zc / safe
    zn[:, const] = 0.0
    c = zn.T @ zn
    absc = np.abs(c)
    absc[const, :] = 1.0
    absc[:, const] = 1.0
    np.fill_diagonal(absc, 0.0)
    denom = d * (d - 1)
    value = float(absc.sum() / denom)

    g_c = np.sign(c) / denom
    np.fill_diagonal(g_c, 0.0)
    g_c[const, :] = 0.0
    g_c[:, const] = 0.0
    g_zn = 2.0 * zn @ g_c
    # through unit-norm scaling: (I - u u^T) g / ||zc|| per column
    g_zc = (g_zn - zn * np.sum(zn * g_zn, axis=0)) / safe
    g_zc[:, const] = 0.0
    grad = g_zc - g_zc.mean(axis=0)
    flagged = tuple(int(i) for i in np.flatnonzero(const))
    if flagged:
        logger.debug("constant embedding columns %s treated as fully correlated", flagged)
    return value, grad, flagged


def uniformity_loss(z):
    """``log mean_{i != j} exp(-2 |z_i - z_j|^2)`` over ordered pairs, and its gradient."""
    z = np.asarray(z, dtype=np.float64)
    n = z.shape[0]
    if n < 2:
        raise ValueError("uniformity needs at least two embeddings")
    sq = np.sum(z * z, axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * z @ z.T, 0.0)
    kern = np.exp(-2.0 * d2)
    np.fill_diagonal(kern, 0.0)
    total = kern.sum()
    value = float(np.log(total / (n * (n - 1))))
    # d/dz_i of sum_{j != i} (e_ij + e_ji) = -8 sum_j e_ij (z_i - z_j)
    w = kern / total
    grad = -8.0 * (w.sum(axis=1)[:, None] * z - w @ z)
    return value, grad


def regularizers(z) -> RegularizerResult:
    div, g_div, const = diversity_penalty(z)
    unif, g_unif = uniformity_loss(z)
    return RegularizerResult(div, unif, g_div, g_unif, const)


def original_neighbors(x, k: int) -> list[np.ndarray]:
    """Indices of the ``k`` nearest neighbors of each row of ``x`` (self excluded).

    Ties are broken by the smaller sample index.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if k >= n:
        raise ValueError(f"k={k} must be smaller than the number of samples {n}")
    sq = np.sum(x * x, axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * x @ x.T, 0.0)
    np.fill_diagonal(d2, np.inf)
    order = np.argsort(d2, axis=1, kind="stable")
    return [order[i, :k].copy() for i in range(n)]


@dataclass
class LocalityResult:
    local: float
    global_: float
    grad_local: np.ndarray
    grad_global: np.ndarray
    global_pairs: int
    global_pairs_total: int


def locality_losses(z, neighbors, delta_local: float, delta_global: float, seed: int = 0,
                    max_pairs_per_sample: int = MAX_GLOBAL_PAIRS_PER_SAMPLE) -> LocalityResult:
    """Local-consistency and global-separation hinge losses.

    ``neighbors[i]`` lists the original-space neighbors of sample ``i`` as
    indices into ``z``.  The local term sums ``[|z_i - z_j|^2 - delta_local]_+``
    over those ordered pairs.  The global term sums
    ``[delta_global - |z_i - z_j|^2]_+`` over ordered non-neighbor pairs
    ``i != j``; when there are more than ``max_pairs_per_sample * n`` of
    them, a seeded uniform subsample is drawn without replacement and the
    sum is rescaled by (total pairs / sampled pairs).
    """
    z = np.asarray(z, dtype=np.float64)
    n = z.shape[0]
    if len(neighbors) != n:
        raise ValueError(f"need one neighbor list per sample ({n}), got {len(neighbors)}")
    rows, cols = [], []
    for i, nb in enumerate(neighbors):
        nb = np.asarray(nb, dtype=np.int64)
        if nb.size >= n:
            raise ValueError(f"k={nb.size} neighbors requested with only {n} samples")
        if nb.size and (nb.min() < 0 or nb.max() >= n or np.any(nb == i)):
            raise ValueError(f"invalid neighbor indices for sample {i}")
        rows.append(np.full(nb.size, i, dtype=np.int64))
        cols.append(nb)
    ni = np.concatenate(rows) if rows else np.zeros(0, dtype=np.int64)
    nj = np.concatenate(cols) if cols else np.zeros(0, dtype=np.int64)

    grad_local = np.zeros_like(z)
    diff = z[ni] - z[nj]
    d2 = np.sum(diff * diff, axis=1)
    hinge = d2 - delta_local
    act = hinge > 0
    local = float(np.sum(hinge[act]))
    np.add.at(grad_local, ni[act], 2.0 * diff[act])
    np.add.at(grad_local, nj[act], -2.0 * diff[act])

    mask = ~np.eye(n, dtype=bool)
    mask[ni, nj] = False
    pi, pj = np.nonzero(mask)
    total_pairs = int(pi.size)
    cap = max_pairs_per_sample * n
    weight = 1.0
    if total_pairs > cap:
        rng = np.random.default_rng(seed)
        pick = np.sort(rng.choice(total_pairs, size=cap, replace=False))
        pi, pj = pi[pick], pj[pick]
        weight = total_pairs / cap
    grad_global = np.zeros_like(z)
    diff = z[pi] - z[pj]
    d2 = np.sum(diff * diff, axis=1)
    hinge = delta_global - d2
    act = hinge > 0
    global_ = float(weight * np.sum(hinge[act]))
    np.add.at(grad_global, pi[act], -2.0 * weight * diff[act])
    np.add.at(grad_global, pj[act], 2.0 * weight * diff[act])
    return LocalityResult(local, global_, grad_local, grad_global, int(pi.size), total_pairs)


def total_loss(z, triplets, neighbors, cfg: LossConfig, seed: int = 0):
    """Weighted objective ``triplet + l1 div + l2 unif + l3 local + l4 global``.

    Terms whose weight is zero are skipped entirely (their preconditions are
    not checked).  ``neighbors`` may be ``None`` when both locality weights
    are zero.

    Returns
    -------
    breakdown : LossBreakdown
    grad : ndarray, same shape as ``z``
    """
    z = np.asarray(z, dtype=np.float64)
    trip, grad = triplet_loss(z, triplets, cfg.margin)
    grad = grad.copy()
    div = unif = local = glob = 0.0
    if cfg.lambda_div > 0:
        div, g, _ = diversity_penalty(z)
        grad += cfg.lambda_div * g
    if cfg.lambda_uniform > 0:
        unif, g = uniformity_loss(z)
        grad += cfg.lambda_uniform * g
    if cfg.lambda_local > 0 or cfg.lambda_global > 0:
        if neighbors is None:
            raise ValueError("locality terms need original-space neighbor lists")
        loc = locality_losses(z, neighbors, cfg.delta_local, cfg.delta_global, seed=seed)
        local, glob = loc.local, loc.global_
        grad += cfg.lambda_local * loc.grad_local + cfg.lambda_global * loc.grad_global
    total = (trip + cfg.lambda_div * div + cfg.lambda_uniform * unif
             + cfg.lambda_local * local + cfg.lambda_global * glob)
    return LossBreakdown(trip, div, unif, local, glob, total), grad
