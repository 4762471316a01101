"""Reference embeddings: PCA through truncated SVD, and exact t-SNE."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .tensor import truncated_svd

logger = logging.getLogger(__name__)

PERPLEXITY_TOL = 1e-4
BISECTION_STEPS = 100


class PerplexityError(RuntimeError):
    pass


@dataclass
class PcaModel:
    mean: np.ndarray
    components: np.ndarray  # (D, c), orthonormal columns
    explained_variance_ratio: np.ndarray

    def transform(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) @ self.components

    def inverse_transform(self, y) -> np.ndarray:
        return np.asarray(y, dtype=np.float64) @ self.components.T + self.mean


def pca_fit_transform(x, n_components: int) -> tuple[PcaModel, np.ndarray]:
    """Project centered ``x`` onto its ``n_components`` leading principal axes."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("PCA expects an (n, D) matrix")
    n, d = x.shape
    if not 1 <= n_components <= min(n, d):
        raise ValueError(f"n_components={n_components} out of range for {x.shape}")
    mean = x.mean(axis=0)
    xc = x - mean
    total = float(np.sum(xc * xc))
    if total == 0.0:
        comps = np.eye(d, n_components)
        ratio = np.zeros(n_components)
    else:
        _, s, v = truncated_svd(xc, n_components)
        comps = v
        ratio = s * s / total
    model = PcaModel(mean, comps, ratio)
    return model, xc @ comps


@dataclass(frozen=True)
class TsneConfig:
    perplexity: float = 30.0
    iterations: int = 500
    learning_rate: float = 100.0
    seed: int = 0
    n_components: int = 2
    momentum: float = 0.5
    final_momentum: float = 0.8
    momentum_switch: int = 250

    def validate(self, n: int) -> None:
        if n < 8:
            raise ValueError("t-SNE needs at least 8 samples")
        if not 1.0 < self.perplexity < (n - 1) / 3.0:
            raise ValueError(
                f"perplexity {self.perplexity} outside (1, {(n - 1) / 3.0:.3f}) for n={n}")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")


@dataclass
class TsneResult:
    embedding: np.ndarray
    kl: float
    kl_trace: list[float] = field(default_factory=list)


def _squared_distances(x) -> np.ndarray:
    sq = np.sum(x * x, axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * x @ x.T, 0.0)
    np.fill_diagonal(d2, 0.0)
    return d2


def conditional_probabilities(x, perplexity: float) -> np.ndarray:
    """Row-stochastic ``p_{j|i}`` with each row's bandwidth set by bisection.

    Bisection runs on the precision ``beta = 1 / (2 sigma_i^2)`` until the
    row entropy matches ``log(perplexity)`` to within ``PERPLEXITY_TOL``
    in perplexity units.
    """
    x = np.asarray(x, dtype=np.float64)
    d2 = _squared_distances(x)
    n = d2.shape[0]
    target = np.log(perplexity)
    p = np.zeros((n, n))
    for i in range(n):
        di = np.delete(d2[i], i)
        di = di - di.min()
        beta, lo, hi = 1.0, 0.0, np.inf
        for _ in range(BISECTION_STEPS):
            w = np.exp(-di * beta)
            sw = w.sum()
            row = w / sw
            entropy = beta * float(np.sum(di * row)) + np.log(sw)
            if abs(np.exp(entropy) - perplexity) <= PERPLEXITY_TOL:
                break
            if entropy > target:
                lo = beta
                beta = beta * 2.0 if hi == np.inf else 0.5 * (beta + hi)
            else:
                hi = beta
                beta = 0.5 * (beta + lo)
        else:
            raise PerplexityError(f"bisection for sample {i} did not reach perplexity {perplexity}")
        p[i, np.arange(n) != i] = row
    return p


def joint_probabilities(x, perplexity: float) -> np.ndarray:
    """Symmetrized ``p_ij = (p_{j|i} + p_{i|j}) / (2n)``."""
    cond = conditional_probabilities(x, perplexity)
    return (cond + cond.T) / (2.0 * cond.shape[0])


def student_t_affinities(y) -> np.ndarray:
    """Normalized Student-t affinities ``q_ij`` of a low-dimensional layout."""
    num = 1.0 / (1.0 + _squared_distances(np.asarray(y, dtype=np.float64)))
    np.fill_diagonal(num, 0.0)
    return num / num.sum()


def kl_divergence(p, q) -> float:
    """``sum_{i != j} p_ij log(p_ij / q_ij)`` skipping zero ``p_ij``."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    mask = p > 0
    np.fill_diagonal(mask, False)
    return float(np.sum(p[mask] * np.log(p[mask] / q[mask])))


def tsne_embed(x, cfg: TsneConfig = TsneConfig()) -> TsneResult:
    """Exact O(n^2) t-SNE by gradient descent with momentum on KL(P || Q).

    No early exaggeration.  The layout starts from N(0, 1e-4) draws with
    ``cfg.seed``.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    cfg.validate(n)
    p = np.maximum(joint_probabilities(x, cfg.perplexity), 1e-300)
    np.fill_diagonal(p, 0.0)
    rng = np.random.default_rng(cfg.seed)
    y = rng.normal(0.0, 1e-4, size=(n, cfg.n_components))
    velocity = np.zeros_like(y)
    trace = []
    for it in range(cfg.iterations):
        num = 1.0 / (1.0 + _squared_distances(y))
        np.fill_diagonal(num, 0.0)
        q = num / num.sum()
        trace.append(kl_divergence(p, np.maximum(q, 1e-300)))
        pq = (p - q) * num
        grad = 4.0 * (pq.sum(axis=1)[:, None] * y - pq @ y)
        mom = cfg.momentum if it < cfg.momentum_switch else cfg.final_momentum
        velocity = mom * velocity - cfg.learning_rate * grad
        y = y + velocity
        if not np.all(np.isfinite(y)):
            raise FloatingPointError(f"t-SNE diverged at iteration {it}")
    q = student_t_affinities(y)
    kl = kl_divergence(p, np.maximum(q, 1e-300))
    trace.append(kl)
    return TsneResult(y, kl, trace)
