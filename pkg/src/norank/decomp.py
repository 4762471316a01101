"""Fixed-rank CP (ALS) and Tucker (HOOI) decompositions with diagnostics."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import (
    as_tensor,
    fold,
    frobenius_norm,
    khatri_rao,
    multi_mode_product,
    read_dtn1,
    truncated_svd,
    unfold,
    write_dtn1,
)

logger = logging.getLogger(__name__)

DEFAULT_MAX_ITERS = 100
DEFAULT_TOL = 1e-7
RANK_GRID = (2, 3, 5, 10, 15, 20)
ALS_FALLBACK_RIDGE = 1e-10


@dataclass(frozen=True)
class DecompDiagnostics:
    """Relative reconstruction error and explained variance of one fit.

    ``explained_variance`` is ``1 - error**2`` by construction.
    """

    error: float
    explained_variance: float
    iterations: int = 0
    converged: bool = True
    history: tuple[float, ...] = ()
    rank_flagged: bool = False


@dataclass
class CPModel:
    weights: np.ndarray
    factors: list[np.ndarray]

    @property
    def rank(self) -> int:
        return int(self.weights.shape[0])

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(f.shape[0] for f in self.factors)


@dataclass
class TuckerModel:
    core: np.ndarray
    factors: list[np.ndarray]

    @property
    def ranks(self) -> tuple[int, ...]:
        return tuple(self.core.shape)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(f.shape[0] for f in self.factors)


def diagnostics(t, t_hat, *, iterations: int = 0, converged: bool = True,
                history=(), rank_flagged: bool = False) -> DecompDiagnostics:
    """Relative Frobenius error and explained variance of ``t_hat`` against ``t``.

    A zero reference tensor is treated as perfectly reconstructed
    (error 0, explained variance 1).
    """
    t = np.asarray(t, dtype=np.float64)
    t_hat = np.asarray(t_hat, dtype=np.float64)
    if t.shape != t_hat.shape:
        raise ValueError(f"shape mismatch: {t.shape} vs {t_hat.shape}")
    ref = frobenius_norm(t)
    err = 0.0 if ref == 0.0 else frobenius_norm(t - t_hat) / ref
    return diagnostics_from_error(err, iterations=iterations, converged=converged,
                                  history=history, rank_flagged=rank_flagged)


def diagnostics_from_error(error: float, **kwargs) -> DecompDiagnostics:
    error = float(error)
    if error < 0:
        raise ValueError("relative error is non-negative")
    return DecompDiagnostics(error=error, explained_variance=1.0 - error * error,
                             history=tuple(kwargs.pop("history", ())), **kwargs)


def _relative_error(t, t_hat, ref_norm: float) -> float:
    if ref_norm == 0.0:
        return 0.0
    return frobenius_norm(t - t_hat) / ref_norm


def reconstruct(model: CPModel | TuckerModel) -> np.ndarray:
    """Full tensor represented by a CP or Tucker model."""
    if isinstance(model, CPModel):
        shape = model.shape
        # mode-0 unfolding of the CP tensor is A0 diag(w) KR(A_{N-1}, ..., A_1)^T
        rest = khatri_rao(model.factors[:0:-1]) if len(shape) > 1 else np.ones((1, model.rank))
        return fold((model.factors[0] * model.weights) @ rest.T, 0, shape)
    if isinstance(model, TuckerModel):
        return multi_mode_product(model.core, model.factors)
    raise TypeError(f"cannot reconstruct {type(model).__name__}")


def _normalize_columns(factor: np.ndarray):
    norms = np.linalg.norm(factor, axis=0)
    safe = np.where(norms > 0, norms, 1.0)
    return factor / safe, norms


def _cp_init(t: np.ndarray, rank: int, seed: int):
    rng = np.random.default_rng(seed)
    factors = []
    flagged = False
    for mode, dim in enumerate(t.shape):
        x = unfold(t, mode)
        usable = min(rank, min(x.shape))
        cols = []
        if usable >= 1 and frobenius_norm(x) > 0:
            u, s, _ = truncated_svd(x, usable)
            keep = s > s[0] * 1e-12
            cols.append(u[:, keep])
        have = sum(c.shape[1] for c in cols)
        if have < rank:
            flagged = flagged or rank > min(x.shape)
            cols.append(rng.uniform(-1.0, 1.0, size=(dim, rank - have)))
        factors.append(np.column_stack(cols))
    return factors, flagged


def _solve_gram(gram: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve ``x @ gram = rhs`` for symmetric positive semidefinite ``gram``."""
    r = gram.shape[0]
    try:
        chol = np.linalg.cholesky(gram)
        if np.min(np.abs(np.diag(chol))) <= 1e-12 * max(np.max(np.abs(np.diag(chol))), 1e-300):
            raise np.linalg.LinAlgError
        y = np.linalg.solve(chol, rhs.T)
        return np.linalg.solve(chol.T, y).T
    except np.linalg.LinAlgError:
        logger.debug("singular ALS normal equations, using ridge %g", ALS_FALLBACK_RIDGE)
        return np.linalg.solve(gram + ALS_FALLBACK_RIDGE * np.eye(r), rhs.T).T


def cp_als(t, rank: int, max_iters: int = DEFAULT_MAX_ITERS, tol: float = DEFAULT_TOL,
           seed: int = 0) -> tuple[CPModel, DecompDiagnostics]:
    """Rank-``rank`` CP decomposition by alternating least squares.

    Factors are initialized from the leading left singular vectors of each
    unfolding; columns beyond an unfolding's rank are drawn uniformly from
    [-1, 1] with ``seed`` and the result is flagged.  Each sweep solves the
    exact least-squares problem for one factor at a time, so the recorded
    error sequence never increases.  Iteration stops once the error improves
    by less than ``tol`` or after ``max_iters`` sweeps.
    """
    t = as_tensor(t)
    if rank < 1:
        raise ValueError("CP rank must be >= 1")
    if t.ndim < 2:
        raise ValueError("CP needs a tensor with at least two modes")
    ref = frobenius_norm(t)
    if ref == 0.0:
        factors = [np.zeros((d, rank)) for d in t.shape]
        for f in factors:
            f[0, :] = 1.0
        model = CPModel(weights=np.zeros(rank), factors=factors)
        return model, diagnostics_from_error(0.0, iterations=0, converged=True, history=(0.0,))

    factors, flagged = _cp_init(t, rank, seed)
    if flagged:
        logger.warning("CP rank %d exceeds the rank of some unfolding of %s", rank, t.shape)
    factors = [_normalize_columns(f)[0] for f in factors]
    weights = np.ones(rank)
    unfoldings = [unfold(t, n) for n in range(t.ndim)]
    history = []
    converged = False
    it = 0
    best = None
    for it in range(1, max_iters + 1):
        for n in range(t.ndim):
            others = [factors[m] for m in range(t.ndim) if m != n]
            gram = np.ones((rank, rank))
            for f in others:
                gram *= f.T @ f
            kr = khatri_rao(others[::-1])
            mttkrp = unfoldings[n] @ kr
            factors[n], weights = _normalize_columns(_solve_gram(gram, mttkrp))
        model = CPModel(weights=weights.copy(), factors=[f.copy() for f in factors])
        err = _relative_error(t, reconstruct(model), ref)
        if history and err > history[-1]:
            # only reachable through the ridge fallback; keep the previous model
            converged = True
            break
        history.append(err)
        best = model
        if len(history) > 1 and history[-2] - err < tol:
            converged = True
            break
    if best is None:
        best = model
    diag = diagnostics_from_error(history[-1], iterations=it, converged=converged,
                                  history=history, rank_flagged=flagged)
    return best, diag


def tucker_hooi(t, ranks, max_iters: int = DEFAULT_MAX_ITERS, tol: float = DEFAULT_TOL
                ) -> tuple[TuckerModel, DecompDiagnostics]:
    """Tucker decomposition by higher-order orthogonal iteration.

    Factors start from the truncated HOSVD.  Each sweep replaces factor n by
    the leading left singular vectors of the tensor projected onto all other
    factors; the core is the tensor contracted with every factor transpose.
    """
    t = as_tensor(t)
    ranks = tuple(int(r) for r in ranks)
    if len(ranks) != t.ndim:
        raise ValueError(f"need {t.ndim} ranks, got {len(ranks)}")
    for r, d in zip(ranks, t.shape):
        if not 1 <= r <= d:
            raise ValueError(f"Tucker ranks {ranks} out of range for shape {t.shape}")
    ref = frobenius_norm(t)
    if ref == 0.0:
        factors = [np.eye(d, r) for d, r in zip(t.shape, ranks)]
        model = TuckerModel(core=np.zeros(ranks), factors=factors)
        return model, diagnostics_from_error(0.0, iterations=0, converged=True, history=(0.0,))

    flagged = any(r > int(np.prod(t.shape)) // d for r, d in zip(ranks, t.shape))
    factors = [_leading_vectors(unfold(t, n), r) for n, r in enumerate(ranks)]
    core = multi_mode_product(t, factors, transpose=True)
    history = [_relative_error(t, multi_mode_product(core, factors), ref)]
    best = TuckerModel(core=core, factors=[f.copy() for f in factors])
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        for n in range(t.ndim):
            y = multi_mode_product(t, factors, skip=n, transpose=True)
            factors[n] = _leading_vectors(unfold(y, n), ranks[n])
        core = multi_mode_product(t, factors, transpose=True)
        err = _relative_error(t, multi_mode_product(core, factors), ref)
        if err > history[-1]:
            converged = True
            break
        history.append(err)
        best = TuckerModel(core=core, factors=[f.copy() for f in factors])
        if history[-2] - err < tol:
            converged = True
            break
    diag = diagnostics_from_error(history[-1], iterations=it, converged=converged,
                                  history=history, rank_flagged=flagged)
    return best, diag


def _leading_vectors(x: np.ndarray, r: int) -> np.ndarray:
    """``r`` orthonormal leading left singular vectors, padded if ``x`` is short."""
    usable = min(r, min(x.shape))
    u, _, _ = truncated_svd(x, usable)
    if usable == r:
        return u
    # x has fewer columns than r: complete the basis with the identity
    q, _ = np.linalg.qr(np.column_stack([u, np.eye(x.shape[0])]))
    return q[:, :r]


def sample_embedding(model: CPModel | TuckerModel) -> np.ndarray:
    """Per-sample coordinates from a decomposition of a sample-first tensor.

    CP gives the weighted mode-0 factor.  Tucker gives ``U0 @ unfold(core, 0)``,
    the coordinates of each reconstructed sample in the orthonormal basis
    spanned by the remaining factors, so embedding distances equal
    distances between reconstructed samples.
    """
    if isinstance(model, CPModel):
        return model.factors[0] * model.weights
    if isinstance(model, TuckerModel):
        return model.factors[0] @ unfold(model.core, 0)
    raise TypeError(f"unsupported model {type(model).__name__}")


def save_model(model: CPModel | TuckerModel, diag: DecompDiagnostics, stem) -> list[Path]:
    """Write factors (and core) as DTN1 files plus a JSON sidecar."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    written = []
    meta = {
        "format": "norank-decomp/1",
        "error": diag.error,
        "explained_variance": diag.explained_variance,
        "iterations": diag.iterations,
        "converged": diag.converged,
        "history": list(diag.history),
        "rank_flagged": diag.rank_flagged,
        "factors": [],
    }
    if isinstance(model, CPModel):
        meta.update(kind="cp", rank=model.rank, weights=model.weights.tolist())
    else:
        meta.update(kind="tucker", ranks=list(model.ranks))
        core_path = stem.with_name(stem.name + ".core.dtn")
        write_dtn1(core_path, model.core)
        meta["core"] = core_path.name
        written.append(core_path)
    for i, f in enumerate(model.factors):
        p = stem.with_name(f"{stem.name}.factor{i}.dtn")
        write_dtn1(p, f)
        meta["factors"].append(p.name)
        written.append(p)
    sidecar = stem.with_name(stem.name + ".json")
    sidecar.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    written.append(sidecar)
    return written


def load_model(stem) -> tuple[CPModel | TuckerModel, DecompDiagnostics]:
    stem = Path(stem)
    meta = json.loads(stem.with_name(stem.name + ".json").read_text())
    factors = [read_dtn1(stem.with_name(name)) for name in meta["factors"]]
    if meta["kind"] == "cp":
        model = CPModel(weights=np.asarray(meta["weights"], dtype=np.float64), factors=factors)
    elif meta["kind"] == "tucker":
        model = TuckerModel(core=read_dtn1(stem.with_name(meta["core"])), factors=factors)
    else:
        raise ValueError(f"unknown model kind {meta['kind']!r}")
    diag = DecompDiagnostics(
        error=meta["error"], explained_variance=meta["explained_variance"],
        iterations=meta["iterations"], converged=meta["converged"],
        history=tuple(meta["history"]), rank_flagged=meta["rank_flagged"],
    )
    return model, diag
