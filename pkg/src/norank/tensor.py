"""Dense tensor primitives: unfolding, n-mode products, SVD, least squares.

Tensors and matrices are plain ``numpy.ndarray`` objects in float64.  The
mode-n unfolding puts ``dims[n]`` on the rows and orders the columns by the
remaining modes in increasing index order, lowest index varying fastest
(the Kolda-Bader convention).  CP-ALS and Tucker-HOOI both rely on it.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

__all__ = [
    "SvdConvergenceError",
    "SingularSystemError",
    "as_tensor",
    "unfold",
    "fold",
    "nmode_product",
    "multi_mode_product",
    "truncated_svd",
    "least_squares",
    "khatri_rao",
    "frobenius_norm",
    "write_dtn1",
    "read_dtn1",
]

DENSE_MAX_SHORT_SIDE = 512
SVD_TOL = 1e-10
SVD_MAX_SWEEPS = 200
_ROTATE_EPS = 1e-15

_MAGIC = b"DTN1"


class SvdConvergenceError(RuntimeError):
    pass


class SingularSystemError(np.linalg.LinAlgError):
    pass


def as_tensor(data) -> np.ndarray:
    """Validate and convert to a finite float64 array with positive extents."""
    t = np.asarray(data, dtype=np.float64)
    if t.ndim == 0:
        raise ValueError("a tensor needs at least one mode")
    if any(s < 1 for s in t.shape):
        raise ValueError(f"all extents must be >= 1, got {t.shape}")
    if not np.all(np.isfinite(t)):
        raise ValueError("tensor contains non-finite entries")
    return t


def _check_mode(ndim: int, mode: int) -> None:
    if not 0 <= mode < ndim:
        raise ValueError(f"mode {mode} out of range for a {ndim}-way tensor")


def unfold(t: np.ndarray, mode: int) -> np.ndarray:
    """Mode-``mode`` matricization, shape ``(dims[mode], prod(other dims))``."""
    t = np.asarray(t, dtype=np.float64)
    _check_mode(t.ndim, mode)
    return np.reshape(np.moveaxis(t, mode, 0), (t.shape[mode], -1), order="F")


def fold(m: np.ndarray, mode: int, dims) -> np.ndarray:
    """Inverse of :func:`unfold` for a tensor of shape ``dims``."""
    dims = tuple(int(d) for d in dims)
    _check_mode(len(dims), mode)
    moved = (dims[mode],) + dims[:mode] + dims[mode + 1:]
    m = np.asarray(m, dtype=np.float64)
    if m.size != int(np.prod(moved)):
        raise ValueError(f"cannot fold a {m.shape} matrix into {dims}")
    return np.ascontiguousarray(np.moveaxis(np.reshape(m, moved, order="F"), 0, mode))


def nmode_product(t: np.ndarray, m: np.ndarray, mode: int) -> np.ndarray:
    """Multiply tensor ``t`` by matrix ``m`` along ``mode``.

    The result has ``dims[mode]`` replaced by ``m.shape[0]`` and equals
    ``fold(m @ unfold(t, mode))``.
    """
    t = np.asarray(t, dtype=np.float64)
    m = np.asarray(m, dtype=np.float64)
    _check_mode(t.ndim, mode)
    if m.ndim != 2 or m.shape[1] != t.shape[mode]:
        raise ValueError(
            f"matrix of shape {m.shape} does not match mode {mode} extent {t.shape[mode]}"
        )
    # tensordot contracts m's columns with the mode axis, then moves it back
    out = np.tensordot(m, t, axes=([1], [mode]))
    return np.ascontiguousarray(np.moveaxis(out, 0, mode))


def multi_mode_product(t, matrices, skip=None, transpose=False) -> np.ndarray:
    """Apply one matrix per mode, optionally skipping one mode."""
    out = np.asarray(t, dtype=np.float64)
    for mode, m in enumerate(matrices):
        if mode == skip:
            continue
        out = nmode_product(out, m.T if transpose else m, mode)
    return out


def khatri_rao(matrices) -> np.ndarray:
    """Column-wise Kronecker product, first matrix varying slowest."""
    matrices = [np.asarray(m, dtype=np.float64) for m in matrices]
    r = matrices[0].shape[1]
    out = matrices[0]
    for m in matrices[1:]:
        if m.shape[1] != r:
            raise ValueError("Khatri-Rao factors need equal column counts")
        out = (out[:, None, :] * m[None, :, :]).reshape(-1, r)
    return out


def frobenius_norm(t) -> float:
    return float(np.linalg.norm(np.ravel(t)))


def _round_robin_pairs(s: int):
    """Tournament schedule: s-1 (or s) rounds of disjoint column pairs."""
    players = list(range(s)) + ([-1] if s % 2 else [])
    m = len(players)
    rounds = []
    for _ in range(m - 1):
        left = [players[i] for i in range(m // 2)]
        right = [players[m - 1 - i] for i in range(m // 2)]
        pairs = [(a, b) if a < b else (b, a) for a, b in zip(left, right) if a >= 0 and b >= 0]
        rounds.append((np.array([p[0] for p in pairs], dtype=int),
                       np.array([p[1] for p in pairs], dtype=int)))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return rounds


def _jacobi_svd(a: np.ndarray, tol: float, max_sweeps: int):
    """One-sided (Hestenes) Jacobi SVD of a tall matrix ``a`` (m >= s).

    The columns are first compressed by a QR factorization so every sweep
    costs O(s^3); rotations inside a round act on disjoint column pairs and
    are applied together.
    """
    m, s = a.shape
    if m > s:
        q, work = np.linalg.qr(a, mode="reduced")
    else:
        q, work = None, a.copy()
    # rows of ``cols`` are the working columns; row gathers are contiguous
    cols = np.array(work.T, dtype=np.float64, order="C")
    vt = np.eye(s)
    rounds = _round_robin_pairs(s) if s > 1 else []
    converged = s <= 1
    for _ in range(max_sweeps):
        if converged:
            break
        off = 0.0
        for p, r in rounds:
            if p.size == 0:
                continue
            ap, ar = cols[p], cols[r]
            alpha = np.einsum("ij,ij->i", ap, ap)
            beta = np.einsum("ij,ij->i", ar, ar)
            gamma = np.einsum("ij,ij->i", ap, ar)
            scale = np.sqrt(alpha * beta)
            safe = np.where(scale > 0, scale, 1.0)
            rel = np.where(scale > 0, np.abs(gamma) / safe, 0.0)
            off = max(off, float(rel.max()))
            active = rel > _ROTATE_EPS
            if not active.any():
                continue
            g = np.where(active, 2.0 * gamma, 1.0)
            zeta = np.where(active, (beta - alpha) / g, 0.0)
            tau = np.where(zeta >= 0, 1.0, -1.0)
            t = np.where(active, tau / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta)), 0.0)
            c = (1.0 / np.sqrt(1.0 + t * t))[:, None]
            sn = c * t[:, None]
            cols[p], cols[r] = c * ap - sn * ar, sn * ap + c * ar
            vp, vr = vt[p], vt[r]
            vt[p], vt[r] = c * vp - sn * vr, sn * vp + c * vr
        if off <= tol:
            converged = True
    if not converged:
        raise SvdConvergenceError(f"Jacobi SVD did not converge in {max_sweeps} sweeps")
    work = cols.T
    v = vt.T
    sing = np.linalg.norm(work, axis=0)
    order = np.argsort(-sing, kind="stable")
    sing = sing[order]
    v = v[:, order]
    work = work[:, order]
    u = np.zeros_like(work)
    nz = sing > sing[0] * 1e-15 if sing.size and sing[0] > 0 else np.zeros(s, dtype=bool)
    u[:, nz] = work[:, nz] / sing[nz]
    if not np.all(nz):
        u = _complete_orthonormal(u, nz)
    if q is not None:
        u = q @ u
    return u, sing, v


def _complete_orthonormal(u: np.ndarray, keep: np.ndarray) -> np.ndarray:
    """Fill the columns of ``u`` not flagged in ``keep`` with an orthonormal complement."""
    m, s = u.shape
    basis = u[:, keep]
    extra = []
    for i in range(m):
        if len(extra) == int((~keep).sum()):
            break
        e = np.zeros(m)
        e[i] = 1.0
        for b in [basis[:, j] for j in range(basis.shape[1])] + extra:
            e -= (b @ e) * b
        for b in [basis[:, j] for j in range(basis.shape[1])] + extra:
            e -= (b @ e) * b
        n = np.linalg.norm(e)
        if n > 1e-8:
            extra.append(e / n)
    out = u.copy()
    out[:, ~keep] = np.column_stack(extra) if extra else out[:, ~keep]
    return out


def _randomized_svd(a: np.ndarray, k: int, oversample: int, power_iters: int, seed: int):
    m, n = a.shape
    rng = np.random.default_rng(seed)
    width = min(k + oversample, min(m, n))
    q, _ = np.linalg.qr(a @ rng.standard_normal((n, width)))
    for _ in range(power_iters):
        q, _ = np.linalg.qr(a.T @ q)
        q, _ = np.linalg.qr(a @ q)
    # the projected problem is only k + oversample wide, so Jacobi is cheap
    vb, s, ub = _jacobi_svd((q.T @ a).T, SVD_TOL, SVD_MAX_SWEEPS)
    return q @ ub, s, vb


def truncated_svd(m, k: int, *, method: str = "auto", tol: float = SVD_TOL,
                  max_sweeps: int = SVD_MAX_SWEEPS, seed: int = 0):
    """Leading ``k`` singular triplets of ``m``.

    Returns ``(U, s, V)`` with ``m ~= U @ diag(s) @ V.T`` and the sign of
    each pair fixed so the largest-magnitude entry of every left vector is
    positive.

    ``method`` selects the solver: ``"jacobi"`` (one-sided Jacobi, pure
    numpy), ``"lapack"`` (divide and conquer via ``numpy.linalg.svd``),
    ``"randomized"`` (subspace iteration, oversampling 8, four power
    iterations) or ``"auto"``, which uses LAPACK when the short side is at
    most 512 and randomized iteration above that.

    Raises
    ------
    ValueError
        If ``k`` is outside ``[1, min(m.shape)]`` or ``method`` is unknown.
    SvdConvergenceError
        If the solver does not converge.
    """
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError("truncated_svd expects a matrix")
    rows, cols = a.shape
    if not 1 <= k <= min(rows, cols):
        raise ValueError(f"rank {k} out of range for a {rows}x{cols} matrix")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix contains non-finite entries")
    if method == "auto":
        method = "lapack" if min(rows, cols) <= DENSE_MAX_SHORT_SIDE else "randomized"
    if method == "jacobi":
        if rows >= cols:
            u, s, v = _jacobi_svd(a, tol, max_sweeps)
        else:
            v, s, u = _jacobi_svd(a.T, tol, max_sweeps)
    elif method == "lapack":
        try:
            u, s, vt = np.linalg.svd(a, full_matrices=False)
        except np.linalg.LinAlgError as exc:
            raise SvdConvergenceError(str(exc)) from exc
        v = vt.T
    elif method == "randomized":
        u, s, v = _randomized_svd(a, k, oversample=8, power_iters=4, seed=seed)
    else:
        raise ValueError(f"unknown SVD method {method!r}")
    u, s, v = u[:, :k], s[:k], v[:, :k]
    idx = np.argmax(np.abs(u), axis=0)
    signs = np.sign(u[idx, np.arange(k)])
    signs[signs == 0] = 1.0
    return u * signs, s, v * signs


def least_squares(a, b, ridge: float = 0.0) -> np.ndarray:
    """Solve ``min ||a @ x - b||_F^2 + ridge * ||x||_F^2``.

    With ``ridge == 0`` a rank-deficient ``a`` raises
    :class:`SingularSystemError` instead of returning an arbitrary solution.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    vector_rhs = b.ndim == 1
    if vector_rhs:
        b = b[:, None]
    if a.ndim != 2 or a.shape[0] != b.shape[0]:
        raise ValueError(f"row mismatch: A {a.shape} vs B {b.shape}")
    if ridge < 0:
        raise ValueError("ridge must be non-negative")
    n, p = a.shape
    if ridge == 0.0:
        if n < p:
            raise SingularSystemError("underdetermined system with ridge == 0")
        q, r = np.linalg.qr(a, mode="reduced")
        diag = np.abs(np.diag(r))
        if diag.size == 0 or diag.min() <= 1e-12 * max(diag.max(), 1e-300):
            raise SingularSystemError("normal equations are singular; pass ridge > 0")
        x = np.linalg.solve(r, q.T @ b)
    elif n < p:
        # dual form keeps the system n x n; equals the primal minimizer
        x = a.T @ np.linalg.solve(a @ a.T + ridge * np.eye(n), b)
    else:
        x = np.linalg.solve(a.T @ a + ridge * np.eye(p), a.T @ b)
    return x[:, 0] if vector_rhs else x


def write_dtn1(path, t) -> None:
    """Write ``t`` in the DTN1 container (little-endian, row-major)."""
    t = np.ascontiguousarray(np.asarray(t, dtype=np.float64))
    if t.ndim == 0:
        raise ValueError("DTN1 needs at least one dimension")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", t.ndim))
        fh.write(struct.pack(f"<{t.ndim}Q", *t.shape))
        fh.write(t.astype("<f8", copy=False).tobytes(order="C"))


def read_dtn1(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:4]!r}, expected b'DTN1'")
    if len(raw) < 8:
        raise ValueError(f"{path}: truncated header")
    (ndims,) = struct.unpack_from("<I", raw, 4)
    header = 8 + 8 * ndims
    if ndims == 0 or len(raw) < header:
        raise ValueError(f"{path}: truncated header")
    dims = struct.unpack_from(f"<{ndims}Q", raw, 8)
    count = int(np.prod(dims, dtype=np.int64))
    if len(raw) != header + 8 * count:
        raise ValueError(
            f"{path}: payload has {len(raw) - header} bytes, expected {8 * count}"
        )
    data = np.frombuffer(raw, dtype="<f8", count=count, offset=header)
    return data.astype(np.float64).reshape(dims)
