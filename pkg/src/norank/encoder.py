"""Feed-forward encoder onto the unit sphere, with manual backpropagation.

The network is ``x -> ReLU(W1 x + b1) -> ... -> v = W_{L+1} h_L + b_{L+1}``
followed by ``z = v / ||v||``.  Samples are rows: a batch ``X`` of shape
``(n, D)`` maps to embeddings of shape ``(n, d)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import decomp
from .tensor import least_squares, read_dtn1, write_dtn1

DEFAULT_HIDDEN = (512, 256)
DEFAULT_EMBED_DIM = 64
NORM_FLOOR = 1e-12


class NormalizationSingularity(FloatingPointError):
    """The pre-normalization output vanished, so ``z`` is undefined."""


@dataclass
class EncoderParams:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    head: tuple[np.ndarray, np.ndarray] | None = None
    seed: int | None = None

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need one bias per weight matrix and at least one layer")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ValueError(f"layer {i}: weight {w.shape} / bias {b.shape} mismatch")
            if i and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ValueError(f"layer {i} fan-in does not chain with layer {i - 1}")
        if self.head is not None:
            w1, w2 = self.head
            if w1.shape[1] != self.embed_dim or w2.shape[1] != w1.shape[0]:
                raise ValueError("projection head does not chain with the encoder output")

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def embed_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def hidden(self) -> list[int]:
        return [w.shape[0] for w in self.weights[:-1]]

    def copy(self) -> "EncoderParams":
        head = None if self.head is None else (self.head[0].copy(), self.head[1].copy())
        return EncoderParams([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                             head, self.seed)

    def arrays(self) -> list[np.ndarray]:
        """Every parameter array, in the order used by :class:`EncoderGrads`."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        if self.head is not None:
            out += list(self.head)
        return out


@dataclass
class EncoderGrads:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    head: tuple[np.ndarray, np.ndarray] | None = None

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        if self.head is not None:
            out += list(self.head)
        return out

    def norm(self) -> float:
        return float(np.sqrt(sum(np.sum(a * a) for a in self.arrays())))


@dataclass
class ForwardTrace:
    """Everything backward needs: layer inputs, pre-activations, ``v`` and ``z``."""

    inputs: list[np.ndarray] = field(default_factory=list)
    pre_activations: list[np.ndarray] = field(default_factory=list)
    v: np.ndarray | None = None
    norms: np.ndarray | None = None
    z: np.ndarray | None = None
    single: bool = False


def init_params(input_dim: int, hidden=DEFAULT_HIDDEN, embed_dim: int = DEFAULT_EMBED_DIM,
                head: bool = False, seed: int = 0, head_dim: int | None = None
                ) -> EncoderParams:
    """He-initialized encoder weights and zero biases.

    Hidden ReLU layers draw from N(0, 2/fan_in), the output layer (and the
    projection head's second layer) from N(0, 1/fan_in).
    """
    if input_dim < 1 or embed_dim < 1:
        raise ValueError("input and embedding dimensions must be positive")
    rng = np.random.default_rng(seed)
    widths = [int(input_dim)] + [int(h) for h in hidden] + [int(embed_dim)]
    weights, biases = [], []
    for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        last = i == len(widths) - 2
        std = np.sqrt((1.0 if last else 2.0) / fan_in)
        weights.append(rng.normal(0.0, std, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    proj = None
    if head:
        hd = int(head_dim or embed_dim)
        proj = (rng.normal(0.0, np.sqrt(2.0 / embed_dim), size=(hd, embed_dim)),
                rng.normal(0.0, np.sqrt(1.0 / hd), size=(embed_dim, hd)))
    return EncoderParams(weights, biases, proj, seed)


def forward(params: EncoderParams, x) -> ForwardTrace:
    """Run the encoder on one sample ``(D,)`` or a batch ``(n, D)``."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    h = x[None, :] if single else x
    if h.shape[1] != params.input_dim:
        raise ValueError(f"expected input dim {params.input_dim}, got {h.shape[1]}")
    trace = ForwardTrace(single=single)
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        trace.inputs.append(h)
        a = h @ w.T + b
        trace.pre_activations.append(a)
        h = a if i == last else np.maximum(a, 0.0)
    norms = np.linalg.norm(h, axis=1)
    bad = np.flatnonzero(~(norms >= NORM_FLOOR))
    if bad.size:
        raise NormalizationSingularity(
            f"pre-normalization output has norm < {NORM_FLOOR:g} for sample(s) {bad[:5].tolist()}"
        )
    trace.v = h
    trace.norms = norms
    trace.z = h / norms[:, None]
    return trace


def embed(params: EncoderParams, x) -> np.ndarray:
    """Unit-norm embeddings of ``x`` (shape follows the input)."""
    trace = forward(params, x)
    return trace.z[0] if trace.single else trace.z


def backward(params: EncoderParams, trace: ForwardTrace, grad_z) -> EncoderGrads:
    """Parameter gradients given ``dL/dz`` for every sample in the trace.

    The normalization contributes the Jacobian ``(I - z z^T) / ||v||``, so
    any radial component of ``grad_z`` is annihilated.
    """
    g = np.asarray(grad_z, dtype=np.float64)
    if g.ndim == 1:
        g = g[None, :]
    if g.shape != trace.z.shape:
        raise ValueError(f"gradient shape {g.shape} does not match embeddings {trace.z.shape}")
    z = trace.z
    delta = (g - np.sum(g * z, axis=1, keepdims=True) * z) / trace.norms[:, None]
    n_layers = len(params.weights)
    gw: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
    gb: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
    for i in range(n_layers - 1, -1, -1):
        gw[i] = delta.T @ trace.inputs[i]
        gb[i] = delta.sum(axis=0)
        if i:
            delta = (delta @ params.weights[i]) * (trace.pre_activations[i - 1] > 0)
    return EncoderGrads(gw, gb)


def head_forward(params: EncoderParams, z):
    """Projection head ``p = W2 ReLU(W1 z)``; returns ``(p, hidden pre-activation)``."""
    if params.head is None:
        raise ValueError("encoder has no projection head")
    w1, w2 = params.head
    pre = z @ w1.T
    return np.maximum(pre, 0.0) @ w2.T, pre


def head_backward(params: EncoderParams, z, pre, grad_p):
    """Gradients of the head weights and ``dL/dz`` given ``dL/dp``."""
    w1, w2 = params.head
    hidden = np.maximum(pre, 0.0)
    g_w2 = grad_p.T @ hidden
    d_pre = (grad_p @ w2) * (pre > 0)
    g_w1 = d_pre.T @ z
    return (g_w1, g_w2), d_pre @ w1


def spectral_norm_product(params: EncoderParams) -> float:
    """Product of the largest singular values of the encoder weights."""
    return float(np.prod([np.linalg.norm(w, 2) for w in params.weights]))


@dataclass
class LinearDecoder:
    """Affine map from embeddings back to flattened inputs: ``x_hat = W z + b``."""

    weight: np.ndarray  # (D, d)
    bias: np.ndarray  # (D,)

    def predict(self, z) -> np.ndarray:
        return np.asarray(z, dtype=np.float64) @ self.weight.T + self.bias

    def diagnostics(self, z, x) -> decomp.DecompDiagnostics:
        return decomp.diagnostics(x, self.predict(z))


def fit_linear_decoder(z, x, ridge: float = 0.0) -> LinearDecoder:
    """Least-squares affine map from embeddings ``z`` (n, d) to data ``x`` (n, D).

    The intercept is fit on centered data and is not penalized.
    """
    z = np.asarray(z, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if z.ndim != 2 or x.ndim != 2 or z.shape[0] != x.shape[0]:
        raise ValueError(f"need matching sample counts, got {z.shape} and {x.shape}")
    zm, xm = z.mean(axis=0), x.mean(axis=0)
    coef = least_squares(z - zm, x - xm, ridge)  # (d, D)
    weight = coef.T
    return LinearDecoder(weight=weight, bias=xm - weight @ zm)


def save_params(params: EncoderParams, directory) -> list[Path]:
    """Write each parameter array as DTN1 plus a ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    files = []
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        for name, arr in ((f"layer{i}.weight.dtn", w), (f"layer{i}.bias.dtn", b)):
            write_dtn1(directory / name, arr)
            files.append(name)
            written.append(directory / name)
    if params.head is not None:
        for name, arr in (("head.w1.dtn", params.head[0]), ("head.w2.dtn", params.head[1])):
            write_dtn1(directory / name, arr)
            written.append(directory / name)
    manifest = {
        "format": "norank-encoder/1",
        "widths": [params.input_dim] + params.hidden + [params.embed_dim],
        "seed": params.seed,
        "head": params.head is not None,
        "files": files,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    written.append(directory / "manifest.json")
    return written


def load_params(directory) -> EncoderParams:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    n_layers = len(manifest["widths"]) - 1
    weights = [read_dtn1(directory / f"layer{i}.weight.dtn") for i in range(n_layers)]
    biases = [read_dtn1(directory / f"layer{i}.bias.dtn") for i in range(n_layers)]
    head = None
    if manifest["head"]:
        head = (read_dtn1(directory / "head.w1.dtn"), read_dtn1(directory / "head.w2.dtn"))
    return EncoderParams(weights, biases, head, manifest.get("seed"))
