"""Small differentiable embedding networks with hand-written backprop.

Tensors are plain ``numpy.float64`` arrays. Every layer works on a leading
batch axis internally; the module-level helpers (:func:`forward`,
:func:`input_gradient`, ...) accept single examples.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

L2_EPS = 1e-12
LAYER_KINDS = ("dense", "conv2d", "relu", "flatten", "l2normalize")

WEIGHTS_MAGIC = b"MNETW"
WEIGHTS_VERSION = 1


class ShapeError(ValueError):
    """Input or upstream tensor does not match the network."""


class ArgumentError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    """One layer of an embedding network.

    ``units`` is the output width of a dense layer; ``filters``, ``kernel``
    and ``stride`` describe a valid-padding conv2d over (H, W, C) inputs.
    """

    kind: str
    units: int = 0
    filters: int = 0
    kernel: int = 0
    stride: int = 1

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ArgumentError(f"unknown layer kind {self.kind!r}")
        if self.kind == "dense" and self.units < 1:
            raise ArgumentError("dense layer needs units >= 1")
        if self.kind == "conv2d" and (self.filters < 1 or self.kernel < 1 or self.stride < 1):
            raise ArgumentError("conv2d needs filters, kernel, stride >= 1")

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.kind == "dense":
            d["units"] = self.units
        elif self.kind == "conv2d":
            d.update(filters=self.filters, kernel=self.kernel, stride=self.stride)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        return cls(**d)


def dense(units: int) -> LayerSpec:
    return LayerSpec("dense", units=units)


def conv2d(filters: int, kernel: int, stride: int = 1) -> LayerSpec:
    return LayerSpec("conv2d", filters=filters, kernel=kernel, stride=stride)


RELU = LayerSpec("relu")
FLATTEN = LayerSpec("flatten")
L2NORMALIZE = LayerSpec("l2normalize")


def _layer_shapes(layers: Sequence[LayerSpec], input_shape: tuple) -> list[tuple]:
    """Return the activation shape after each layer (excluding batch axis)."""
    shapes = [tuple(input_shape)]
    for i, layer in enumerate(layers):
        shape = shapes[-1]
        if layer.kind == "dense":
            if len(shape) != 1:
                raise ShapeError(f"layer {i}: dense expects a flat input, got {shape}")
            out = (layer.units,)
        elif layer.kind == "conv2d":
            if len(shape) != 3:
                raise ShapeError(f"layer {i}: conv2d expects (H, W, C), got {shape}")
            h, w, _ = shape
            if h < layer.kernel or w < layer.kernel:
                raise ShapeError(f"layer {i}: kernel {layer.kernel} larger than input {shape}")
            out = ((h - layer.kernel) // layer.stride + 1,
                   (w - layer.kernel) // layer.stride + 1,
                   layer.filters)
        elif layer.kind == "flatten":
            out = (int(np.prod(shape)),)
        elif layer.kind == "l2normalize":
            if i != len(layers) - 1:
                raise ShapeError("l2normalize may only be the last layer")
            if len(shape) != 1:
                raise ShapeError("l2normalize expects a flat input")
            out = shape
        else:
            out = shape
        shapes.append(out)
    return shapes


def _param_shapes(layer: LayerSpec, in_shape: tuple) -> list[tuple]:
    if layer.kind == "dense":
        return [(layer.units, in_shape[0]), (layer.units,)]
    if layer.kind == "conv2d":
        return [(layer.kernel, layer.kernel, in_shape[2], layer.filters), (layer.filters,)]
    return []


@dataclass
class EmbeddingNetwork:
    """Feed-forward map from ``input_shape`` tensors to R^m.

    ``params`` is one flat float64 vector; each layer reads views into it, so
    in-place updates of ``params`` are visible to the next forward pass.
    """

    layers: list[LayerSpec]
    input_shape: tuple
    params: np.ndarray = None
    shapes: list[tuple] = field(init=False, repr=False)
    offsets: list[list[tuple[int, int, tuple]]] = field(init=False, repr=False)

    def __post_init__(self):
        self.layers = list(self.layers)
        self.input_shape = tuple(int(s) for s in self.input_shape)
        self.shapes = _layer_shapes(self.layers, self.input_shape)
        self.offsets = []
        pos = 0
        for layer, in_shape in zip(self.layers, self.shapes):
            entries = []
            for shp in _param_shapes(layer, in_shape):
                n = int(np.prod(shp))
                entries.append((pos, pos + n, shp))
                pos += n
            self.offsets.append(entries)
        if self.params is None:
            self.params = np.zeros(pos)
        else:
            self.params = np.asarray(self.params, dtype=np.float64).copy()
        if self.params.shape != (pos,):
            raise ShapeError(f"expected {pos} parameters, got {self.params.shape}")

    @property
    def embedding_dim(self) -> int:
        return self.shapes[-1][0]

    @property
    def num_params(self) -> int:
        return self.params.size

    @property
    def normalized(self) -> bool:
        return bool(self.layers) and self.layers[-1].kind == "l2normalize"

    def layer_params(self, i: int) -> list[np.ndarray]:
        return [self.params[a:b].reshape(shp) for a, b, shp in self.offsets[i]]

    def copy(self) -> "EmbeddingNetwork":
        return EmbeddingNetwork(self.layers, self.input_shape, self.params.copy())

    def architecture(self) -> dict:
        return {"input_shape": list(self.input_shape),
                "layers": [layer.to_dict() for layer in self.layers]}

    # -- batched core ----------------------------------------------------

    def _check_batch(self, xs: np.ndarray) -> np.ndarray:
        xs = np.asarray(xs, dtype=np.float64)
        if xs.shape[1:] != self.input_shape:
            raise ShapeError(f"input shape {xs.shape[1:]} != network input {self.input_shape}")
        return xs

    def forward_batch(self, xs: np.ndarray, keep: bool = False):
        """Embed a batch ``(B, *input_shape)``; with ``keep`` also return the cache."""
        a = self._check_batch(xs)
        cache = []
        for i, layer in enumerate(self.layers):
            cache.append(a)
            a = _layer_forward(layer, self.layer_params(i), a)
        if keep:
            return a, cache
        return a

    def backward_batch(self, cache: list, upstream: np.ndarray, want_params: bool = True):
        """Backpropagate ``upstream`` (B, m) through a cached forward pass.

        Returns ``(input_grads, param_grad)``; ``param_grad`` is summed over
        the batch, or None when ``want_params`` is false.
        """
        g = np.asarray(upstream, dtype=np.float64)
        pgrad = np.zeros_like(self.params) if want_params else None
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            g, grads = _layer_backward(layer, self.layer_params(i), cache[i], g, want_params)
            if want_params:
                for (a, b, _), gr in zip(self.offsets[i], grads):
                    pgrad[a:b] += gr.ravel()
        return g, pgrad

    def preactivations(self, x: np.ndarray) -> list[np.ndarray]:
        """Inputs to each relu layer for a single example."""
        _, cache = self.forward_batch(np.asarray(x)[None], keep=True)
        return [cache[i][0] for i, layer in enumerate(self.layers) if layer.kind == "relu"]

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return forward(self, x)


def _layer_forward(layer: LayerSpec, p: list[np.ndarray], a: np.ndarray) -> np.ndarray:
    kind = layer.kind
    if kind == "dense":
        w, b = p
        return a @ w.T + b
    if kind == "conv2d":
        k, b = p
        patches = _patches(a, layer.kernel, layer.stride)
        return np.einsum("bijcuv,uvcf->bijf", patches, k, optimize=True) + b
    if kind == "relu":
        return np.maximum(a, 0.0)
    if kind == "flatten":
        return a.reshape(a.shape[0], -1)
    # l2normalize
    s = np.sqrt(np.sum(a * a, axis=1, keepdims=True) + L2_EPS)
    return a / s


def _layer_backward(layer, p, a, g, want_params):
    kind = layer.kind
    if kind == "dense":
        w, _ = p
        grads = [g.T @ a, g.sum(axis=0)] if want_params else []
        return g @ w, grads
    if kind == "conv2d":
        k, _ = p
        kh, s = layer.kernel, layer.stride
        ho, wo = g.shape[1], g.shape[2]
        grads = []
        if want_params:
            patches = _patches(a, kh, s)
            grads = [np.einsum("bijcuv,bijf->uvcf", patches, g, optimize=True),
                     g.sum(axis=(0, 1, 2))]
        dx = np.zeros_like(a)
        for u in range(kh):
            for v in range(kh):
                dx[:, u:u + s * (ho - 1) + 1:s, v:v + s * (wo - 1) + 1:s, :] += g @ k[u, v].T
        return dx, grads
    if kind == "relu":
        # subgradient at 0 is 0
        return g * (a > 0.0), []
    if kind == "flatten":
        return g.reshape(a.shape), []
    s = np.sqrt(np.sum(a * a, axis=1, keepdims=True) + L2_EPS)
    dot = np.sum(a * g, axis=1, keepdims=True)
    return g / s - a * dot / s**3, []


def _patches(a: np.ndarray, kernel: int, stride: int) -> np.ndarray:
    # (B, H', W', C, k, k) -> strided to output grid
    win = sliding_window_view(a, (kernel, kernel), axis=(1, 2))
    return win[:, ::stride, ::stride]


# -- construction ------------------------------------------------------------

def build_network(layers: Sequence[LayerSpec], input_shape: tuple,
                  seed: int | None = 0) -> EmbeddingNetwork:
    """Create a network with He-normal weights and zero biases."""
    net = EmbeddingNetwork(list(layers), input_shape)
    rng = np.random.default_rng(seed)
    for i, layer in enumerate(net.layers):
        entries = net.offsets[i]
        if not entries:
            continue
        (wa, wb, wshape), (ba, bb, _) = entries
        fan_in = wshape[1] if layer.kind == "dense" else int(np.prod(wshape[:3]))
        net.params[wa:wb] = rng.normal(0.0, np.sqrt(2.0 / fan_in), wb - wa)
        net.params[ba:bb] = 0.0
    return net


# -- single-example API ------------------------------------------------------

def forward(net: EmbeddingNetwork, x: np.ndarray) -> np.ndarray:
    """Embedding of one input ``x`` (shape ``net.input_shape``)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != net.input_shape:
        raise ShapeError(f"input shape {x.shape} != network input {net.input_shape}")
    return net.forward_batch(x[None])[0]


def input_gradient(net: EmbeddingNetwork, x: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Gradient of ``upstream . f(x)`` with respect to ``x``."""
    x = np.asarray(x, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    if x.shape != net.input_shape:
        raise ShapeError(f"input shape {x.shape} != network input {net.input_shape}")
    if upstream.shape != (net.embedding_dim,):
        raise ShapeError(f"upstream shape {upstream.shape} != ({net.embedding_dim},)")
    _, cache = net.forward_batch(x[None], keep=True)
    gx, _ = net.backward_batch(cache, upstream[None], want_params=False)
    return gx[0]


def embed_and_grad(net: EmbeddingNetwork, x: np.ndarray,
                   loss_fn: Callable[[np.ndarray], tuple[float, np.ndarray]]):
    """Evaluate ``loss_fn(f(x))`` and its gradient with respect to ``x``.

    ``loss_fn`` maps an embedding to ``(value, d value / d embedding)``.
    """
    emb, cache = net.forward_batch(np.asarray(x, dtype=np.float64)[None], keep=True)
    value, up = loss_fn(emb[0])
    gx, _ = net.backward_batch(cache, np.asarray(up)[None], want_params=False)
    return value, gx[0], emb[0]


def parameter_gradient(net: EmbeddingNetwork,
                       batch: Iterable[tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    """Sum over ``(x, upstream)`` pairs of d(upstream . f(x)) / d params."""
    batch = list(batch)
    if not batch:
        raise ArgumentError("parameter_gradient needs a nonempty batch")
    xs = np.stack([np.asarray(x, dtype=np.float64) for x, _ in batch])
    ups = np.stack([np.asarray(u, dtype=np.float64) for _, u in batch])
    if ups.shape[1:] != (net.embedding_dim,):
        raise ShapeError(f"upstream shape {ups.shape[1:]} != ({net.embedding_dim},)")
    _, cache = net.forward_batch(xs, keep=True)
    _, pgrad = net.backward_batch(cache, ups)
    return pgrad


def finite_difference(fn: Callable[[np.ndarray], float], x: np.ndarray,
                      h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient estimate of a scalar function."""
    if h <= 0:
        raise ArgumentError("step h must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn(x)
        flat[i] = orig - h
        fm = fn(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-wise relative error ``|a-b| / max(|a|, |b|)`` (0 when both vanish)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)


# -- weight container ----------------------------------------------------------

def save_weights(net: EmbeddingNetwork, path: str | Path, extra: dict | None = None) -> None:
    """Write the text header + little-endian float32 parameter blob."""
    header = {
        "format_version": WEIGHTS_VERSION,
        "architecture": net.architecture(),
        "tensors": [],
        "extra": extra or {},
    }
    for i, layer in enumerate(net.layers):
        for j, (a, b, shp) in enumerate(net.offsets[i]):
            header["tensors"].append({
                "layer": i,
                "name": ("weight", "bias")[j],
                "shape": list(shp),
                "byte_offset": 4 * a,
                "byte_length": 4 * (b - a),
            })
    text = json.dumps(header, indent=1, sort_keys=True).encode("utf-8")
    blob = net.params.astype("<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(WEIGHTS_MAGIC + f" {WEIGHTS_VERSION} {len(text)}\n".encode("ascii"))
        fh.write(text)
        fh.write(b"\n")
        fh.write(blob)


def load_weights(path: str | Path) -> tuple[EmbeddingNetwork, dict]:
    """Read a weight container; parameters are upcast to float64."""
    data = Path(path).read_bytes()
    buf = io.BytesIO(data)
    first = buf.readline().decode("ascii").split()
    if len(first) != 3 or first[0].encode() != WEIGHTS_MAGIC:
        raise ValueError(f"{path}: not a weight container")
    version, hlen = int(first[1]), int(first[2])
    if version != WEIGHTS_VERSION:
        raise ValueError(f"{path}: unsupported format version {version}")
    header = json.loads(buf.read(hlen).decode("utf-8"))
    if buf.read(1) != b"\n":
        raise ValueError(f"{path}: corrupt header terminator")
    arch = header["architecture"]
    layers = [LayerSpec.from_dict(d) for d in arch["layers"]]
    net = EmbeddingNetwork(layers, tuple(arch["input_shape"]))
    blob = buf.read()
    if len(blob) != 4 * net.num_params:
        raise ValueError(f"{path}: expected {4 * net.num_params} parameter bytes, got {len(blob)}")
    net.params[:] = np.frombuffer(blob, dtype="<f4").astype(np.float64)
    return net, header.get("extra", {})

