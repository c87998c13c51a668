"""Layered convolutional network with forward evaluation and input gradients.

Activations are plain ``float64`` numpy arrays. Spatial layers work on
``(channels, height, width)`` arrays; fully connected and softmax layers
produce 1-D arrays. Features are flattened channel-major, then row, then
column (C order), and every decoder index refers to that order.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "LayerSpec", "Network", "FeatureVector", "NetworkBuildError", "WeightFileError",
    "convolution", "rectifier", "maxpool", "crosschannel_norm", "fully_connected", "softmax",
    "build_network", "forward", "extract_features", "backward_to_input",
    "save_weights", "load_weights", "read_weight_file",
    "reference_alexnet_specs", "toy_specs", "load_network_spec", "specs_to_json",
]

KINDS = ("convolution", "rectifier", "maxpool", "crosschannel_norm", "fully_connected", "softmax")
PARAMETRIC = ("convolution", "fully_connected")


class NetworkBuildError(ValueError):
    """Raised when a layer list does not chain into a valid network."""

    def __init__(self, message: str, layer_index: int | None = None):
        if layer_index is not None:
            message = f"layer {layer_index}: {message}"
        super().__init__(message)
        self.layer_index = layer_index


class WeightFileError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    """One layer of a network.

    Only the fields relevant to ``kind`` are read. ``kernel`` and ``window``
    are (height, width) pairs.
    """

    kind: str
    out_channels: int = 0
    kernel: tuple[int, int] = (1, 1)
    stride: int = 1
    padding: int = 0
    window: tuple[int, int] = (2, 2)
    n: int = 5
    k: float = 2.0
    alpha: float = 1e-4
    beta: float = 0.75
    out_features: int = 0

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.kind == "convolution":
            d.update(out_channels=self.out_channels, kernel=list(self.kernel),
                     stride=self.stride, padding=self.padding)
        elif self.kind == "maxpool":
            d.update(window=list(self.window), stride=self.stride)
        elif self.kind == "crosschannel_norm":
            d.update(n=self.n, k=self.k, alpha=self.alpha, beta=self.beta)
        elif self.kind == "fully_connected":
            d.update(out_features=self.out_features)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        d = dict(d)
        for key in ("kernel", "window"):
            if key in d:
                v = d[key]
                d[key] = (int(v), int(v)) if np.isscalar(v) else tuple(int(x) for x in v)
        return cls(**d)


def convolution(out_channels, kernel, stride=1, padding=0) -> LayerSpec:
    if np.isscalar(kernel):
        kernel = (kernel, kernel)
    return LayerSpec("convolution", out_channels=out_channels, kernel=tuple(kernel),
                     stride=stride, padding=padding)


def rectifier() -> LayerSpec:
    return LayerSpec("rectifier")


def maxpool(window, stride=None) -> LayerSpec:
    if np.isscalar(window):
        window = (window, window)
    return LayerSpec("maxpool", window=tuple(window),
                     stride=window[0] if stride is None else stride)


def crosschannel_norm(n=5, k=2.0, alpha=1e-4, beta=0.75) -> LayerSpec:
    return LayerSpec("crosschannel_norm", n=n, k=k, alpha=alpha, beta=beta)


def fully_connected(out_features) -> LayerSpec:
    return LayerSpec("fully_connected", out_features=out_features)


def softmax() -> LayerSpec:
    return LayerSpec("softmax")


def _output_shape(spec: LayerSpec, shape: tuple[int, ...], index: int) -> tuple[int, ...]:
    kind = spec.kind
    if kind not in KINDS:
        raise NetworkBuildError(f"unknown layer kind {kind!r}", index)
    if kind in ("rectifier",):
        return shape
    if kind == "fully_connected":
        if spec.out_features < 1:
            raise NetworkBuildError("out_features must be >= 1", index)
        return (spec.out_features,)
    if kind == "softmax":
        return shape
    if len(shape) != 3:
        raise NetworkBuildError(f"{kind} needs a (C, H, W) input, got {shape}", index)
    c, h, w = shape
    if kind == "crosschannel_norm":
        if spec.n < 1:
            raise NetworkBuildError("normalization window n must be >= 1", index)
        return shape
    if spec.stride < 1:
        raise NetworkBuildError("stride must be >= 1", index)
    if kind == "convolution":
        if spec.out_channels < 1:
            raise NetworkBuildError("kernel count must be >= 1", index)
        kh, kw = spec.kernel
        if kh < 1 or kw < 1 or spec.padding < 0:
            raise NetworkBuildError("kernel extents must be >= 1 and padding >= 0", index)
        ho = (h + 2 * spec.padding - kh) // spec.stride + 1
        wo = (w + 2 * spec.padding - kw) // spec.stride + 1
        out = (spec.out_channels, ho, wo)
    else:
        ph, pw = spec.window
        if ph < 1 or pw < 1:
            raise NetworkBuildError("pool window must be >= 1", index)
        ho = (h - ph) // spec.stride + 1
        wo = (w - pw) // spec.stride + 1
        out = (c, ho, wo)
    if out[1] < 1 or out[2] < 1 or (kind == "maxpool" and (h < spec.window[0] or w < spec.window[1])):
        raise NetworkBuildError(f"output extent < 1 for input {shape}", index)
    if kind == "convolution" and (h + 2 * spec.padding < spec.kernel[0] or w + 2 * spec.padding < spec.kernel[1]):
        raise NetworkBuildError(f"kernel larger than padded input {shape}", index)
    return out


def _weight_shapes(spec: LayerSpec, in_shape) -> tuple[tuple[int, ...], tuple[int, ...]]:
    if spec.kind == "convolution":
        return (spec.out_channels, in_shape[0], *spec.kernel), (spec.out_channels,)
    return (spec.out_features, int(np.prod(in_shape))), (spec.out_features,)


@dataclass(frozen=True, eq=False)
class Network:
    input_shape: tuple[int, ...]
    layers: tuple[LayerSpec, ...]
    shapes: tuple[tuple[int, ...], ...]
    weights: dict[int, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    def __len__(self):
        return len(self.layers)

    def output_shape(self, layer_index: int) -> tuple[int, ...]:
        self._check_index(layer_index)
        return self.shapes[layer_index]

    def feature_dim(self, layer_index: int) -> int:
        return int(np.prod(self.output_shape(layer_index)))

    def channels(self) -> list[int]:
        return [s[0] for s in self.shapes]

    def _check_index(self, layer_index):
        if not (-1 <= layer_index < len(self.layers)):
            raise IndexError(f"layer index {layer_index} out of range for {len(self.layers)} layers")


@dataclass(frozen=True)
class FeatureVector:
    layer_index: int
    values: np.ndarray

    @property
    def dim(self) -> int:
        return self.values.size

    def reshape(self, net: Network) -> np.ndarray:
        return self.values.reshape(net.output_shape(self.layer_index))


def build_network(input_shape, specs: Sequence[LayerSpec] = (), weight_init="seeded_random",
                  seed: int = 0, path=None) -> Network:
    """Validate the shape chain and allocate weights.

    ``weight_init`` is ``"zeros"``, ``"seeded_random"`` (He-scaled Gaussian
    kernels, zero biases) or ``"from_file"`` (``path`` in the CAVW format).
    """
    input_shape = tuple(int(s) for s in input_shape)
    if not input_shape or any(s < 1 for s in input_shape):
        raise NetworkBuildError(f"invalid input shape {input_shape}")
    specs = tuple(specs)
    shapes = []
    shape = input_shape
    for i, spec in enumerate(specs):
        shape = _output_shape(spec, shape, i)
        shapes.append(shape)
    net = Network(input_shape, specs, tuple(shapes))
    if weight_init == "from_file":
        if path is None:
            raise ValueError("weight_init='from_file' needs a path")
        return load_weights(path, net)
    if weight_init not in ("zeros", "seeded_random"):
        raise ValueError(f"unknown weight_init {weight_init!r}")
    rng = np.random.default_rng(seed)
    weights = {}
    for i, spec in enumerate(specs):
        if spec.kind not in PARAMETRIC:
            continue
        in_shape = input_shape if i == 0 else shapes[i - 1]
        wshape, bshape = _weight_shapes(spec, in_shape)
        if weight_init == "zeros":
            kernels = np.zeros(wshape)
        else:
            fan_in = int(np.prod(wshape[1:]))
            kernels = rng.standard_normal(wshape) * np.sqrt(2.0 / fan_in)
        weights[i] = (kernels, np.zeros(bshape))
    return replace(net, weights=weights)


# -- layer kernels -------------------------------------------------------

def _conv_forward(x, kernels, bias, stride, pad):
    kh, kw = kernels.shape[2:]
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad))) if pad else x
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    out = np.tensordot(kernels, win, axes=([1, 2, 3], [0, 3, 4]))
    return out + bias[:, None, None]


def _conv_backward(grad, x_shape, kernels, stride, pad):
    c, h, w = x_shape
    kh, kw = kernels.shape[2:]
    ho, wo = grad.shape[1:]
    # dcols[c, i, j, y, x] = sum_k kernels[k, c, i, j] * grad[k, y, x]
    dcols = np.tensordot(kernels, grad, axes=([0], [0]))
    gp = np.zeros((c, h + 2 * pad, w + 2 * pad))
    for i in range(kh):
        for j in range(kw):
            gp[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, i, j]
    return gp[:, pad:pad + h, pad:pad + w]


def _pool_windows(x, spec):
    ph, pw = spec.window
    s = spec.stride
    win = sliding_window_view(x, (ph, pw), axis=(1, 2))[:, ::s, ::s]
    return win.reshape(win.shape[:3] + (ph * pw,))


def _maxpool_backward(grad, x, spec):
    ph, pw = spec.window
    s = spec.stride
    c, ho, wo = grad.shape
    # argmax returns the first maximum, i.e. the lowest flat index in the window
    arg = _pool_windows(x, spec).argmax(axis=-1)
    rows = np.arange(ho)[None, :, None] * s + arg // pw
    cols = np.arange(wo)[None, None, :] * s + arg % pw
    chans = np.broadcast_to(np.arange(c)[:, None, None], arg.shape)
    out = np.zeros_like(x)
    np.add.at(out, (chans, rows, cols), grad)
    return out


def _lrn_band(c, n):
    lo = (n - 1) // 2
    hi = n - 1 - lo
    idx = np.arange(c)
    return ((idx[None, :] >= idx[:, None] - lo) & (idx[None, :] <= idx[:, None] + hi)).astype(float)


def _lrn_denominator(x, spec):
    band = _lrn_band(x.shape[0], spec.n)
    return spec.k + spec.alpha * np.tensordot(band, x * x, axes=([1], [0]))


def _lrn_backward(grad, x, spec):
    band = _lrn_band(x.shape[0], spec.n)
    d = _lrn_denominator(x, spec)
    t = grad * x * d ** (-spec.beta - 1.0)
    spread = np.tensordot(band.T, t, axes=([1], [0]))
    return grad * d ** (-spec.beta) - 2.0 * spec.alpha * spec.beta * x * spread


def _layer_forward(net: Network, i: int, x: np.ndarray) -> np.ndarray:
    spec = net.layers[i]
    kind = spec.kind
    if kind == "convolution":
        kernels, bias = net.weights[i]
        return _conv_forward(x, kernels, bias, spec.stride, spec.padding)
    if kind == "rectifier":
        return np.maximum(x, 0.0)
    if kind == "maxpool":
        return _pool_windows(x, spec).max(axis=-1)
    if kind == "crosschannel_norm":
        return x * _lrn_denominator(x, spec) ** (-spec.beta)
    if kind == "fully_connected":
        kernels, bias = net.weights[i]
        return kernels @ x.ravel() + bias
    z = x.ravel() - x.max()
    e = np.exp(z)
    return (e / e.sum()).reshape(x.shape)


def _layer_backward(net: Network, i: int, x: np.ndarray, grad: np.ndarray) -> np.ndarray:
    spec = net.layers[i]
    kind = spec.kind
    if kind == "convolution":
        kernels, _ = net.weights[i]
        return _conv_backward(grad, x.shape, kernels, spec.stride, spec.padding)
    if kind == "rectifier":
        return np.where(x > 0.0, grad, 0.0)
    if kind == "maxpool":
        return _maxpool_backward(grad, x, spec)
    if kind == "crosschannel_norm":
        return _lrn_backward(grad, x, spec)
    if kind == "fully_connected":
        kernels, _ = net.weights[i]
        return (kernels.T @ grad).reshape(x.shape)
    raise NotImplementedError(f"layer {i}: softmax is forward-only")


def _check_image(net: Network, image) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.shape != net.input_shape:
        raise ValueError(f"image shape {image.shape} != network input shape {net.input_shape}")
    return image


def forward(net: Network, image, upto: int | None = None) -> list[np.ndarray]:
    """Return the activation of every layer (through ``upto`` if given)."""
    x = _check_image(net, image)
    last = len(net.layers) - 1 if upto is None else upto
    if upto is not None:
        net._check_index(upto)
    acts = []
    for i in range(last + 1):
        x = _layer_forward(net, i, x)
        acts.append(x)
    return acts


def extract_features(net: Network, image, layer_index: int) -> FeatureVector:
    """Flattened activation of one layer. ``layer_index=-1`` gives the image itself."""
    net._check_index(layer_index)
    if layer_index == -1:
        return FeatureVector(-1, _check_image(net, image).ravel().copy())
    acts = forward(net, image, upto=layer_index)
    return FeatureVector(layer_index, acts[-1].ravel())


def backward_to_input(net: Network, layer_index: int, grad_at_layer, image) -> np.ndarray:
    """Gradient of ``<grad_at_layer, layer activation>`` with respect to the image."""
    image = _check_image(net, image)
    grad = np.asarray(grad_at_layer, dtype=np.float64)
    if layer_index == -1:
        if grad.size != image.size:
            raise ValueError("gradient shape does not match the input shape")
        return grad.reshape(image.shape).copy()
    net._check_index(layer_index)
    out_shape = net.shapes[layer_index]
    if grad.size != int(np.prod(out_shape)):
        raise ValueError(f"gradient shape {grad.shape} does not match layer output {out_shape}")
    grad = grad.reshape(out_shape)
    inputs = [image] + forward(net, image, upto=layer_index)[:-1]
    for i in range(layer_index, -1, -1):
        grad = _layer_backward(net, i, inputs[i], grad)
    return grad


# -- weight files ----------------------------------------------------------

_MAGIC = b"CAVW"
_VERSION = 1


def save_weights(net: Network, path) -> None:
    """Write the CAVW file: per layer the kernel tensor followed by its biases."""
    chunks = [_MAGIC, struct.pack("<II", _VERSION, len(net.weights))]
    for i in sorted(net.weights):
        kernels, bias = net.weights[i]
        chunks.append(struct.pack("<II", i, kernels.ndim))
        chunks.append(struct.pack(f"<{kernels.ndim}Q", *kernels.shape))
        chunks.append(np.ascontiguousarray(kernels, dtype="<f8").tobytes())
        chunks.append(np.ascontiguousarray(bias, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def read_weight_file(path) -> dict[int, tuple[np.ndarray, np.ndarray]]:
    with open(path, "rb") as fh:
        buf = fh.read()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise WeightFileError(f"{path}: truncated weight file")
        out = buf[pos:pos + n]
        pos += n
        return out

    if take(4) != _MAGIC:
        raise WeightFileError(f"{path}: bad magic")
    version, count = struct.unpack("<II", take(8))
    if version != _VERSION:
        raise WeightFileError(f"{path}: unsupported version {version}")
    weights = {}
    for _ in range(count):
        index, ndim = struct.unpack("<II", take(8))
        dims = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        size = int(np.prod(dims))
        kernels = np.frombuffer(take(8 * size), dtype="<f8").reshape(dims).astype(np.float64)
        bias = np.frombuffer(take(8 * dims[0]), dtype="<f8").astype(np.float64)
        weights[index] = (kernels, bias)
    if pos != len(buf):
        raise WeightFileError(f"{path}: trailing bytes after {count} layers")
    return weights


def load_weights(path, net: Network) -> Network:
    """Read a CAVW file and attach it to ``net`` after checking every shape."""
    weights = read_weight_file(path)
    expected = {i for i, s in enumerate(net.layers) if s.kind in PARAMETRIC}
    if set(weights) != expected:
        raise WeightFileError(f"{path}: layers {sorted(weights)} do not match parametric layers {sorted(expected)}")
    for i, (kernels, bias) in weights.items():
        in_shape = net.input_shape if i == 0 else net.shapes[i - 1]
        wshape, _ = _weight_shapes(net.layers[i], in_shape)
        if kernels.shape != wshape:
            raise WeightFileError(f"{path}: layer {i} declares shape {kernels.shape}, network expects {wshape}")
    return replace(net, weights=weights)


# -- network specs -------------------------------------------------------------

def reference_alexnet_specs(include_softmax: bool = False) -> list[LayerSpec]:
    """Twenty-layer AlexNet geometry for a 3x227x227 input (no channel groups)."""
    specs = [
        convolution(96, 11, stride=4), rectifier(), maxpool(3, 2), crosschannel_norm(),
        convolution(256, 5, padding=2), rectifier(), maxpool(3, 2), crosschannel_norm(),
        convolution(384, 3, padding=1), rectifier(),
        convolution(384, 3, padding=1), rectifier(),
        convolution(256, 3, padding=1), rectifier(), maxpool(3, 2),
        fully_connected(4096), rectifier(),
        fully_connected(4096), rectifier(),
        fully_connected(1000),
    ]
    if include_softmax:
        specs.append(softmax())
    return specs


def toy_specs(kernels: int = 4, pool: int = 2) -> list[LayerSpec]:
    """conv 3x3 (pad 1) -> rectifier -> ``pool x pool`` max-pool."""
    return [convolution(kernels, 3, stride=1, padding=1), rectifier(), maxpool(pool, pool)]


def specs_to_json(input_shape, specs: Sequence[LayerSpec]) -> str:
    return json.dumps({"input_shape": list(input_shape),
                       "layers": [s.to_dict() for s in specs]}, indent=2)


def load_network_spec(path) -> tuple[tuple[int, ...], list[LayerSpec]]:
    with open(path) as fh:
        d = json.load(fh)
    return tuple(d["input_shape"]), [LayerSpec.from_dict(s) for s in d["layers"]]
