"""Deterministic feed-forward engine for two-branch visuomotor policies.

Tensors are plain ``numpy.float64`` arrays. Image tensors are channels-last
``(H, W, C)``; every layer function also accepts a leading batch axis, which
the trainer relies on.

The network is a vision stack (``Conv2D``/``ReLU`` ending in
``SpatialSoftmax``) whose feature points are concatenated with the
configuration vector and fed through a fusion stack of ``Dense``/``ReLU``
layers. The last fusion layer is a linear ``Dense`` layer producing one torque
per joint.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from . import kernels


class ShapeError(ValueError):
    """Raised when array shapes do not match a layer or network declaration."""


@dataclass(frozen=True, eq=False)
class Dense:
    weights: np.ndarray  # (in, out)
    bias: np.ndarray  # (out,)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        b = np.asarray(self.bias, dtype=np.float64)
        if w.ndim != 2 or b.shape != (w.shape[1],):
            raise ShapeError(f"dense weights {w.shape} inconsistent with bias {b.shape}")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)

    @property
    def in_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[1]


@dataclass(frozen=True, eq=False)
class Conv2D:
    kernels: np.ndarray  # (kh, kw, cin, cout)
    stride: int = 1
    padding: str = "valid"
    bias: Optional[np.ndarray] = None  # (cout,)

    def __post_init__(self):
        k = np.asarray(self.kernels, dtype=np.float64)
        if k.ndim != 4:
            raise ShapeError(f"conv kernels must be 4-D (kh, kw, cin, cout), got {k.shape}")
        if self.stride < 1:
            raise ShapeError("conv stride must be >= 1")
        if self.padding not in ("valid", "same"):
            raise ShapeError(f"unknown padding {self.padding!r}; expected 'valid' or 'same'")
        b = np.zeros(k.shape[3]) if self.bias is None else np.asarray(self.bias, dtype=np.float64)
        if b.shape != (k.shape[3],):
            raise ShapeError(f"conv bias {b.shape} does not match {k.shape[3]} output channels")
        object.__setattr__(self, "kernels", k)
        object.__setattr__(self, "bias", b)

    def pads(self, h: int, w: int) -> Tuple[int, int, int, int]:
        """(top, bottom, left, right) zero padding for an ``h x w`` input."""
        kh, kw = self.kernels.shape[:2]
        if self.padding == "valid":
            return 0, 0, 0, 0
        s = self.stride
        ph = max((-(-h // s) - 1) * s + kh - h, 0)
        pw = max((-(-w // s) - 1) * s + kw - w, 0)
        return ph // 2, ph - ph // 2, pw // 2, pw - pw // 2

    def output_shape(self, h: int, w: int) -> Tuple[int, int, int]:
        kh, kw, _, co = self.kernels.shape
        t, b, l, r = self.pads(h, w)
        hp, wp = h + t + b, w + l + r
        if kh > hp or kw > wp:
            raise ShapeError(f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
        return (hp - kh) // self.stride + 1, (wp - kw) // self.stride + 1, co


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class SpatialSoftmax:
    rows: int
    cols: int
    channels: int

    @property
    def out_dim(self) -> int:
        return 2 * self.channels

    def grids(self) -> Tuple[np.ndarray, np.ndarray]:
        """Pixel coordinate grids ``(px, py)`` of shape (rows, cols) in [-1, 1]."""
        xs = np.linspace(-1.0, 1.0, self.cols) if self.cols > 1 else np.zeros(1)
        ys = np.linspace(-1.0, 1.0, self.rows) if self.rows > 1 else np.zeros(1)
        px, py = np.meshgrid(xs, ys)
        return px, py


@dataclass(frozen=True)
class Concat:
    segment_dims: Tuple[int, ...]

    @property
    def out_dim(self) -> int:
        return int(sum(self.segment_dims))


Layer = Union[Dense, Conv2D, ReLU, SpatialSoftmax, Concat]


# -- layer forward ----------------------------------------------------------

def _batched(x, ndim):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == ndim:
        return x[None], True
    if x.ndim == ndim + 1:
        return x, False
    raise ShapeError(f"expected {ndim}-D input (or batch of them), got shape {x.shape}")


def dense_forward(layer: Dense, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != layer.in_dim:
        raise ShapeError(f"dense layer expects {layer.in_dim} inputs, got {x.shape[-1]}")
    return x @ layer.weights + layer.bias


def pad_input(layer: Conv2D, x: np.ndarray) -> np.ndarray:
    t, b, l, r = layer.pads(x.shape[1], x.shape[2])
    if not (t or b or l or r):
        return x
    return np.pad(x, ((0, 0), (t, b), (l, r), (0, 0)))


def conv2d_forward(layer: Conv2D, x) -> np.ndarray:
    xb, single = _batched(x, 3)
    if xb.shape[3] != layer.kernels.shape[2]:
        raise ShapeError(f"conv expects {layer.kernels.shape[2]} channels, got {xb.shape[3]}")
    layer.output_shape(xb.shape[1], xb.shape[2])
    y = kernels.conv_forward(pad_input(layer, xb), layer.kernels, layer.stride) + layer.bias
    return y[0] if single else y


def relu_forward(x) -> np.ndarray:
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def spatial_softmax_weights(layer: SpatialSoftmax, x) -> np.ndarray:
    """Per-channel softmax over pixels; same shape as ``x``."""
    xb, single = _batched(x, 3)
    if xb.shape[1:] != (layer.rows, layer.cols, layer.channels):
        raise ShapeError(
            f"spatial softmax expects {(layer.rows, layer.cols, layer.channels)}, got {xb.shape[1:]}")
    n = xb.shape[0]
    flat = xb.reshape(n, -1, layer.channels)
    e = np.exp(flat - flat.max(axis=1, keepdims=True))
    s = (e / e.sum(axis=1, keepdims=True)).reshape(xb.shape)
    return s[0] if single else s


def spatial_softmax_forward(layer: SpatialSoftmax, x) -> np.ndarray:
    """Expected (x, y) pixel location per channel, interleaved ``[x0, y0, x1, y1, ...]``."""
    s = spatial_softmax_weights(layer, x)
    px, py = layer.grids()
    fx = np.einsum("...hwc,hw->...c", s, px)
    fy = np.einsum("...hwc,hw->...c", s, py)
    return np.stack([fx, fy], axis=-1).reshape(*s.shape[:-3], 2 * layer.channels)


def layer_forward(layer: Layer, x) -> np.ndarray:
    if isinstance(layer, Dense):
        return dense_forward(layer, x)
    if isinstance(layer, Conv2D):
        return conv2d_forward(layer, x)
    if isinstance(layer, ReLU):
        return relu_forward(x)
    if isinstance(layer, SpatialSoftmax):
        return spatial_softmax_forward(layer, x)
    raise TypeError(f"unsupported layer {type(layer).__name__}")


# -- layer backward ---------------------------------------------------------

def layer_backward(layer: Layer, x, y, grad_out, guided: bool = False):
    """Back-propagate ``grad_out`` through one layer.

    Returns ``(grad_in, param_grads)`` where ``param_grads`` is a dict (empty
    for parameter-free layers). With ``guided=True`` ReLU layers also zero
    negative incoming gradients. Batched inputs yield parameter gradients
    summed over the batch.
    """
    if isinstance(layer, Dense):
        gx = grad_out @ layer.weights.T
        xb = np.atleast_2d(x)
        gb = np.atleast_2d(grad_out)
        return gx, {"weights": xb.T @ gb, "bias": gb.sum(axis=0)}
    if isinstance(layer, ReLU):
        mask = np.asarray(x) > 0
        if guided:
            mask = mask & (grad_out > 0)
        return np.where(mask, grad_out, 0.0), {}
    if isinstance(layer, Conv2D):
        xb, single = _batched(x, 3)
        gy, _ = _batched(grad_out, 3)
        xp = pad_input(layer, xb)
        kh, kw = layer.kernels.shape[:2]
        gxp = kernels.conv_backward_input(gy, layer.kernels, layer.stride, xp.shape[1], xp.shape[2])
        t, _, l, _ = layer.pads(xb.shape[1], xb.shape[2])
        gx = gxp[:, t:t + xb.shape[1], l:l + xb.shape[2], :]
        gw = kernels.conv_backward_weights(xp, gy, layer.stride, kh, kw)
        return (gx[0] if single else gx), {"kernels": gw, "bias": gy.sum(axis=(0, 1, 2))}
    if isinstance(layer, SpatialSoftmax):
        s = spatial_softmax_weights(layer, x)
        px, py = layer.grids()
        g = np.asarray(grad_out).reshape(*np.shape(grad_out)[:-1], layer.channels, 2)
        gx_pt = g[..., 0][..., None, None, :]
        gy_pt = g[..., 1][..., None, None, :]
        yv = np.asarray(y).reshape(*np.shape(y)[:-1], layer.channels, 2)
        fx = yv[..., 0][..., None, None, :]
        fy = yv[..., 1][..., None, None, :]
        grad = s * (gx_pt * (px[..., None] - fx) + gy_pt * (py[..., None] - fy))
        return grad, {}
    raise TypeError(f"unsupported layer {type(layer).__name__}")


# -- network ----------------------------------------------------------------

GROUP_ORDER = ("joint_pos", "joint_vel", "ee_pos", "ee_vel")


@dataclass(frozen=True, eq=False)
class PolicyNetwork:
    image_shape: Tuple[int, int, int]
    config_dim: int
    input_groups: Dict[str, Tuple[int, int]]
    vision_layers: List[Layer]
    fusion_layers: List[Layer]

    def __post_init__(self):
        object.__setattr__(self, "image_shape", tuple(int(v) for v in self.image_shape))
        object.__setattr__(self, "input_groups",
                           {k: (int(lo), int(hi)) for k, (lo, hi) in self.input_groups.items()})
        object.__setattr__(self, "vision_layers", list(self.vision_layers))
        object.__setattr__(self, "fusion_layers", list(self.fusion_layers))
        self.validate()

    def validate(self):
        if not self.vision_layers or not isinstance(self.vision_layers[-1], SpatialSoftmax):
            raise ShapeError("vision stack must end in a SpatialSoftmax layer")
        h, w, c = self.image_shape
        for i, layer in enumerate(self.vision_layers[:-1]):
            if isinstance(layer, Conv2D):
                if layer.kernels.shape[2] != c:
                    raise ShapeError(f"vision layer {i}: expects {layer.kernels.shape[2]} channels, got {c}")
                h, w, c = layer.output_shape(h, w)
            elif not isinstance(layer, ReLU):
                raise ShapeError(f"vision layer {i}: {type(layer).__name__} not allowed in vision stack")
        ss = self.vision_layers[-1]
        if (ss.rows, ss.cols, ss.channels) != (h, w, c):
            raise ShapeError(f"spatial softmax declared {(ss.rows, ss.cols, ss.channels)}, "
                             f"vision stack produces {(h, w, c)}")
        spans = sorted(self.input_groups.values())
        pos = 0
        for lo, hi in spans:
            if lo != pos or hi <= lo:
                raise ShapeError(f"input_groups must be disjoint and cover [0, {self.config_dim})")
            pos = hi
        if pos != self.config_dim:
            raise ShapeError(f"input_groups must be disjoint and cover [0, {self.config_dim})")
        dims = ss.out_dim + self.config_dim
        dense_seen = False
        for i, layer in enumerate(self.fusion_layers):
            if isinstance(layer, Dense):
                if layer.in_dim != dims:
                    raise ShapeError(f"fusion layer {i}: expects {layer.in_dim} inputs, got {dims}")
                dims = layer.out_dim
                dense_seen = True
            elif not isinstance(layer, ReLU):
                raise ShapeError(f"fusion layer {i}: {type(layer).__name__} not allowed in fusion stack")
        if not dense_seen or not isinstance(self.fusion_layers[-1], Dense):
            raise ShapeError("fusion stack must end in a linear Dense layer")

    @property
    def spatial_softmax(self) -> SpatialSoftmax:
        return self.vision_layers[-1]

    @property
    def concat(self) -> Concat:
        return Concat((self.spatial_softmax.out_dim, self.config_dim))

    @property
    def n_joints(self) -> int:
        return self.fusion_layers[-1].out_dim

    @property
    def layers(self) -> List[Layer]:
        return self.vision_layers + [self.concat] + self.fusion_layers

    def check_inputs(self, image, config):
        image = np.asarray(image, dtype=np.float64)
        config = np.asarray(config, dtype=np.float64)
        if image.shape[-3:] != self.image_shape:
            raise ShapeError(f"image shape {image.shape} does not match {self.image_shape}")
        if config.shape[-1] != self.config_dim:
            raise ShapeError(f"config dim {config.shape[-1]} does not match {self.config_dim}")
        return image, config


@dataclass
class ForwardTrace:
    """Per-layer (input, output) pairs of one forward pass, in execution order."""

    vision: List[Tuple[np.ndarray, np.ndarray]] = field(default_factory=list)
    concat: Optional[Tuple[Tuple[np.ndarray, np.ndarray], np.ndarray]] = None
    fusion: List[Tuple[np.ndarray, np.ndarray]] = field(default_factory=list)

    @property
    def fused_input(self) -> np.ndarray:
        return self.concat[1]

    @property
    def output(self) -> np.ndarray:
        return self.fusion[-1][1]

    def __len__(self):
        return len(self.vision) + 1 + len(self.fusion)


def network_forward(net: PolicyNetwork, image, config) -> Tuple[np.ndarray, ForwardTrace]:
    """Run the policy; returns ``(torques, trace)``. Accepts a batch axis."""
    image, config = net.check_inputs(image, config)
    if image.ndim == 4 and config.ndim == 1:
        raise ShapeError("batched image requires batched config")
    trace = ForwardTrace()
    h = image
    for layer in net.vision_layers:
        out = layer_forward(layer, h)
        trace.vision.append((h, out))
        h = out
    fused = np.concatenate([h, config], axis=-1)
    trace.concat = ((h, config), fused)
    h = fused
    for layer in net.fusion_layers:
        out = layer_forward(layer, h)
        trace.fusion.append((h, out))
        h = out
    return h, trace


def network_backward(net: PolicyNetwork, trace: ForwardTrace, grad_out, guided: bool = False,
                     hook=None):
    """Back-propagate ``grad_out`` (d/d torques) through a cached trace.

    Returns ``(d_image, d_config, param_grads)`` with ``param_grads`` keyed
    ``("vision"|"fusion", layer_index)``. ``hook(layer, grad_in, grad_out)``
    is called for every ReLU when given.
    """
    params = {}
    g = np.asarray(grad_out, dtype=np.float64)
    for idx in range(len(net.fusion_layers) - 1, -1, -1):
        layer = net.fusion_layers[idx]
        x, y = trace.fusion[idx]
        gin, pg = layer_backward(layer, x, y, g, guided=guided)
        if hook is not None and isinstance(layer, ReLU):
            hook(layer, gin, g)
        if pg:
            params[("fusion", idx)] = pg
        g = gin
    n_feat = net.spatial_softmax.out_dim
    d_config = g[..., n_feat:]
    g = g[..., :n_feat]
    for idx in range(len(net.vision_layers) - 1, -1, -1):
        layer = net.vision_layers[idx]
        x, y = trace.vision[idx]
        gin, pg = layer_backward(layer, x, y, g, guided=guided)
        if hook is not None and isinstance(layer, ReLU):
            hook(layer, gin, g)
        if pg:
            params[("vision", idx)] = pg
        g = gin
    return g, d_config, params


def network_gradient(net: PolicyNetwork, image, config, output_index: int, guided: bool = False):
    """Analytic ``(d_image, d_config)`` of one torque output."""
    torques, trace = network_forward(net, image, config)
    seed = np.zeros_like(torques)
    seed[output_index] = 1.0
    d_image, d_config, _ = network_backward(net, trace, seed, guided=guided)
    return d_image, d_config


def numeric_gradient(net: PolicyNetwork, image, config, output_index: int, h: float = 1e-5):
    """Central finite differences of one torque output, one coordinate at a time."""
    image, config = net.check_inputs(image, config)
    image = image.copy()
    config = config.copy()

    def f():
        return network_forward(net, image, config)[0][output_index]

    d_image = np.zeros_like(image)
    d_config = np.zeros_like(config)
    for arr, out in ((image, d_image), (config, d_config)):
        flat, gflat = arr.reshape(-1), out.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f()
            flat[i] = orig - h
            fm = f()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
    return d_image, d_config


def relu_pattern(net: PolicyNetwork, image, config) -> np.ndarray:
    """Concatenated on/off pattern of every ReLU input; used to spot kinks."""
    _, trace = network_forward(net, image, config)
    parts = []
    for layers, pairs in ((net.vision_layers, trace.vision), (net.fusion_layers, trace.fusion)):
        for layer, (x, _) in zip(layers, pairs):
            if isinstance(layer, ReLU):
                parts.append((x > 0).ravel())
    return np.concatenate(parts) if parts else np.zeros(0, dtype=bool)


# -- construction helpers ---------------------------------------------------

def he_dense(rng, n_in, n_out, bias_scale=0.0) -> Dense:
    w = rng.normal(0.0, np.sqrt(2.0 / n_in), size=(n_in, n_out))
    return Dense(w, rng.normal(0.0, bias_scale, size=n_out) if bias_scale else np.zeros(n_out))


def he_conv(rng, kh, kw, cin, cout, stride=1, padding="valid") -> Conv2D:
    w = rng.normal(0.0, np.sqrt(2.0 / (kh * kw * cin)), size=(kh, kw, cin, cout))
    return Conv2D(w, stride=stride, padding=padding, bias=np.zeros(cout))


def build_network(arch: dict, rng) -> PolicyNetwork:
    """Build a freshly initialised network from an architecture description.

    ``arch`` keys: ``image_shape``, ``input_groups``, ``conv`` (list of
    ``{"kernel": k, "filters": f, "stride": s, "padding": p}``), ``hidden``
    (list of fusion widths) and ``n_joints``.
    """
    h, w, c = arch["image_shape"]
    vision: List[Layer] = []
    convs = arch["conv"]
    for i, spec in enumerate(convs):
        k = spec["kernel"]
        layer = he_conv(rng, k, k, c, spec["filters"], spec.get("stride", 1), spec.get("padding", "valid"))
        vision.append(layer)
        h, w, c = layer.output_shape(h, w)
        if i < len(convs) - 1:
            vision.append(ReLU())
    vision.append(SpatialSoftmax(h, w, c))
    groups = {k: tuple(v) for k, v in arch["input_groups"].items()}
    config_dim = max(hi for _, hi in groups.values())
    fusion: List[Layer] = []
    dim = 2 * c + config_dim
    for width in arch["hidden"]:
        fusion += [he_dense(rng, dim, width), ReLU()]
        dim = width
    fusion.append(Dense(rng.normal(0.0, np.sqrt(1.0 / dim), size=(dim, arch["n_joints"])),
                        np.zeros(arch["n_joints"])))
    return PolicyNetwork(tuple(arch["image_shape"]), config_dim, groups, vision, fusion)
