"""JSON weight files for :class:`~pxray.nn.PolicyNetwork`.

Layout::

    {"version": 1, "image_shape": [H, W, C], "config_dim": N,
     "input_groups": {"joint_pos": [lo, hi], ...},
     "vision_layers": [...], "fusion_layers": [...]}

Arrays are stored flat in row-major order next to their shape fields. Floats
are written with 17 significant digits so a round trip is exact.
"""
from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from .nn import Conv2D, Dense, PolicyNetwork, ReLU, ShapeError, SpatialSoftmax

FORMAT_VERSION = 1
SUPPORTED_TYPES = ("dense", "conv2d", "relu", "spatial_softmax")


class WeightFileError(Exception):
    """Base class for weight-file problems."""


class WeightParseError(WeightFileError):
    """Malformed JSON, missing fields or unknown layer types."""


class WeightDimensionError(WeightFileError):
    """Array lengths or shapes that do not fit together."""


class WeightVersionError(WeightFileError):
    """File written by an unsupported format version."""


def _layer_to_dict(layer):
    if isinstance(layer, Dense):
        return {"type": "dense", "in_dim": layer.in_dim, "out_dim": layer.out_dim,
                "weights": layer.weights.ravel().tolist(), "bias": layer.bias.tolist()}
    if isinstance(layer, Conv2D):
        kh, kw, ci, co = layer.kernels.shape
        return {"type": "conv2d", "kernel_shape": [kh, kw, ci, co], "stride": layer.stride,
                "padding": layer.padding, "weights": layer.kernels.ravel().tolist(),
                "bias": layer.bias.tolist()}
    if isinstance(layer, ReLU):
        return {"type": "relu"}
    if isinstance(layer, SpatialSoftmax):
        return {"type": "spatial_softmax", "rows": layer.rows, "cols": layer.cols,
                "channels": layer.channels}
    raise TypeError(f"cannot serialise {type(layer).__name__}")


def network_to_dict(net: PolicyNetwork) -> dict:
    return {
        "version": FORMAT_VERSION,
        "image_shape": list(net.image_shape),
        "config_dim": net.config_dim,
        "input_groups": {k: [lo, hi] for k, (lo, hi) in net.input_groups.items()},
        "vision_layers": [_layer_to_dict(l) for l in net.vision_layers],
        "fusion_layers": [_layer_to_dict(l) for l in net.fusion_layers],
    }


def _array(obj, key, shape, where):
    if key not in obj:
        raise WeightParseError(f"{where}: missing field {key!r}")
    try:
        arr = np.asarray(obj[key], dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise WeightParseError(f"{where}: field {key!r} is not numeric") from exc
    expected = int(np.prod(shape))
    if arr.ndim != 1 or arr.size != expected:
        raise WeightDimensionError(
            f"{where}: {key!r} has {arr.size} values, expected {expected} for shape {tuple(shape)}")
    if not np.all(np.isfinite(arr)):
        raise WeightParseError(f"{where}: {key!r} contains non-finite values")
    return arr.reshape(shape)


def _layer_from_dict(obj, where):
    if not isinstance(obj, dict) or "type" not in obj:
        raise WeightParseError(f"{where}: layer must be an object with a 'type' field")
    kind = obj["type"]
    try:
        if kind == "dense":
            n_in, n_out = int(obj["in_dim"]), int(obj["out_dim"])
            return Dense(_array(obj, "weights", (n_in, n_out), where), _array(obj, "bias", (n_out,), where))
        if kind == "conv2d":
            shape = tuple(int(v) for v in obj["kernel_shape"])
            if len(shape) != 4:
                raise WeightDimensionError(f"{where}: kernel_shape must have 4 entries")
            bias = _array(obj, "bias", (shape[3],), where) if "bias" in obj else None
            return Conv2D(_array(obj, "weights", shape, where), stride=int(obj.get("stride", 1)),
                          padding=obj.get("padding", "valid"), bias=bias)
        if kind == "relu":
            return ReLU()
        if kind == "spatial_softmax":
            return SpatialSoftmax(int(obj["rows"]), int(obj["cols"]), int(obj["channels"]))
    except KeyError as exc:
        raise WeightParseError(f"{where}: missing field {exc.args[0]!r}") from exc
    except ShapeError as exc:
        raise WeightDimensionError(f"{where}: {exc}") from exc
    raise WeightParseError(f"{where}: unknown layer type {kind!r}; supported types: "
                           + ", ".join(SUPPORTED_TYPES))


def network_from_dict(obj) -> PolicyNetwork:
    if not isinstance(obj, dict):
        raise WeightParseError("weight file must contain a JSON object")
    if obj.get("version") != FORMAT_VERSION:
        raise WeightVersionError(f"unsupported weight file version {obj.get('version')!r}; "
                                 f"expected {FORMAT_VERSION}")
    try:
        image_shape = tuple(int(v) for v in obj["image_shape"])
        config_dim = int(obj["config_dim"])
        groups = {k: (int(v[0]), int(v[1])) for k, v in obj["input_groups"].items()}
        vision = [_layer_from_dict(l, f"vision layer {i}") for i, l in enumerate(obj["vision_layers"])]
        fusion = [_layer_from_dict(l, f"fusion layer {i}") for i, l in enumerate(obj["fusion_layers"])]
    except KeyError as exc:
        raise WeightParseError(f"missing top-level field {exc.args[0]!r}") from exc
    except (TypeError, ValueError, IndexError) as exc:
        if isinstance(exc, WeightFileError):
            raise
        raise WeightParseError(f"malformed weight file: {exc}") from exc
    try:
        return PolicyNetwork(image_shape, config_dim, groups, vision, fusion)
    except ShapeError as exc:
        raise WeightDimensionError(str(exc)) from exc


def dumps(obj, indent=0, _level=0) -> str:
    """Deterministic JSON text with 17-significant-digit floats."""
    if isinstance(obj, dict):
        pad = " " * (indent * (_level + 1))
        items = [f"{pad}{json.dumps(str(k))}: {dumps(v, indent, _level + 1)}" for k, v in obj.items()]
        if not items:
            return "{}"
        sep = ",\n" if indent else ", "
        lead = "\n" if indent else ""
        tail = "\n" + " " * (indent * _level) if indent else ""
        return "{" + lead + sep.join(items) + tail + "}"
    if isinstance(obj, (list, tuple)):
        return "[" + ", ".join(dumps(v, indent, _level + 1) for v in obj) + "]"
    if isinstance(obj, bool) or obj is None:
        return json.dumps(obj)
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        if not math.isfinite(v):
            raise ValueError("non-finite float cannot be serialised")
        return format(v, ".16e")
    if isinstance(obj, str):
        return json.dumps(obj)
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def save_weights(net: PolicyNetwork, path) -> None:
    Path(path).write_text(dumps(network_to_dict(net), indent=1) + "\n", encoding="utf-8")


def load_weights(path) -> PolicyNetwork:
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise WeightParseError(f"{path}: invalid JSON ({exc})") from exc
    return network_from_dict(obj)
