"""Relevance propagation from torque outputs back to image pixels and configuration.

Three backends share one backward walk over a :class:`~pxray.nn.ForwardTrace`:

``dtd``
    z+ rule in hidden layers, the signed-output rule at the torque layer and
    the signed-input rule wherever a layer input can be negative (the concat
    of feature points and configuration, raw signed pixels).
``rap``
    signed z-rule fractions followed by absolute value and renormalisation
    to the incoming layer total.
``gbp``
    guided backpropagation of every torque, weighted by ``alpha_j * |tau_j|``,
    times the input.

Columns whose denominator is exactly zero are dropped rather than
stabilised; every rule accounts the dropped relevance in a
:class:`DropCounter` so that ``sum(input relevance) + dropped`` equals the
initial output mass.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import kernels
from .kinematics import ImportanceFactors
from .nn import (Conv2D, Dense, PolicyNetwork, ReLU, SpatialSoftmax, network_backward,
                 network_forward, pad_input, spatial_softmax_weights)

METHODS = ("dtd", "rap", "gbp")
SPATIAL_EPS = 1e-3


class ContractViolation(ValueError):
    """A propagation rule was called outside its precondition."""


@dataclass
class DropCounter:
    """Relevance removed at zero-denominator columns (and sign mismatches at the output)."""

    mass: float = 0.0
    count: int = 0
    sign_mismatch: int = 0

    def drop(self, values):
        values = np.asarray(values, dtype=np.float64)
        nz = values != 0
        self.mass += float(values[nz].sum())
        self.count += int(nz.sum())


def _route(den, r_out, drops):
    """Per-column scale ``R_j / den_j``; zero denominators dropped."""
    keep = den != 0
    if drops is not None and not keep.all():
        drops.drop(np.where(keep, 0.0, r_out))
    return np.where(keep, r_out / np.where(keep, den, 1.0), 0.0)


def _split(w):
    return np.maximum(w, 0.0), np.minimum(w, 0.0)


# -- dense rules -------------------------------------------------------------

def init_output_relevance(torques, alpha: ImportanceFactors) -> np.ndarray:
    torques = np.asarray(torques, dtype=np.float64)
    a = alpha.alpha if isinstance(alpha, ImportanceFactors) else np.asarray(alpha, dtype=np.float64)
    if a.shape != torques.shape:
        raise ValueError(f"{a.size} importance factors for {torques.size} torques")
    return a * torques


def propagate_dense_zplus(layer: Dense, x, r_out, drops: Optional[DropCounter] = None) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if np.any(x < 0):
        raise ContractViolation("z+ rule needs non-negative inputs; use propagate_input_layer")
    wp, _ = _split(layer.weights)
    s = _route(x @ wp, np.asarray(r_out, dtype=np.float64), drops)
    return x * (wp @ s)


def propagate_input_layer(layer: Dense, x, r_out, drops: Optional[DropCounter] = None) -> np.ndarray:
    """Signed-input rule: negative inputs route through their negative weights."""
    x = np.asarray(x, dtype=np.float64)
    xp, xn = np.maximum(x, 0.0), np.minimum(x, 0.0)
    wp, wn = _split(layer.weights)
    s = _route(xp @ wp + xn @ wn, np.asarray(r_out, dtype=np.float64), drops)
    return xp * (wp @ s) + xn * (wn @ s)


def propagate_output_layer(layer: Dense, x, r_out, drops: Optional[DropCounter] = None) -> np.ndarray:
    """Signed-output rule for the torque layer.

    Outputs whose bias-free pre-activation is positive route through
    positive contributions; negative ones through negative contributions
    with the sign flipped, so the propagated mass is ``|R_j|`` when the sign
    of ``R_j`` agrees with the pre-activation. Signed inputs are handled as in
    :func:`propagate_input_layer`.
    """
    x = np.asarray(x, dtype=np.float64)
    r_out = np.asarray(r_out, dtype=np.float64)
    xp, xn = np.maximum(x, 0.0), np.minimum(x, 0.0)
    wp, wn = _split(layer.weights)
    pre = x @ layer.weights
    pos, neg = pre > 0, pre < 0
    den_pos = xp @ wp + xn @ wn
    den_neg = xp @ wn + xn @ wp
    s_pos = np.where(pos, r_out / np.where(pos, den_pos, 1.0), 0.0)
    s_neg = np.where(neg, -r_out / np.where(neg, den_neg, 1.0), 0.0)
    if drops is not None:
        dead = ~(pos | neg)
        drops.drop(np.where(dead, np.abs(r_out), 0.0))
        routed = np.where(pos, r_out, 0.0) - np.where(neg, r_out, 0.0)
        mismatch = (~dead) & (routed < 0)
        if mismatch.any():
            drops.mass += float(np.sum(np.abs(r_out[mismatch]) - routed[mismatch]))
            drops.sign_mismatch += int(mismatch.sum())
    return xp * (wp @ s_pos) + xn * (wn @ s_pos) + xp * (wn @ s_neg) + xn * (wp @ s_neg)


def propagate_dense_z(layer: Dense, x, r_out, drops: Optional[DropCounter] = None) -> np.ndarray:
    """Plain z-rule with both signs of contribution (used by RAP)."""
    x = np.asarray(x, dtype=np.float64)
    s = _route(x @ layer.weights, np.asarray(r_out, dtype=np.float64), drops)
    return x * (layer.weights @ s)


def propagate_relu(x_pre, r_out, strict: bool = True, drops: Optional[DropCounter] = None) -> np.ndarray:
    """Identity on active units.

    Relevance on inactive units (``x_pre <= 0``) is a contract violation in
    strict mode; otherwise it is dropped and counted.
    """
    x_pre = np.asarray(x_pre)
    r_out = np.asarray(r_out, dtype=np.float64)
    bad = (x_pre <= 0) & (r_out != 0)
    if bad.any():
        if strict:
            raise ContractViolation(f"{int(bad.sum())} inactive ReLU units carry relevance")
        if drops is not None:
            drops.drop(np.where(bad, r_out, 0.0))
        return np.where(bad, 0.0, r_out)
    return r_out.copy()


# -- vision rules --------------------------------------------------------------

def propagate_spatial_softmax(layer: SpatialSoftmax, x, r_points) -> np.ndarray:
    """Spread each channel's feature-point relevance over its pixels.

    Pixel weights are the softmax weight times ``|px| + |py| + eps``,
    normalised per channel, so every channel conserves its relevance.
    """
    s = spatial_softmax_weights(layer, x)
    px, py = layer.grids()
    w = s * (np.abs(px) + np.abs(py) + SPATIAL_EPS)[..., None]
    w = w / w.sum(axis=(0, 1), keepdims=True)
    r = np.asarray(r_points, dtype=np.float64).reshape(layer.channels, 2).sum(axis=1)
    return w * r


def _conv_terms(layer: Conv2D, parts, r_out, drops):
    """Route ``r_out`` through ``sum_k conv(x_k, w_k)`` fractions; ``parts`` = [(x_k, w_k)]."""
    x0 = parts[0][0]
    h, w_ = x0.shape[:2]
    padded = [(pad_input(layer, xk[None]), wk) for xk, wk in parts]
    den = sum(kernels.conv_forward(xk, wk, layer.stride)[0] for xk, wk in padded)
    s = _route(den, np.asarray(r_out, dtype=np.float64), drops)
    t, _, l, _ = layer.pads(h, w_)
    hp, wp = padded[0][0].shape[1:3]
    out = np.zeros_like(x0)
    for (xk, wk), (xorig, _) in zip(padded, parts):
        back = kernels.conv_backward_input(s[None], wk, layer.stride, hp, wp)[0]
        out = out + xorig * back[t:t + h, l:l + w_, :]
    return out


def propagate_conv_zplus(layer: Conv2D, x, r_out, drops: Optional[DropCounter] = None) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if np.any(x < 0):
        raise ContractViolation("z+ rule needs non-negative inputs; use propagate_conv_input")
    wp, _ = _split(layer.kernels)
    return _conv_terms(layer, [(x, wp)], r_out, drops)


def propagate_conv_input(layer: Conv2D, x, r_out, drops: Optional[DropCounter] = None) -> np.ndarray:
    """Signed-input rule for a convolution over possibly negative inputs."""
    x = np.asarray(x, dtype=np.float64)
    wp, wn = _split(layer.kernels)
    return _conv_terms(layer, [(np.maximum(x, 0.0), wp), (np.minimum(x, 0.0), wn)], r_out, drops)


def propagate_conv_z(layer: Conv2D, x, r_out, drops: Optional[DropCounter] = None) -> np.ndarray:
    return _conv_terms(layer, [(np.asarray(x, dtype=np.float64), layer.kernels)], r_out, drops)


# -- results -------------------------------------------------------------------

@dataclass
class AttributionResult:
    image_relevance: np.ndarray
    config_relevance: np.ndarray
    group_totals: Dict[str, float]
    method: str
    output_total: float
    dropped: float = 0.0
    n_dropped: int = 0
    n_sign_mismatch: int = 0
    torques: Optional[np.ndarray] = None
    alpha: Optional[np.ndarray] = None
    feature_relevance: Optional[np.ndarray] = None
    layer_totals: List[Tuple[str, float]] = field(default_factory=list)

    @property
    def total(self) -> float:
        return float(self.image_relevance.sum() + self.config_relevance.sum())

    @property
    def group_totals_abs(self) -> Dict[str, float]:
        out = {"image": float(np.abs(self.image_relevance).sum())}
        for name, (lo, hi) in self._groups.items():
            out[name] = float(np.abs(self.config_relevance[lo:hi]).sum())
        return out

    _groups: Dict[str, Tuple[int, int]] = field(default_factory=dict, repr=False)


def _group_totals(net: PolicyNetwork, image_r, config_r) -> Dict[str, float]:
    out = {"image": float(image_r.sum())}
    for name, (lo, hi) in net.input_groups.items():
        out[name] = float(config_r[lo:hi].sum())
    return out


def _result(net, method, image_r, config_r, torques, alpha, out_total, drops, feat_r, totals):
    return AttributionResult(
        image_relevance=image_r, config_relevance=config_r,
        group_totals=_group_totals(net, image_r, config_r), method=method,
        output_total=out_total, dropped=drops.mass, n_dropped=drops.count,
        n_sign_mismatch=drops.sign_mismatch, torques=torques, alpha=alpha,
        feature_relevance=feat_r, layer_totals=totals, _groups=dict(net.input_groups))


def _alpha_array(alpha, n):
    a = alpha.alpha if isinstance(alpha, ImportanceFactors) else np.asarray(alpha, dtype=np.float64)
    if a.shape != (n,):
        raise ValueError(f"{a.size} importance factors for {n} torques")
    return a


def _renormalise(r_raw, target, drops):
    """|r_raw| rescaled to sum to ``target``; all-zero layers drop ``target``."""
    a = np.abs(r_raw)
    s = a.sum()
    if s == 0:
        if target != 0:
            drops.mass += target
            drops.count += 1
        return a
    return a * (target / s)


def _relevance_walk(net: PolicyNetwork, trace, r_start, method: str, drops: DropCounter):
    """Shared backward walk for the ``dtd`` and ``rap`` backends."""
    totals = [("output", float(np.sum(np.abs(r_start))))]
    r = r_start
    dense_ids = [i for i, l in enumerate(net.fusion_layers) if isinstance(l, Dense)]
    last = dense_ids[-1]
    for idx in range(len(net.fusion_layers) - 1, -1, -1):
        layer = net.fusion_layers[idx]
        x, _ = trace.fusion[idx]
        if isinstance(layer, ReLU):
            r = propagate_relu(x, r, strict=False, drops=drops)
        elif method == "rap":
            before = drops.mass
            raw = propagate_dense_z(layer, x, r, drops)
            r = _renormalise(raw, float(r.sum()) - (drops.mass - before), drops)
        elif idx == last:
            r = propagate_output_layer(layer, x, r, drops)
        elif np.any(x < 0):
            r = propagate_input_layer(layer, x, r, drops)
        else:
            r = propagate_dense_zplus(layer, x, r, drops)
        totals.append((f"fusion[{idx}]", float(r.sum())))
    n_feat = net.spatial_softmax.out_dim
    r_feat, r_config = r[:n_feat], r[n_feat:]
    r = r_feat
    for idx in range(len(net.vision_layers) - 1, -1, -1):
        layer = net.vision_layers[idx]
        x, _ = trace.vision[idx]
        if isinstance(layer, SpatialSoftmax):
            r = propagate_spatial_softmax(layer, x, r)
        elif isinstance(layer, ReLU):
            r = propagate_relu(x, r, strict=False, drops=drops)
        elif method == "rap":
            before = drops.mass
            raw = propagate_conv_z(layer, x, r, drops)
            r = _renormalise(raw, float(r.sum()) - (drops.mass - before), drops)
        elif np.any(x < 0):
            r = propagate_conv_input(layer, x, r, drops)
        else:
            r = propagate_conv_zplus(layer, x, r, drops)
        totals.append((f"vision[{idx}]", float(r.sum() + r_config.sum())))
    return r, r_config, r_feat, totals


def attribute_dtd(net: PolicyNetwork, image, config, alpha) -> AttributionResult:
    torques, trace = network_forward(net, image, config)
    a = _alpha_array(alpha, torques.size)
    drops = DropCounter()
    r0 = init_output_relevance(torques, a)
    img_r, cfg_r, feat_r, totals = _relevance_walk(net, trace, r0, "dtd", drops)
    return _result(net, "dtd", img_r, cfg_r, torques, a, float(np.sum(np.abs(r0))), drops, feat_r, totals)


def attribute_rap(net: PolicyNetwork, image, config, alpha) -> AttributionResult:
    torques, trace = network_forward(net, image, config)
    a = _alpha_array(alpha, torques.size)
    drops = DropCounter()
    r0 = init_output_relevance(np.abs(torques), a)
    img_r, cfg_r, feat_r, totals = _relevance_walk(net, trace, r0, "rap", drops)
    return _result(net, "rap", img_r, cfg_r, torques, a, float(r0.sum()), drops, feat_r, totals)


def guided_gradients(net: PolicyNetwork, image, config, hook=None):
    """Per-output guided gradients of ``|tau_j|``; returns (torques, [(d_image, d_config)])."""
    torques, trace = network_forward(net, image, config)
    grads = []
    for j in range(torques.size):
        seed = np.zeros_like(torques)
        seed[j] = np.sign(torques[j])
        d_img, d_cfg, _ = network_backward(net, trace, seed, guided=True, hook=hook)
        grads.append((d_img, d_cfg))
    return torques, grads


def attribute_gbp(net: PolicyNetwork, image, config, alpha, hook=None) -> AttributionResult:
    image, config = net.check_inputs(image, config)
    torques, grads = guided_gradients(net, image, config, hook=hook)
    a = _alpha_array(alpha, torques.size)
    weights = a * np.abs(torques)
    g_img = sum(wj * gi for wj, (gi, _) in zip(weights, grads))
    g_cfg = sum(wj * gc for wj, (_, gc) in zip(weights, grads))
    img_r = g_img * image
    cfg_r = g_cfg * config
    drops = DropCounter()
    return _result(net, "gbp", img_r, cfg_r, torques, a, float(weights.sum()), drops, None,
                   [("input", float(img_r.sum() + cfg_r.sum()))])


_BACKENDS = {"dtd": attribute_dtd, "rap": attribute_rap, "gbp": attribute_gbp}


def attribute(net: PolicyNetwork, image, config, alpha, method: str = "dtd") -> AttributionResult:
    try:
        fn = _BACKENDS[method]
    except KeyError:
        raise ValueError(f"unknown method {method!r}; valid methods: {', '.join(METHODS)}") from None
    return fn(net, image, config, alpha)
