"""Randomised property suites with independent oracles.

Each suite returns a :class:`SuiteResult`; ``pxray check`` and the acceptance
tests both run them.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List

import numpy as np

from . import attribution as attr
from .kinematics import ArmModel, ArmState, importance_factors, jacobian
from .nn import (Conv2D, Dense, PolicyNetwork, ReLU, SpatialSoftmax, network_gradient,
                 numeric_gradient, relu_pattern)

CONSERVATION_RTOL = 1e-6
GRAD_RTOL = 1e-4
GRAD_ATOL = 1e-6
UNROLL_ATOL = 1e-12
ALPHA_FIXTURE_RTOL = 1e-3
JACOBIAN_RTOL = 0.05


@dataclass
class SuiteResult:
    name: str
    passed: bool
    trials: int
    worst: float
    seconds: float
    detail: Dict[str, object] = field(default_factory=dict)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: trials={self.trials} worst={self.worst:.3e} time={self.seconds:.2f}s"


def random_network(rng, n_dense=None, max_dim=32, image_shape=None, n_joints=None,
                   bias_scale=0.5, extra_conv=None) -> PolicyNetwork:
    """Small random two-branch network with mixed-sign weights and biases."""
    h, w, c = image_shape or (int(rng.integers(5, 8)), int(rng.integers(5, 8)), int(rng.integers(1, 3)))
    vision = []
    k = int(rng.integers(2, 4))
    f = int(rng.integers(2, 4))
    vision.append(Conv2D(rng.normal(size=(k, k, c, f)), stride=1, padding=str(rng.choice(["valid", "same"])),
                         bias=rng.normal(0, bias_scale, size=f)))
    hh, ww, cc = vision[0].output_shape(h, w)
    if extra_conv if extra_conv is not None else rng.random() < 0.5:
        vision.append(ReLU())
        vision.append(Conv2D(rng.normal(size=(2, 2, cc, 2)), bias=rng.normal(0, bias_scale, size=2)))
        hh, ww, cc = vision[-1].output_shape(hh, ww)
    vision.append(SpatialSoftmax(hh, ww, cc))
    n_joints = n_joints or int(rng.integers(2, 4))
    jd = int(rng.integers(1, 3))
    groups = {"joint_pos": (0, jd), "joint_vel": (jd, 2 * jd), "ee_pos": (2 * jd, 2 * jd + 2),
              "ee_vel": (2 * jd + 2, 2 * jd + 4)}
    config_dim = 2 * jd + 4
    n_dense = n_dense or int(rng.integers(2, 5))
    fusion = []
    dim = 2 * cc + config_dim
    for _ in range(n_dense - 1):
        width = int(rng.integers(3, max_dim + 1))
        fusion += [Dense(rng.normal(size=(dim, width)) / np.sqrt(dim), rng.normal(0, bias_scale, size=width)),
                   ReLU()]
        dim = width
    fusion.append(Dense(rng.normal(size=(dim, n_joints)) / np.sqrt(dim), rng.normal(0, bias_scale, size=n_joints)))
    return PolicyNetwork((h, w, c), config_dim, groups, vision, fusion)


def random_inputs(net: PolicyNetwork, rng, signed_image=False):
    image = rng.uniform(-1 if signed_image else 0, 1, size=net.image_shape)
    config = rng.normal(size=net.config_dim)
    return image, config


def random_alpha(rng, n):
    a = rng.random(n) + 0.05
    return a / a.sum()


def _timed(name, fn, trials) -> SuiteResult:
    t0 = time.perf_counter()
    passed, worst, detail = fn()
    return SuiteResult(name, passed, trials, worst, time.perf_counter() - t0, detail)


# -- suites --------------------------------------------------------------------

def conservation_suite(trials: int = 200, seed: int = 0, attribute_fn=None) -> SuiteResult:
    """dtd: sum(R_in) + dropped == sum_j alpha_j |tau_j| on random mixed-sign networks."""
    attribute_fn = attribute_fn or attr.attribute_dtd

    def run():
        rng = np.random.default_rng(seed)
        worst = 0.0
        drops = 0
        for _ in range(trials):
            net = random_network(rng)
            image, config = random_inputs(net, rng, signed_image=bool(rng.random() < 0.3))
            alpha = random_alpha(rng, net.n_joints)
            res = attribute_fn(net, image, config, alpha)
            if res.output_total == 0:
                continue
            err = abs(res.total + res.dropped - res.output_total) / res.output_total
            worst = max(worst, err)
            drops += res.n_dropped + res.n_sign_mismatch
        return worst <= CONSERVATION_RTOL, worst, {"drop_events": drops}

    return _timed("conservation", run, trials)


def _positive_output_layer(rng, n_in, n_out, x):
    w = rng.normal(size=(n_in, n_out))
    pre = x @ w
    w[:, pre < 0] *= -1.0
    return Dense(w, rng.normal(size=n_out))


def reduction_suite(trials: int = 100, seed: int = 0) -> SuiteResult:
    """Signed-input and signed-output rules reduce bit-for-bit to z+ on positive data."""

    def run():
        rng = np.random.default_rng(seed)
        mismatches = n_input = n_output = 0
        while n_input < trials or n_output < trials:
            n_in, n_out = int(rng.integers(1, 33)), int(rng.integers(1, 33))
            x = rng.random(n_in) + 1e-3
            layer = Dense(rng.normal(size=(n_in, n_out)), rng.normal(size=n_out))
            r = rng.normal(size=n_out)
            n_input += 1
            if not np.array_equal(attr.propagate_input_layer(layer, x, r), attr.propagate_dense_zplus(layer, x, r)):
                mismatches += 1
            out_layer = _positive_output_layer(rng, n_in, n_out, x)
            if np.any(x @ out_layer.weights <= 0):
                continue
            r = np.abs(rng.normal(size=n_out))
            n_output += 1
            if not np.array_equal(attr.propagate_output_layer(out_layer, x, r),
                                  attr.propagate_dense_zplus(out_layer, x, r)):
                mismatches += 1
        detail = {"mismatches": mismatches, "input_cases": n_input, "output_cases": n_output}
        return mismatches == 0, float(mismatches), detail

    return _timed("reduction", run, trials)


def gradient_check(net, image, config, j):
    """Worst violation of the analytic-vs-finite-difference tolerance for output ``j``.

    Coordinates whose +-h probe flips a ReLU are skipped (the finite
    difference straddles a kink there). Returns (worst_excess, n_checked, n_skipped)
    where a non-positive excess means every checked coordinate passed.
    """
    h = 1e-5
    ga_img, ga_cfg = network_gradient(net, image, config, j)
    gn_img, gn_cfg = numeric_gradient(net, image, config, j, h=h)
    base = relu_pattern(net, image, config)
    worst, checked, skipped = -np.inf, 0, 0
    for arr, ga, gn in ((image, ga_img, gn_img), (config, ga_cfg, gn_cfg)):
        flat = arr.reshape(-1)
        for i in range(flat.size):
            a, n = ga.reshape(-1)[i], gn.reshape(-1)[i]
            err = abs(a - n)
            if err > GRAD_ATOL and err > GRAD_RTOL * abs(n):
                orig = flat[i]
                flat[i] = orig + h
                p_hi = relu_pattern(net, image, config)
                flat[i] = orig - h
                p_lo = relu_pattern(net, image, config)
                flat[i] = orig
                if not (np.array_equal(base, p_hi) and np.array_equal(base, p_lo)):
                    skipped += 1
                    continue
            checked += 1
            worst = max(worst, min(err - GRAD_ATOL, err - GRAD_RTOL * abs(n)))
    return worst, checked, skipped


def gradient_suite(trials: int = 100, seed: int = 0) -> SuiteResult:
    """Analytic backprop vs central differences on random conv + spatial-softmax nets."""

    def run():
        rng = np.random.default_rng(seed)
        worst = -np.inf
        checked = skipped = 0
        for _ in range(trials):
            net = random_network(rng, max_dim=12,
                                 image_shape=(int(rng.integers(4, 7)), int(rng.integers(4, 7)), 1))
            image, config = random_inputs(net, rng, signed_image=True)
            j = int(rng.integers(net.n_joints))
            w, c, s = gradient_check(net, image, config, j)
            worst = max(worst, w)
            checked += c
            skipped += s
        return worst <= 0, float(max(worst, 0.0)), {"checked": checked, "skipped_kinks": skipped}

    return _timed("gradients", run, trials)


def unrolled_conv_matrix(layer: Conv2D, in_shape):
    """Dense matrix of a convolution built by explicit index arithmetic."""
    h, w, ci = in_shape
    kh, kw, _, co = layer.kernels.shape
    ho, wo, _ = layer.output_shape(h, w)
    top, _, left, _ = layer.pads(h, w)
    m = np.zeros((h * w * ci, ho * wo * co))
    for i in range(ho):
        for j in range(wo):
            for k in range(co):
                col = (i * wo + j) * co + k
                for u in range(kh):
                    for v in range(kw):
                        r = i * layer.stride + u - top
                        q = j * layer.stride + v - left
                        if 0 <= r < h and 0 <= q < w:
                            for c in range(ci):
                                m[(r * w + q) * ci + c, col] = layer.kernels[u, v, c, k]
    return m


def unroll_suite(trials: int = 50, seed: int = 0) -> SuiteResult:
    """Conv z+ propagation equals z+ on the unrolled dense matrix (6x6 inputs)."""

    def run():
        rng = np.random.default_rng(seed)
        worst = 0.0
        for _ in range(trials):
            ci, co = int(rng.integers(1, 4)), int(rng.integers(1, 4))
            k = int(rng.integers(1, 4))
            layer = Conv2D(rng.normal(size=(k, k, ci, co)), stride=int(rng.integers(1, 3)),
                           padding=str(rng.choice(["valid", "same"])))
            x = rng.random((6, 6, ci))
            ho, wo, _ = layer.output_shape(6, 6)
            r = rng.normal(size=(ho, wo, co))
            got = attr.propagate_conv_zplus(layer, x, r)
            m = unrolled_conv_matrix(layer, x.shape)
            ref = attr.propagate_dense_zplus(Dense(m, np.zeros(m.shape[1])), x.ravel(), r.ravel())
            worst = max(worst, float(np.max(np.abs(got.ravel() - ref))))
        return worst <= UNROLL_ATOL, worst, {}

    return _timed("conv_unroll", run, trials)


def kinematics_suite(trials: int = 50, seed: int = 0) -> SuiteResult:
    """alpha fixture [2/3, 1/3] and agreement with Jacobian column norms."""

    def run():
        rng = np.random.default_rng(seed)
        fixture = ArmModel([1.0, 1.0], [1.0, 1.0], dt=0.01)
        a = importance_factors(fixture, ArmState([0.0, 0.0])).alpha
        fixture_err = float(np.max(np.abs(a - [2 / 3, 1 / 3]) / np.array([2 / 3, 1 / 3])))
        worst = 0.0
        for _ in range(trials):
            n = int(rng.integers(1, 5))
            model = ArmModel(rng.uniform(0.3, 1.5, n), rng.uniform(0.5, 2.0, n),
                             dt=float(rng.uniform(0.001, 0.01)))
            state = ArmState(rng.uniform(-np.pi, np.pi, n), rng.normal(0, 0.5, n))
            a = importance_factors(model, state).alpha
            pred = np.linalg.norm(jacobian(model, state.theta), axis=0) / model.joint_inertias
            pred = pred / pred.sum()
            worst = max(worst, float(np.max(np.abs(a - pred) / pred)))
        ok = fixture_err <= ALPHA_FIXTURE_RTOL and worst <= JACOBIAN_RTOL
        return ok, max(worst, fixture_err), {"fixture_rel_err": fixture_err, "jacobian_rel_err": worst}

    return _timed("kinematics", run, trials)


SUITES: Dict[str, Callable[..., SuiteResult]] = {
    "conservation": conservation_suite,
    "reduction": reduction_suite,
    "gradients": gradient_suite,
    "conv_unroll": unroll_suite,
    "kinematics": kinematics_suite,
}


def run_suites(names: List[str], trials: int, seed: int) -> List[SuiteResult]:
    return [SUITES[n](trials=trials, seed=seed) for n in names]
