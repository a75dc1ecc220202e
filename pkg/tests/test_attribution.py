import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pxray import attribution as attr
from pxray.analysis import group_ratios
from pxray.checks import random_alpha, random_inputs, random_network
from pxray.kinematics import ImportanceFactors, uniform_factors
from pxray.nn import (Conv2D, Dense, PolicyNetwork, ReLU, SpatialSoftmax, conv2d_forward, network_forward,
                      network_gradient, spatial_softmax_weights)

from conftest import GROUPS_2J, tiny_net

EXACT = dict(rtol=0, atol=1e-12)


def dense(w):
    w = np.asarray(w, dtype=float)
    return Dense(w, np.zeros(w.shape[1]))


# -- output initialisation ----------------------------------------------------------

@pytest.mark.parametrize("tau, alpha, expected", [
    ([1, -2], [0.5, 0.5], [0.5, -1.0]),
    ([3, 1], [2 / 3, 1 / 3], [2.0, 1 / 3]),
])
def test_init_output_relevance(tau, alpha, expected):
    got = attr.init_output_relevance(np.array(tau, float), ImportanceFactors(np.array(alpha)))
    np.testing.assert_allclose(got, expected, **EXACT)


def test_init_uniform_is_tau_over_j():
    tau = np.array([0.3, -1.2, 4.0])
    np.testing.assert_allclose(attr.init_output_relevance(tau, uniform_factors(3)), tau / 3, **EXACT)


def test_init_length_mismatch():
    with pytest.raises(ValueError):
        attr.init_output_relevance(np.ones(3), uniform_factors(2))


# -- hand-worked signed-output / signed-input fixtures -----------------------------

def test_output_rule_negative_output():
    d = attr.DropCounter()
    r = attr.propagate_output_layer(dense([[-1], [-1]]), np.array([1.0, 1.0]), np.array([-2.0]), d)
    np.testing.assert_allclose(r, [1.0, 1.0], **EXACT)
    assert r.sum() == 2.0 and d.mass == 0 and d.sign_mismatch == 0


def test_output_rule_positive_outputs():
    r = attr.propagate_output_layer(dense([[1, -1], [1, 1]]), np.array([1.0, 2.0]), np.array([3.0, 1.0]))
    np.testing.assert_allclose(r, [1.0, 3.0], **EXACT)


def test_output_rule_zero_input_drops_both():
    d = attr.DropCounter()
    r = attr.propagate_output_layer(dense([[1, -1], [1, 1]]), np.zeros(2), np.array([3.0, 1.0]), d)
    assert not r.any()
    assert d.count == 2 and d.mass == 4.0


def test_output_rule_sign_mismatch_accounted():
    # bias makes the torque negative while the bias-free sum is positive
    d = attr.DropCounter()
    layer = Dense(np.array([[1.0]]), np.array([-5.0]))
    r = attr.propagate_output_layer(layer, np.array([1.0]), np.array([-4.0]), d)
    assert d.sign_mismatch == 1
    assert r.sum() + d.mass == pytest.approx(4.0, abs=1e-12)


def test_input_rule_negative_input_negative_weight():
    r = attr.propagate_input_layer(dense([[-1], [1]]), np.array([-1.0, 2.0]), np.array([3.0]))
    np.testing.assert_allclose(r, [1.0, 2.0], **EXACT)


def test_input_rule_negative_input_positive_weight():
    r = attr.propagate_input_layer(dense([[1], [1]]), np.array([-1.0, 2.0]), np.array([1.0]))
    np.testing.assert_allclose(r, [0.0, 1.0], **EXACT)


def test_input_rule_reduces_to_zplus(rng):
    for _ in range(20):
        layer = Dense(rng.normal(size=(6, 4)), rng.normal(size=4))
        x, r = rng.random(6), rng.normal(size=4)
        assert np.array_equal(attr.propagate_input_layer(layer, x, r), attr.propagate_dense_zplus(layer, x, r))


# -- z+ and ReLU ------------------------------------------------------------------------

def test_zplus_identity():
    np.testing.assert_array_equal(attr.propagate_dense_zplus(dense(np.eye(2)), np.array([2.0, 3.0]),
                                                              np.array([4.0, 5.0])), [4.0, 5.0])


def test_zplus_fractions():
    r = attr.propagate_dense_zplus(dense([[1, -1], [1, 1]]), np.array([1.0, 2.0]), np.array([3.0, 1.0]))
    np.testing.assert_allclose(r, [1.0, 3.0], **EXACT)


def test_zplus_no_positive_contributions_drops():
    d = attr.DropCounter()
    r = attr.propagate_dense_zplus(dense([[-1], [-1]]), np.array([1.0, 1.0]), np.array([5.0]), d)
    np.testing.assert_array_equal(r, [0.0, 0.0])
    assert d.count == 1 and d.mass == 5.0


def test_zplus_rejects_negative_input():
    with pytest.raises(attr.ContractViolation):
        attr.propagate_dense_zplus(dense([[1]]), np.array([-1.0]), np.array([1.0]))


def test_relu_pass_through():
    np.testing.assert_array_equal(attr.propagate_relu(np.array([1.0, -1.0]), np.array([0.3, 0.0])), [0.3, 0.0])
    r = np.array([0.1, -0.2, 0.3])
    np.testing.assert_array_equal(attr.propagate_relu(np.array([1.0, 2.0, 3.0]), r), r)


def test_relu_contract_violation_and_non_strict_drop():
    with pytest.raises(attr.ContractViolation):
        attr.propagate_relu(np.array([-1.0]), np.array([0.5]))
    d = attr.DropCounter()
    out = attr.propagate_relu(np.array([-1.0, 2.0]), np.array([0.5, 0.25]), strict=False, drops=d)
    np.testing.assert_array_equal(out, [0.0, 0.25])
    assert d.mass == 0.5 and d.count == 1


# -- spatial softmax ----------------------------------------------------------------

def test_spatial_softmax_rule_zero():
    layer = SpatialSoftmax(3, 4, 2)
    assert not attr.propagate_spatial_softmax(layer, np.ones((3, 4, 2)), np.zeros(4)).any()


def test_spatial_softmax_rule_saturated():
    layer = SpatialSoftmax(4, 4, 1)
    x = np.zeros((4, 4, 1))
    x[2, 1, 0] = 1000.0
    r = attr.propagate_spatial_softmax(layer, x, np.array([0.7, 0.5]))
    assert r[2, 1, 0] == pytest.approx(1.2, abs=1e-6)
    assert np.abs(r).sum() - abs(r[2, 1, 0]) < 1e-6


def test_spatial_softmax_rule_conserves_per_channel(rng):
    for _ in range(20):
        h, w, c = rng.integers(1, 7, size=3)
        layer = SpatialSoftmax(int(h), int(w), int(c))
        x = rng.normal(size=(h, w, c)) * 2
        rp = rng.normal(size=2 * c)
        r = attr.propagate_spatial_softmax(layer, x, rp)
        np.testing.assert_allclose(r.sum(axis=(0, 1)), rp.reshape(c, 2).sum(axis=1), rtol=0, atol=1e-9)


# -- convolution ----------------------------------------------------------------------

def conv_matrix_by_basis(layer, shape):
    """Linear part of the conv, recovered by pushing basis images through the forward pass."""
    zero_bias = Conv2D(layer.kernels, layer.stride, layer.padding)
    n = int(np.prod(shape))
    cols = []
    for i in range(n):
        e = np.zeros(n)
        e[i] = 1.0
        cols.append(conv2d_forward(zero_bias, e.reshape(shape)).ravel())
    return np.array(cols)


def test_conv_zplus_positive_1x1_is_identity(rng):
    layer = Conv2D(np.full((1, 1, 1, 1), 0.7))
    r = rng.normal(size=(4, 4, 1))
    np.testing.assert_allclose(attr.propagate_conv_zplus(layer, rng.random((4, 4, 1)) + 0.1, r), r, **EXACT)


@pytest.mark.parametrize("padding", ["valid", "same"])
def test_conv_zplus_matches_basis_unrolled(rng, padding):
    for _ in range(10):
        layer = Conv2D(rng.normal(size=(2, 2, 1, 2)), padding=padding)
        x = rng.random((4, 4, 1))
        ho, wo, co = layer.output_shape(4, 4)
        r = rng.normal(size=(ho, wo, co))
        m = conv_matrix_by_basis(layer, x.shape)
        ref = attr.propagate_dense_zplus(dense(m), x.ravel(), r.ravel())
        np.testing.assert_allclose(attr.propagate_conv_zplus(layer, x, r).ravel(), ref, **EXACT)


def test_conv_input_rule_matches_basis_unrolled(rng):
    layer = Conv2D(rng.normal(size=(3, 3, 2, 2)), stride=2, padding="same")
    x = rng.normal(size=(5, 6, 2))
    ho, wo, co = layer.output_shape(5, 6)
    r = rng.normal(size=(ho, wo, co))
    ref = attr.propagate_input_layer(dense(conv_matrix_by_basis(layer, x.shape)), x.ravel(), r.ravel())
    np.testing.assert_allclose(attr.propagate_conv_input(layer, x, r).ravel(), ref, **EXACT)


def test_conv_all_negative_kernel_drops(rng):
    layer = Conv2D(-rng.random((2, 2, 1, 1)) - 0.1)
    d = attr.DropCounter()
    r = attr.propagate_conv_zplus(layer, rng.random((4, 4, 1)), np.ones((3, 3, 1)), d)
    assert not r.any()
    assert d.count == 9 and d.mass == 9.0


# -- full chain -----------------------------------------------------------------------

def scalar_dtd(net, image, config, alpha):
    """Pencil-and-paper dtd chain for tiny_net, one scalar at a time."""
    conv, ss = net.vision_layers
    d1, _, d2 = net.fusion_layers
    tau, trace = network_forward(net, image, config)
    fmap = trace.vision[0][1]
    f = trace.fusion[0][0]
    pre_h = trace.fusion[1][0]
    h = trace.fusion[2][0]
    # torque layer
    r_h = [0.0] * d2.in_dim
    for j in range(d2.out_dim):
        rj = alpha[j] * tau[j]
        pre = sum(h[i] * d2.weights[i, j] for i in range(d2.in_dim))
        if pre > 0:
            den = sum(h[i] * max(d2.weights[i, j], 0) for i in range(d2.in_dim))
            for i in range(d2.in_dim):
                r_h[i] += h[i] * max(d2.weights[i, j], 0) / den * rj
        elif pre < 0:
            den = sum(h[i] * min(d2.weights[i, j], 0) for i in range(d2.in_dim))
            for i in range(d2.in_dim):
                r_h[i] -= h[i] * min(d2.weights[i, j], 0) / den * rj
    r_h = [r if pre_h[i] > 0 else 0.0 for i, r in enumerate(r_h)]
    # concat layer, signed inputs
    r_f = [0.0] * d1.in_dim
    for j in range(d1.out_dim):
        terms = [f[i] * (max(d1.weights[i, j], 0) if f[i] > 0 else min(d1.weights[i, j], 0)) for i in range(d1.in_dim)]
        den = sum(terms)
        if den != 0:
            for i in range(d1.in_dim):
                r_f[i] += terms[i] / den * r_h[j]
    n_feat = ss.out_dim
    r_cfg = np.array(r_f[n_feat:])
    # spatial softmax
    hh, ww, cc = fmap.shape
    r_map = np.zeros_like(fmap)
    for c in range(cc):
        m = fmap[:, :, c].max()
        e = np.exp(fmap[:, :, c] - m)
        s = e / e.sum()
        wts = np.zeros((hh, ww))
        for r in range(hh):
            for q in range(ww):
                px = -1 + 2 * q / (ww - 1)
                py = -1 + 2 * r / (hh - 1)
                wts[r, q] = s[r, q] * (abs(px) + abs(py) + attr.SPATIAL_EPS)
        r_map[:, :, c] = wts / wts.sum() * (r_f[2 * c] + r_f[2 * c + 1])
    # conv z+ onto pixels
    k = conv.kernels
    kh, kw = k.shape[:2]
    r_img = np.zeros_like(image)
    for i in range(hh):
        for j in range(ww):
            for o in range(cc):
                den = sum(image[i + u, j + v, 0] * max(k[u, v, 0, o], 0) for u in range(kh) for v in range(kw))
                if den == 0:
                    continue
                for u in range(kh):
                    for v in range(kw):
                        r_img[i + u, j + v, 0] += image[i + u, j + v, 0] * max(k[u, v, 0, o], 0) / den * r_map[i, j, o]
    return r_img, r_cfg


def test_dtd_matches_scalar_chain(rng):
    for seed in range(5):
        net = tiny_net(np.random.default_rng(seed))
        image, config = rng.random((5, 5, 1)), rng.normal(size=8)
        alpha = np.array([0.6, 0.4])
        res = attr.attribute_dtd(net, image, config, alpha)
        r_img, r_cfg = scalar_dtd(net, image, config, alpha)
        np.testing.assert_allclose(res.image_relevance, r_img, rtol=0, atol=1e-12)
        np.testing.assert_allclose(res.config_relevance, r_cfg, rtol=0, atol=1e-12)


def test_dtd_zero_torques_give_zero():
    net = tiny_net(bias=False)
    res = attr.attribute_dtd(net, np.zeros((5, 5, 1)), np.zeros(8), np.array([0.5, 0.5]))
    assert not res.image_relevance.any() and not res.config_relevance.any()
    assert res.output_total == 0 and res.dropped == 0


def test_group_totals_match_slices(net, rng):
    res = attr.attribute_dtd(net, rng.random((5, 5, 1)), rng.normal(size=8), np.array([0.5, 0.5]))
    assert res.group_totals["image"] == pytest.approx(res.image_relevance.sum(), abs=1e-15)
    for g, (lo, hi) in GROUPS_2J.items():
        assert res.group_totals[g] == pytest.approx(res.config_relevance[lo:hi].sum(), abs=1e-15)


def _flip_output(net, j):
    last = net.fusion_layers[-1]
    w, b = last.weights.copy(), last.bias.copy()
    w[:, j] *= -1
    b[j] *= -1
    return PolicyNetwork(net.image_shape, net.config_dim, net.input_groups, net.vision_layers,
                         net.fusion_layers[:-1] + [Dense(w, b)])


@pytest.mark.parametrize("method", attr.METHODS)
def test_sign_flip_consistency(rng, method):
    for _ in range(10):
        net = random_network(rng)
        image, config = random_inputs(net, rng)
        for j in range(net.n_joints):
            alpha = np.zeros(net.n_joints)
            alpha[j] = 1.0
            a = attr.attribute(net, image, config, alpha, method)
            b = attr.attribute(_flip_output(net, j), image, config, alpha, method)
            assert b.torques[j] == -a.torques[j]
            np.testing.assert_allclose(np.abs(b.image_relevance), np.abs(a.image_relevance), rtol=1e-12, atol=1e-14)
            np.testing.assert_allclose(np.abs(b.config_relevance), np.abs(a.config_relevance), rtol=1e-12, atol=1e-14)


def test_alpha_linearity(rng):
    for _ in range(20):
        net = random_network(rng)
        image, config = random_inputs(net, rng)
        alpha = random_alpha(rng, net.n_joints)
        a = attr.attribute_dtd(net, image, config, alpha)
        b = attr.attribute_dtd(net, image, config, 3.5 * alpha)
        np.testing.assert_allclose(b.image_relevance, 3.5 * a.image_relevance, rtol=1e-12, atol=1e-15)
        np.testing.assert_allclose(b.config_relevance, 3.5 * a.config_relevance, rtol=1e-12, atol=1e-15)
        ra, rb = group_ratios(a), group_ratios(b)
        for g in ra:
            assert rb[g] == pytest.approx(ra[g], rel=1e-9, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.booleans())
def test_conservation_property(seed, signed_image):
    rng = np.random.default_rng(seed)
    net = random_network(rng)
    image, config = random_inputs(net, rng, signed_image=signed_image)
    res = attr.attribute_dtd(net, image, config, random_alpha(rng, net.n_joints))
    expected = float(np.sum(res.alpha * np.abs(res.torques)))
    assert res.output_total == pytest.approx(expected, rel=1e-15)
    assert abs(res.total + res.dropped - expected) <= 1e-6 * expected


# -- RAP --------------------------------------------------------------------------------

def positive_net(rng):
    """All weights positive, zero biases; feature points positive for images lit bottom-right."""
    conv = Conv2D(rng.random((2, 2, 1, 2)) + 0.1)
    ss = SpatialSoftmax(5, 5, 2)
    fusion = [Dense(rng.random((12, 5)), np.zeros(5)), ReLU(), Dense(rng.random((5, 2)), np.zeros(2))]
    return PolicyNetwork((6, 6, 1), 8, dict(GROUPS_2J), [conv, ss], fusion)


def test_rap_equals_dtd_on_positive_network(rng):
    net = positive_net(rng)
    image = np.zeros((6, 6, 1))
    image[4:, 4:, 0] = 5.0
    image += 0.01 * rng.random((6, 6, 1))
    config = rng.random(8) + 0.1
    d = attr.attribute_dtd(net, image, config, np.array([0.7, 0.3]))
    r = attr.attribute_rap(net, image, config, np.array([0.7, 0.3]))
    assert np.all(d.feature_relevance >= 0) and d.dropped == 0
    np.testing.assert_allclose(r.image_relevance, d.image_relevance, rtol=1e-12, atol=1e-15)
    np.testing.assert_allclose(r.config_relevance, d.config_relevance, rtol=1e-12, atol=1e-15)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_rap_non_negative_and_layer_totals(seed):
    rng = np.random.default_rng(seed)
    net = random_network(rng)
    image, config = random_inputs(net, rng, signed_image=True)
    res = attr.attribute_rap(net, image, config, random_alpha(rng, net.n_joints))
    assert np.all(res.image_relevance >= 0) and np.all(res.config_relevance >= 0)
    assert res.total + res.dropped == pytest.approx(res.output_total, rel=1e-9, abs=1e-15)
    # running-total oracle: each renormalised layer carries the output total minus drops so far
    totals = [t for _, t in res.layer_totals]
    assert totals[0] == pytest.approx(res.output_total, rel=1e-12)
    assert all(b <= a * (1 + 1e-9) + 1e-15 for a, b in zip(totals, totals[1:]))
    if res.dropped == 0:
        for t in totals:
            assert t == pytest.approx(res.output_total, rel=1e-6)


# -- GBP --------------------------------------------------------------------------------

def linear_config_net(w):
    conv = Conv2D(np.zeros((1, 1, 1, 1)))
    groups = {"joint_pos": (0, 1), "joint_vel": (1, 2), "ee_pos": (2, 4), "ee_vel": (4, 6)}
    return PolicyNetwork((2, 2, 1), 6, groups, [conv, SpatialSoftmax(2, 2, 1)], [dense(w)])


def test_gbp_linear_positive_is_gradient_times_input(rng):
    w = rng.random((8, 2)) + 0.1
    net = linear_config_net(w)
    image, config = rng.random((2, 2, 1)), rng.random(6) + 0.1
    alpha = np.array([0.25, 0.75])
    res = attr.attribute_gbp(net, image, config, alpha)
    tau = network_forward(net, image, config)[0]
    expected = sum(alpha[j] * abs(tau[j]) * network_gradient(net, image, config, j)[1] for j in range(2)) * config
    np.testing.assert_allclose(res.config_relevance, expected, **EXACT)


@pytest.mark.parametrize("method", attr.METHODS)
def test_dead_relu_path_gets_nothing(rng, method):
    w1 = np.zeros((8, 3))
    w1[2, 0] = 1.0  # config[0] (fused index 2) feeds only unit 0
    w1[3:, 1:] = rng.random((5, 2)) + 0.1
    d1 = Dense(w1, np.array([-100.0, 0.1, 0.1]))
    net = linear_config_net(np.ones((8, 2)))
    net = PolicyNetwork(net.image_shape, 6, net.input_groups, net.vision_layers,
                        [d1, ReLU(), dense(rng.normal(size=(3, 2)))])
    image, config = rng.random((2, 2, 1)), rng.random(6) + 0.5
    res = attr.attribute(net, image, config, np.array([0.5, 0.5]), method)
    assert res.config_relevance[0] == 0.0


def test_gbp_masking_only_zeroes(rng):
    seen = []

    def hook(layer, grad_in, grad_out):
        seen.append(1)
        nz = grad_in != 0
        assert np.all(grad_out[nz] == grad_in[nz])
        assert np.all(grad_in[nz] > 0)

    for _ in range(20):
        net = random_network(rng, extra_conv=True)
        image, config = random_inputs(net, rng, signed_image=True)
        attr.attribute_gbp(net, image, config, random_alpha(rng, net.n_joints), hook=hook)
    assert seen


def test_gbp_support_subset_of_plain_gradient(rng):
    for _ in range(20):
        net = random_network(rng)
        image, config = random_inputs(net, rng)
        torques, guided = attr.guided_gradients(net, image, config)
        for j, (gi, gc) in enumerate(guided):
            pi, pc = network_gradient(net, image, config, j)
            assert np.all(pi[gi != 0] != 0)
            assert np.all(pc[gc != 0] != 0)


def test_unknown_method():
    with pytest.raises(ValueError, match="dtd, rap, gbp"):
        attr.attribute(tiny_net(), np.zeros((5, 5, 1)), np.zeros(8), np.array([0.5, 0.5]), "lrp")
