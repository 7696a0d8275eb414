import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from econv import network as N
from econv.densify import (
    aligned_labels,
    densify,
    dpoa_transfer,
    init_dense_params,
    interior_mask,
    label_alignment,
    receptive_field,
    valid_output_count,
)
from econv.errors import ParameterError, PlanError
from econv.tensor import Rng
from econv.verify import bounding_box, dependency_support, gradient_support, random_network


def five_layer(size=20):
    return N.NetworkSpec((size, size, 1), (
        N.conv("conv1", 3, 1, 4), N.pool("pool2", 2, 2),
        N.conv("conv3", 3, 4, 4), N.pool("pool4", 2, 2),
        N.conv("conv5", 3, 4, 2),
    ))


def vgg16(size=224):
    layers, ch = [], 3
    for block, (n, width) in enumerate([(2, 64), (2, 128), (3, 256), (3, 512), (3, 512)], 1):
        for i in range(1, n + 1):
            layers.append(N.conv(f"conv{block}_{i}", 3, ch, width, pad=1))
            layers.append(N.relu(f"relu{block}_{i}"))
            ch = width
        layers.append(N.pool(f"pool{block}", 2, 2))
    return N.NetworkSpec((size, size, 3), tuple(layers))


def test_five_layer_est_assignments():
    dense, plan = densify(five_layer(), "pool2")
    ests = {l.name: l.geometry.est for l in dense.layers}
    strides = {l.name: l.geometry.stride for l in dense.layers}
    assert ests == {"conv1": 1, "pool2": 1, "conv3": 2, "pool4": 2, "conv5": 4}
    assert set(strides.values()) == {1}
    assert plan.accumulated_est == (1, 1, 2, 2, 4, 4)
    assert plan.grid_stride == 4
    assert plan.converted == (1, 3)
    assert [s[0] for s in N.infer_shapes(dense)] == [18, 17, 13, 11, 3]


def test_densify_from_second_pool_only_touches_suffix():
    dense, plan = densify(five_layer(), 3)
    assert [l.geometry.est for l in dense.layers] == [1, 1, 1, 1, 2]
    assert dense.layers[1].pool.stride == 2
    assert plan.grid_stride == 2


def test_densify_scales_padding():
    net = N.NetworkSpec((12, 12, 1), (
        N.pool("p", 2, 2), N.conv("c", 3, 1, 1, pad=1), N.pool("q", 3, 2, pad=1),
        N.conv("d", 3, 1, 1, pad=1)))
    dense, _ = densify(net, "p")
    assert [(l.geometry.est, l.geometry.pad) for l in dense.layers] == [
        (1, 0), (2, 2), (2, 2), (4, 4)]


def test_densify_converts_later_strided_conv():
    net = N.NetworkSpec((16, 16, 1), (N.pool("p", 2, 2), N.conv("c", 3, 1, 1, stride=2),
                                      N.conv("d", 1, 1, 1)))
    dense, plan = densify(net, "p")
    assert [(l.geometry.stride, l.geometry.est) for l in dense.layers] == [(1, 1), (1, 2), (1, 4)]
    assert plan.converted == (0, 1)


@pytest.mark.parametrize("target", ["conv1", 0, "nope", 9])
def test_densify_needs_a_strided_pool(target):
    with pytest.raises(PlanError):
        densify(five_layer(), target)


def test_densify_stride_one_pool_rejected():
    net = N.NetworkSpec((6, 6, 1), (N.pool("p", 2, 1),))
    with pytest.raises(PlanError):
        densify(net, "p")


def test_densify_keeps_parameter_shapes():
    net = five_layer()
    dense, _ = densify(net, "pool2")
    assert N.param_shapes(dense) == N.param_shapes(net)


# receptive fields -----------------------------------------------------------

def test_vgg16_receptive_field():
    rf = receptive_field(vgg16())
    assert rf.size == (212, 212)
    assert rf.step == (32, 32)
    assert rf.grid == (7, 7)
    assert rf.offset == (-90, -90)


def test_receptive_field_single_conv():
    net = N.NetworkSpec((7, 7, 1), (N.conv("c", 3, 1, 1),))
    rf = receptive_field(net)
    assert (rf.size, rf.step, rf.offset) == ((3, 3), (1, 1), (0, 0))
    assert rf.field(2, 4) == (2, 4, 4, 6)
    assert rf.center(0, 0) == (1, 1)


def test_receptive_field_dense_step():
    net = five_layer()
    dense, plan = densify(net, "pool2")
    a, b = receptive_field(net), receptive_field(dense)
    assert a.size == b.size == (18, 18)
    assert a.step == (4, 4) and b.step == (1, 1)


def test_gap_covers_whole_input():
    net = N.NetworkSpec((9, 9, 1), (N.conv("c", 3, 1, 2), N.gap("g")))
    rf = receptive_field(net)
    assert rf.size == (9, 9) and rf.grid == (1, 1)
    assert dependency_support(net, 0, 0).all()


def _check_rf_against_support(net):
    for layer in range(len(net.layers)):
        rf = receptive_field(net, layer)
        inside = interior_mask(net, layer)
        for i, j in zip(*np.nonzero(inside)):
            support = dependency_support(net, i, j, layer)
            assert np.array_equal(support, gradient_support(net, i, j, layer))
            assert bounding_box(support) == rf.field(i, j), (layer, i, j)


@pytest.mark.parametrize("seed", range(4))
def test_receptive_field_matches_dependency_support(seed):
    rng = Rng(seed)
    net = random_network(rng, 20, pad=True)
    _check_rf_against_support(net)
    dense, _ = densify(net, next(i for i, l in enumerate(net.layers) if l.kind == "pool"))
    _check_rf_against_support(dense)


def test_interior_excludes_padded_fields():
    net = N.NetworkSpec((6, 6, 1), (N.conv("c", 3, 1, 1, pad=1),))
    mask = interior_mask(net)
    assert mask.shape == (6, 6)
    assert mask[1:5, 1:5].all() and mask.sum() == 16


def test_density_ratio_three_pools():
    net = N.NetworkSpec((128, 128, 1), (
        N.conv("c1", 3, 1, 2), N.pool("p1", 2, 2), N.conv("c2", 3, 2, 2), N.pool("p2", 2, 2),
        N.conv("c3", 3, 2, 2), N.pool("p3", 2, 2), N.conv("c4", 1, 2, 2)))
    dense, plan = densify(net, "p1")
    assert plan.grid_stride == 8
    ratio = valid_output_count(dense) / valid_output_count(net)
    assert ratio >= 0.9 * 64


# labels ---------------------------------------------------------------------

def test_label_alignment_single_conv():
    net = N.NetworkSpec((5, 5, 1), (N.conv("c", 3, 1, 1),))
    align = label_alignment(net)
    assert align.shape == (3, 3, 2)
    assert tuple(align[0, 0]) == (1, 1)
    assert tuple(align[2, 1]) == (3, 2)


def test_label_alignment_uniform_grid():
    dense, _ = densify(five_layer(24), "pool2")
    align = label_alignment(dense)
    assert np.all(np.diff(align[:, 0, 0]) == 1)
    net = five_layer(24)
    assert np.all(np.diff(label_alignment(net)[:, 0, 0]) == 4)


def test_label_alignment_marks_padding():
    net = N.NetworkSpec((5, 5, 1), (N.conv("c", 3, 1, 1, pad=1),))
    align = label_alignment(net)
    assert np.all(align[0, :] == -1) and np.all(align[:, 4] == -1)
    assert tuple(align[1, 1]) == (1, 1)


def test_aligned_labels():
    net = N.NetworkSpec((5, 5, 1), (N.conv("c", 3, 1, 1, pad=1),))
    labels = np.arange(25).reshape(5, 5) % 3
    out = aligned_labels(net, labels)
    assert out[0, 0] == -1
    assert np.array_equal(out[1:4, 1:4], labels[1:4, 1:4])


# parameter transfer ---------------------------------------------------------

def test_transfer_round_trip_is_identity():
    net = five_layer()
    dense, _ = densify(net, "pool2")
    params = N.init_params(net, Rng(5))
    there = init_dense_params(params, dense)
    back = dpoa_transfer(there, net)
    assert list(back) == list(params)
    assert all(back[k].tobytes() == params[k].tobytes() for k in params)
    there["conv1.weight"][0, 0, 0] += 1.0
    assert params["conv1.weight"][0, 0, 0] != there["conv1.weight"][0, 0, 0]


def test_transfer_rejects_mismatched_network():
    net = five_layer()
    other = N.NetworkSpec(net.input_dims, net.layers[:3])
    with pytest.raises(ParameterError):
        dpoa_transfer(N.init_params(net, Rng(0)), other)
    with pytest.raises(ParameterError):
        init_dense_params(N.init_params(other, Rng(0)), net)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32))
def test_est_is_product_of_upstream_strides(seed):
    net = random_network(Rng(seed), 24)
    first = next(i for i, l in enumerate(net.layers) if l.kind == "pool")
    dense, plan = densify(net, first)
    acc = 1
    for i, (a, b) in enumerate(zip(net.layers, dense.layers)):
        if a.kind in ("conv", "pool"):
            if i >= first:
                assert b.geometry.stride == 1
                assert b.geometry.est == a.geometry.est * acc
                acc *= a.geometry.stride
            else:
                assert b == a
    assert plan.grid_stride == acc


def test_stacked_convs_grow_field_by_two():
    one = N.NetworkSpec((9, 9, 1), (N.conv("a", 3, 1, 1),))
    two = N.NetworkSpec((9, 9, 1), (N.conv("a", 3, 1, 1), N.conv("b", 3, 1, 1)))
    assert receptive_field(one).size == (3, 3)
    assert receptive_field(two).size == (5, 5)


def test_density_ratio_two_pools_at_64():
    net = N.NetworkSpec((64, 64, 1), (
        N.conv("c1", 3, 1, 1), N.pool("p1", 2, 2), N.conv("c2", 3, 1, 1), N.pool("p2", 2, 2),
        N.conv("c3", 1, 1, 1)))
    dense, _ = densify(net, "p1")
    assert valid_output_count(dense) / valid_output_count(net) >= 0.9 * 16


def test_empty_store_transfer():
    net = N.NetworkSpec((4, 4, 1), (N.pool("p", 2, 2),))
    dense, _ = densify(net, "p")
    assert init_dense_params({}, dense) == {}
    assert dpoa_transfer({}, net) == {}


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32), pad=st.booleans())
def test_parameter_demands_unchanged(seed, pad):
    net = random_network(Rng(seed), 20, pad=pad)
    first = next(i for i, l in enumerate(net.layers) if l.kind == "pool")
    dense, _ = densify(net, first)
    assert N.param_shapes(dense) == N.param_shapes(net)
