import numpy as np
import pytest

from noisebound.analysis import (
    InputProperties,
    aggregate_bounds,
    all_jacobians,
    input_properties,
    jacobian,
    scan_dataset,
)
from noisebound.linalg import RngStream, max_row_l2, spectral_norm
from noisebound.network import LabeledExample, MlpParams, forward, init_network
from oracles import forward_from_preact


def random_net(dims, seed=0):
    return init_network(dims, rng=RngStream(seed))


def well_separated_input(params, seed, floor=1e-3, tries=200):
    """An input whose every preactivation is bounded away from zero."""
    for i in range(tries):
        x = RngStream(seed, 1000 + i).normals(params.input_dim)
        t = forward(params, x)
        if min(np.abs(f).min() for f in t.preacts) > floor:
            return x
    raise AssertionError("no well-separated input found")


def fd_jacobian(params, trace, d_from, d_to, eps=1e-6):
    """Central finite differences of layer d_to's preactivation w.r.t.
    layer d_from's, run through an independent straight-line evaluator."""
    weights = [w.tolist() for w in params.weights]
    base = trace.x if d_from == 0 else trace.preacts[d_from - 1]
    n = base.shape[0]
    rows = params.dims[d_to]
    j = np.zeros((rows, n))
    for k in range(n):
        up, down = base.copy(), base.copy()
        up[k] += eps
        down[k] -= eps
        fu = forward_from_preact(weights, d_from, up, depth=d_to)
        fl = forward_from_preact(weights, d_from, down, depth=d_to)
        j[:, k] = (fu - fl) / (2 * eps)
    return j


# ---------------------------------------------------------------- jacobian

def test_jacobian_same_layer_is_identity():
    p = random_net((3, 5, 5, 2))
    t = forward(p, np.array([0.1, -0.2, 0.3]))
    for d in range(p.depth + 1):
        j = jacobian(p, t, d, d)
        assert np.array_equal(j.matrix, np.eye(p.dims[d]))


def test_jacobian_full_mask_equals_weight():
    w1 = np.array([[1.0, 0.0], [0.0, 1.0]])
    w2 = np.array([[2.0, -1.0], [0.5, 3.0]])
    p = MlpParams((2, 2, 2), (w1, w2), (w1, w2))
    t = forward(p, np.array([1.0, 2.0]))  # layer-1 preacts all positive
    assert np.array_equal(jacobian(p, t, 1, 2).matrix, w2)


def test_jacobian_rejects_bad_indices():
    p = random_net((3, 4, 2))
    t = forward(p, np.zeros(3))
    with pytest.raises(ValueError):
        jacobian(p, t, 2, 1)
    with pytest.raises(ValueError):
        jacobian(p, t, 0, 3)
    with pytest.raises(ValueError):
        jacobian(p, t, -1, 1)


def test_jacobian_matches_finite_differences():
    p = random_net((4, 8, 8, 3), seed=7)
    x = well_separated_input(p, seed=7)
    t = forward(p, x)
    for d_from in range(0, p.depth):
        for d_to in range(d_from + 1, p.depth + 1):
            analytic = jacobian(p, t, d_from, d_to).matrix
            numeric = fd_jacobian(p, t, d_from, d_to)
            scale = max(np.abs(analytic).max(), 1.0)
            assert np.abs(analytic - numeric).max() <= 1e-5 * scale


def test_jacobian_chain_rule():
    p = random_net((3, 6, 6, 6, 2), seed=8)
    t = forward(p, RngStream(8, 5).normals(3))
    for d_from in range(0, p.depth):
        for d_to in range(d_from + 1, p.depth + 1):
            for mid in range(d_from, d_to + 1):
                left = jacobian(p, t, mid, d_to).matrix
                right = jacobian(p, t, d_from, mid).matrix
                full = jacobian(p, t, d_from, d_to).matrix
                assert np.allclose(full, left @ right, rtol=1e-12, atol=1e-12)


def test_network_equals_jacobian_times_input():
    p = random_net((5, 9, 9, 4), seed=9)
    x = RngStream(9, 5).normals(5)
    t = forward(p, x)
    for d in range(1, p.depth + 1):
        jx = jacobian(p, t, 0, d).matrix @ x
        f = t.preacts[d - 1]
        assert np.abs(jx - f).max() <= 1e-10 * max(np.abs(f).max(), 1.0)


def test_single_step_jacobian_norms_bounded_by_weight_norms():
    p = random_net((4, 7, 7, 3), seed=10)
    t = forward(p, RngStream(10, 2).normals(4))
    for d in range(2, p.depth + 1):
        j = jacobian(p, t, d - 1, d).matrix
        w = p.weights[d - 1]
        assert spectral_norm(j) <= spectral_norm(w) * (1 + 1e-9)
        assert max_row_l2(j) <= max_row_l2(w) * (1 + 1e-12)


def test_all_jacobians_consistent_with_single_pair_op():
    p = random_net((3, 5, 5, 5, 2), seed=11)
    t = forward(p, RngStream(11, 2).normals(3))
    table = all_jacobians(p, t)
    assert sorted(table.keys()) == [
        (d_from, d_to) for d_from in range(1, 5) for d_to in range(d_from + 1, 5)
    ]
    for (d_from, d_to), mat in table.items():
        assert np.array_equal(mat, jacobian(p, t, d_from, d_to).matrix)


# ---------------------------------------------------------------- input properties

def test_input_properties_345_example():
    p = MlpParams((2, 2, 2), (np.eye(2), np.eye(2)), (np.eye(2), np.eye(2)))
    props = input_properties(p, LabeledExample(np.array([3.0, 4.0]), 1))
    assert props.layer_l2[0] == 5.0
    assert props.layer_l2[1] == 5.0
    assert props.min_preact[1] == 3.0
    assert props.margin_value == pytest.approx(1.0)


def test_input_properties_zero_row_gives_zero_preact_floor():
    w1 = np.array([[0.0, 0.0], [1.0, 1.0]])
    w2 = np.eye(2)
    p = MlpParams((2, 2, 2), (w1, w2), (w1, w2))
    props = input_properties(p, LabeledExample(np.array([1.0, 1.0]), 1))
    assert props.min_preact[1] == 0.0


def test_input_properties_spec_submultiplicative():
    p = random_net((4, 6, 6, 6, 3), seed=12)
    ex = LabeledExample(RngStream(12, 3).normals(4), 0)
    props = input_properties(p, ex)
    t = forward(p, ex.x)
    for (d_from, d_to), val in props.jac_spec.items():
        chain = 1.0
        for d in range(d_from + 1, d_to + 1):
            chain *= spectral_norm(jacobian(p, t, d - 1, d).matrix)
        assert val <= chain * (1 + 1e-8)


# ---------------------------------------------------------------- aggregation

def props_with(min_preacts, layer_l2=0.3):
    """Minimal two-layer InputProperties with prescribed layer-1 stats."""
    arr = np.sort(np.abs(np.atleast_1d(np.asarray(min_preacts, dtype=np.float64))))
    return InputProperties(
        layer_l2=(1.0, layer_l2),
        min_preact={1: float(arr[0])},
        sorted_abs_preacts={1: arr},
        jac_row_l2={(1, 2): 0.5},
        jac_spec={(1, 2): 0.5},
        margin_value=1.0,
    )


def test_aggregate_clamps_to_one():
    pb = aggregate_bounds([props_with([2.0], layer_l2=0.3)], gamma_class=1.0)
    assert pb.alpha[1] == 1.0  # 0.3 clamps up
    assert pb.zeta[(1, 2)] == 1.0 and pb.kappa[(1, 2)] == 1.0


def test_aggregate_5pc_drops_smallest_points():
    inputs = [props_with([float(v)]) for v in range(1, 101)]
    pb = aggregate_bounds(inputs, gamma_class=1.0)
    assert pb.gamma_min[1] == 1.0
    assert pb.gamma_5pc[1] == 6.0  # ceil(5) = 5 points dropped
    assert pb.m == 100


def test_aggregate_duplicate_inputs_idempotent():
    one = aggregate_bounds([props_with([3.0, 4.0])], gamma_class=2.0)
    two = aggregate_bounds([props_with([3.0, 4.0])] * 2, gamma_class=2.0)
    assert one.alpha == two.alpha
    assert one.gamma_min == two.gamma_min
    assert one.gamma_5pc == two.gamma_5pc
    assert one.gamma_median == two.gamma_median
    assert one.zeta == two.zeta and one.kappa == two.kappa


def test_aggregate_median_ignores_lower_half():
    # units |preacts| = (1, 5): median variant keeps index ceil(2/2)=1 -> 5
    pb = aggregate_bounds([props_with([1.0, 5.0])], gamma_class=1.0)
    assert pb.gamma_median[1] == 5.0
    assert pb.gamma_min[1] == 1.0


def test_aggregate_width_one_layer_median_falls_back():
    pb = aggregate_bounds([props_with([2.5])], gamma_class=1.0)
    assert pb.gamma_median[1] == 2.5


def test_aggregate_variant_orderings():
    inputs = [props_with(RngStream(77, i).normals(8).tolist()) for i in range(40)]
    pb = aggregate_bounds(inputs, gamma_class=1.0)
    assert pb.gamma_5pc[1] >= pb.gamma_min[1]
    assert pb.gamma_median[1] >= pb.gamma_min[1]


def test_aggregate_rejects_empty():
    with pytest.raises(ValueError, match="empty"):
        aggregate_bounds([], gamma_class=1.0)


# ---------------------------------------------------------------- scan

def make_dataset(n, params, seed=50):
    return [
        LabeledExample(RngStream(seed, i).normals(params.input_dim), i % params.num_classes)
        for i in range(n)
    ]


def test_scan_singleton_matches_direct_aggregation():
    p = random_net((3, 5, 5, 2), seed=20)
    data = make_dataset(1, p)
    pb, archive = scan_dataset(p, data, gamma_class=4.0)
    direct = aggregate_bounds([input_properties(p, data[0])], gamma_class=4.0)
    assert pb == direct
    assert len(archive) == 1


def test_scan_order_invariance():
    p = random_net((3, 5, 5, 2), seed=21)
    data = make_dataset(12, p)
    pb1, _ = scan_dataset(p, data, gamma_class=4.0)
    pb2, _ = scan_dataset(p, data[::-1], gamma_class=4.0)
    assert pb1.alpha == pb2.alpha
    assert pb1.gamma_min == pb2.gamma_min
    assert pb1.gamma_5pc == pb2.gamma_5pc
    assert pb1.zeta == pb2.zeta and pb1.kappa == pb2.kappa


def test_scan_split_then_merge_equals_single_pass():
    p = random_net((3, 5, 5, 2), seed=22)
    data = make_dataset(16, p)
    _, archive = scan_dataset(p, data, gamma_class=4.0)
    merged = []
    for part in (archive[:4], archive[4:8], archive[8:12], archive[12:]):
        merged.extend(part)
    assert aggregate_bounds(merged, 4.0) == aggregate_bounds(archive, 4.0)


def test_scan_reports_offending_index():
    p = random_net((3, 5, 2), seed=23)
    data = make_dataset(3, p)
    data[1] = LabeledExample(np.zeros(4), 0)  # wrong input dim
    with pytest.raises(RuntimeError, match="index 1"):
        scan_dataset(p, data)
