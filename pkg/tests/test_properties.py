"""Property-based checks of the invariants that hold for all inputs, not just examples."""

import numpy as np
import torch
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.spatial.transform import Rotation

import oracles
from equiflow import nsf, pga
from equiflow.diagnostics import alignment_variability, shape_variability, wilcoxon_signed_rank
from equiflow.layers import equi_linear, gated_nonlinearity, equi_layer_norm
from equiflow.pga import RigidMotion
from equiflow.preprocess import compute_position_scaling, fit_standardizer
from equiflow.training import lion_step, lr_schedule, relative_l2

seeds = st.integers(0, 2**32 - 1)
finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


def motion(seed, reflect=False):
    rng = np.random.default_rng(seed)
    r = Rotation.random(random_state=rng).as_matrix()
    if reflect:
        r = r @ np.diag([1.0, 1.0, -1.0])
    return RigidMotion(r, rng.normal(size=3))


def mvs(seed, *shape):
    return torch.as_tensor(np.random.default_rng(seed).normal(size=(*shape, 16)))


@given(seeds)
def test_geometric_product_matches_oracle_and_is_associative(seed):
    a, b, c = mvs(seed, 3)
    ab = pga.geometric_product(a, b)
    np.testing.assert_allclose(ab.numpy(), oracles.gp(a.numpy(), b.numpy()), atol=1e-12)
    torch.testing.assert_close(pga.geometric_product(ab, c), pga.geometric_product(a, pga.geometric_product(b, c)), atol=1e-10, rtol=0)


@given(seeds)
def test_reverse_is_an_anti_automorphism(seed):
    a, b = mvs(seed, 2)
    torch.testing.assert_close(
        pga.reverse(pga.geometric_product(a, b)), pga.geometric_product(pga.reverse(b), pga.reverse(a)), atol=1e-12, rtol=0
    )


@given(seeds, st.booleans())
def test_sandwich_preserves_grades_and_inner_products(seed, reflect):
    v = pga.versor_from_motion(motion(seed, reflect))
    a, b = mvs(seed + 1, 2)
    for k in range(5):
        moved = pga.sandwich(v, pga.grade_project(a, k))
        torch.testing.assert_close(moved, pga.grade_project(moved, k), atol=1e-10, rtol=0)
    torch.testing.assert_close(
        pga.invariant_inner(pga.sandwich(v, a), pga.sandwich(v, b)), pga.invariant_inner(a, b), atol=1e-10, rtol=0
    )


@given(seeds, st.booleans())
def test_points_follow_motions(seed, reflect):
    m = motion(seed, reflect)
    p = np.random.default_rng(seed).normal(size=(4, 3)) * 10
    moved = pga.extract_point(pga.sandwich(pga.versor_from_motion(m), pga.embed_point(p)))
    np.testing.assert_allclose(moved.numpy(), m.apply_points(p), atol=1e-9)


@given(seeds, st.booleans())
def test_equivariant_primitives_commute_with_motions(seed, reflect):
    v = pga.versor_from_motion(motion(seed, reflect))
    x = mvs(seed, 5, 3)
    w = torch.as_tensor(np.random.default_rng(seed).normal(size=(2, 3, 9)))
    for f in (lambda t: equi_linear(w, t), gated_nonlinearity, equi_layer_norm):
        torch.testing.assert_close(f(pga.sandwich(v, x)), pga.sandwich(v, f(x)), atol=1e-9, rtol=1e-9)


@given(st.lists(arrays(np.float64, st.tuples(st.integers(0, 4), st.integers(1, 3)), elements=finite), min_size=1, max_size=4))
def test_nsf_round_trip(values):
    fields = {f"f{i}": v for i, v in enumerate(values)}
    back, meta = nsf.decode(nsf.encode(fields, {"n": len(values)}))
    assert meta == {"n": len(values)}
    for k, v in fields.items():
        assert back[k].tobytes() == v.tobytes() and back[k].shape == v.shape


@given(seeds)
def test_position_scaling_keeps_rotated_data_in_cube(seed):
    rng = np.random.default_rng(seed)
    clouds = [rng.normal(size=(rng.integers(1, 20), 3)) * rng.uniform(0.1, 100) + rng.normal(size=3) for _ in range(3)]
    sc = compute_position_scaling(clouds)
    r = Rotation.random(random_state=rng).as_matrix()
    for c in clouds:
        y = sc.apply((c - sc.center) @ r.T + sc.center)
        assert y.min() >= -1e-9 and y.max() <= 1000 + 1e-9


@given(seeds)
def test_magnitude_standardiser_commutes_with_rotations(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(10, 3)) * rng.uniform(0.01, 100)
    s = fit_standardizer(x, "magnitude")
    r = Rotation.random(random_state=rng).as_matrix()
    np.testing.assert_allclose(s.invert(s.apply(x) @ r.T), s.invert(s.apply(x)) @ r.T, atol=1e-12 * np.abs(x).max())


@given(st.lists(st.floats(-10, 10, allow_nan=False).filter(lambda v: abs(v) > 1e-6), min_size=5, max_size=30))
def test_wilcoxon_is_a_valid_symmetric_p_value(d):
    a, b = np.array(d), np.zeros(len(d))
    p = wilcoxon_signed_rank(a, b)
    assert 0 < p <= 1
    assert p == wilcoxon_signed_rank(b, a)
    assert wilcoxon_signed_rank(a, b, "greater") == wilcoxon_signed_rank(b, a, "less")


@given(st.integers(1, 500), st.floats(1e-5, 1e-3), st.data())
def test_schedule_stays_between_zero_and_peak(total, peak, data):
    step = data.draw(st.integers(0, total))
    lr = lr_schedule(step, total, peak)
    assert 0 <= lr <= peak + 1e-18


@given(seeds, st.floats(1e-3, 1e3))
def test_relative_l2_is_scale_invariant(seed, c):
    rng = np.random.default_rng(seed)
    gt, pred = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
    assert abs(relative_l2(c * pred, c * gt) - relative_l2(pred, gt)) <= 1e-9 * relative_l2(pred, gt)


@given(seeds, st.floats(1e-3, 1e3))
def test_lion_ignores_gradient_magnitude(seed, c):
    rng = np.random.default_rng(seed)
    g = torch.as_tensor(rng.normal(size=8))
    a, b = [torch.zeros(8, dtype=torch.float64)], [torch.zeros(8, dtype=torch.float64)]
    lion_step(a, [g], [torch.zeros(8, dtype=torch.float64)], 0.1, 0.0)
    lion_step(b, [c * g], [torch.zeros(8, dtype=torch.float64)], 0.1, 0.0)
    assert torch.equal(a[0], b[0])


@given(seeds, st.integers(1, 12))
def test_variabilities_lie_in_range(seed, n):
    rng = np.random.default_rng(seed)
    fields = [rng.normal(size=(5, 3)) + rng.normal(size=3) for _ in range(n)]
    assert 0 <= alignment_variability(fields) <= 2
    specs = [np.abs(rng.normal(size=6)) + 0.1 for _ in range(n)]
    assert 0 <= shape_variability(specs) <= 2
    assert abs(shape_variability([specs[0]] * n)) <= 1e-12
