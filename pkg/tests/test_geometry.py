import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kochobstacle.geometry import (GeometryError, IfsParams, apply_similitude, build_domain,
                                   find_intersecting_segments, fractal_dimension,
                                   generate_prefractal, hausdorff_distance, regular_polygon,
                                   shoelace_area, theta_of_alpha)


def oracle_maps(alpha):
    """The four similitudes written out independently in complex form."""
    th = math.asin(math.sqrt(alpha * (4 - alpha)) / 2)
    return [
        lambda z: z / alpha,
        lambda z: z / alpha * np.exp(1j * th) + 1 / alpha,
        lambda z: z / alpha * np.exp(-1j * th) + 0.5 + 1j * math.sqrt(1 / alpha - 0.25),
        lambda z: (z - 1) / alpha + 1,
    ]


def oracle_curve(n, alpha):
    """K^n on the unit segment by composing the maps (vertex list, ordered)."""
    pts = np.array([0.0 + 0j, 1.0 + 0j])
    maps = oracle_maps(alpha)
    for _ in range(n):
        pieces = [m(pts) for m in maps]
        pts = np.concatenate([pieces[0]] + [p[1:] for p in pieces[1:]])
    return np.column_stack([pts.real, pts.imag])


def test_theta_examples():
    assert theta_of_alpha(3.0) == pytest.approx(math.pi / 3, abs=1e-15)
    assert theta_of_alpha(3.9) == pytest.approx(0.31756, abs=5e-6)
    for bad in (2.0, 4.0, 1.5, 5.0):
        with pytest.raises(GeometryError):
            theta_of_alpha(bad)


def test_theta_tends_to_right_angle_near_two():
    assert theta_of_alpha(2.0 + 1e-12) == pytest.approx(math.pi / 2, abs=1e-5)


def test_fractal_dimension():
    assert fractal_dimension(3.0) == pytest.approx(1.261860, abs=1e-6)
    assert fractal_dimension(3.999999) == pytest.approx(1.0, abs=1e-5)
    assert fractal_dimension(2.000001) == pytest.approx(2.0, abs=1e-5)
    with pytest.raises(GeometryError):
        fractal_dimension(4.0)


def test_ifs_params_reject_mismatched_theta():
    with pytest.raises(GeometryError):
        IfsParams(3.0, 1.0)


def test_similitude_fixed_points_and_apex(ifs3):
    assert np.allclose(apply_similitude(1, ifs3, (0, 0)), (0, 0), atol=0)
    assert np.allclose(apply_similitude(4, ifs3, (1, 0)), (1, 0), atol=1e-15)
    assert np.allclose(apply_similitude(3, ifs3, (0, 0)), (0.5, math.sqrt(1 / 12)), atol=1e-15)


@settings(max_examples=60, deadline=None)
@given(alpha=st.floats(2.05, 3.95), idx=st.integers(1, 4),
       z=st.tuples(st.floats(-2, 2), st.floats(-2, 2)),
       w=st.tuples(st.floats(-2, 2), st.floats(-2, 2)))
def test_similitudes_contract_by_alpha(alpha, idx, z, w):
    ifs = IfsParams.from_alpha(alpha)
    a, b = apply_similitude(idx, ifs, z), apply_similitude(idx, ifs, w)
    assert np.hypot(*(a - b)) == pytest.approx(np.hypot(z[0] - w[0], z[1] - w[1]) / alpha,
                                               rel=1e-12, abs=1e-14)


@settings(max_examples=30, deadline=None)
@given(alpha=st.floats(2.05, 3.95), idx=st.integers(1, 4),
       z=st.tuples(st.floats(-2, 2), st.floats(-2, 2)))
def test_apply_similitude_matches_oracle(alpha, idx, z):
    ref = oracle_maps(alpha)[idx - 1](complex(*z))
    got = apply_similitude(idx, IfsParams.from_alpha(alpha), z)
    assert np.allclose(got, (ref.real, ref.imag), atol=1e-14)


def test_level_zero_and_one(ifs3):
    assert np.array_equal(generate_prefractal(0, ifs3, (0, 0), (1, 0)).vertices,
                          [[0, 0], [1, 0]])
    v = generate_prefractal(1, ifs3, (0, 0), (1, 0)).vertices
    ref = [(0, 0), (1 / 3, 0), (0.5, math.sqrt(3) / 6), (2 / 3, 0), (1, 0)]
    assert np.allclose(v, ref, atol=1e-15)


def test_level_three_counts(ifs3):
    c = generate_prefractal(3, ifs3, (0, 0), (1, 0))
    assert len(c.vertices) == 65
    assert c.length == pytest.approx(2.3704, abs=1e-4)
    assert c.length == pytest.approx((4 / 3) ** 3, rel=1e-13)


def test_degenerate_segment_rejected(ifs3):
    with pytest.raises(GeometryError):
        generate_prefractal(2, ifs3, (0.3, 0.3), (0.3, 0.3))
    with pytest.raises(GeometryError):
        generate_prefractal(-1, ifs3, (0, 0), (1, 0))


@pytest.mark.parametrize("alpha", [2.5, 3.0, 3.5])
@pytest.mark.parametrize("n", [1, 2, 3, 4])
def test_matches_map_composition(alpha, n):
    v = generate_prefractal(n, IfsParams.from_alpha(alpha), (0, 0), (1, 0)).vertices
    assert np.max(np.abs(v - oracle_curve(n, alpha))) <= 1e-12


@settings(max_examples=40, deadline=None)
@given(alpha=st.floats(2.05, 3.95), n=st.integers(0, 4),
       a=st.tuples(st.floats(-3, 3), st.floats(-3, 3)),
       ang=st.floats(0, 2 * math.pi), length=st.floats(0.1, 5))
def test_curve_invariants(alpha, n, a, ang, length):
    ifs = IfsParams.from_alpha(alpha)
    b = (a[0] + length * math.cos(ang), a[1] + length * math.sin(ang))
    c = generate_prefractal(n, ifs, a, b)
    assert len(c.vertices) == 4 ** n + 1
    assert np.allclose(c.vertices[0], a, atol=0) and np.allclose(c.vertices[-1], b, atol=1e-12)
    seg = c.segment_lengths
    assert np.allclose(seg, length * alpha ** -n, rtol=1e-10)
    assert c.length == pytest.approx(length * (4 / alpha) ** n, rel=1e-10)


def test_hausdorff_decay_is_geometric(ifs3):
    d = []
    for n in range(0, 5):
        c0 = generate_prefractal(n, ifs3, (0, 0), (1, 0)).vertices
        c1 = generate_prefractal(n + 1, ifs3, (0, 0), (1, 0)).vertices
        d.append(hausdorff_distance(c0, c1, 1e-3 * 3.0 ** -n))
    C = np.array(d) * 3.0 ** np.arange(5)
    assert np.all(np.diff(d) < 0)
    assert C.max() / C.min() < 1.2


def test_domain_counts_and_orientation(ifs3):
    tri = regular_polygon(3)
    d0 = build_domain(tri, 0, ifs3)
    assert len(d0.boundary) == 3 and np.allclose(d0.boundary, tri)
    d2 = build_domain(tri, 2, ifs3)
    assert len(d2.segments) == 48
    assert d2.area > d0.area > 0


def bump_area(alpha):
    """Area of the first-level bump on a unit segment."""
    return 0.5 * (1 - 2 / alpha) * math.sqrt(1 / alpha - 0.25)


@settings(max_examples=40, deadline=None)
@given(alpha=st.floats(2.1, 3.95), m=st.integers(3, 6), n=st.integers(0, 3),
       side=st.floats(0.5, 2.0))
def test_domain_area_matches_bump_sum(alpha, m, n, side):
    base = regular_polygon(m, side)
    dom = build_domain(base, n, IfsParams.from_alpha(alpha))
    area = shoelace_area(base)
    for j in range(n):
        area += m * 4 ** j * (side * alpha ** -j) ** 2 * bump_area(alpha)
    assert dom.area == pytest.approx(area, rel=1e-11)
    assert len(dom.boundary) == m * 4 ** n
    assert find_intersecting_segments(dom.boundary) is None


def test_unit_triangle_level_one_area(ifs3):
    dom = build_domain(regular_polygon(3), 1, ifs3)
    # three equilateral bumps of side 1/3
    assert dom.area == pytest.approx(math.sqrt(3) / 4 * (1 + 3 / 9), rel=1e-14)


def test_base_contained_and_nested(ifs3):
    base = regular_polygon(3)
    doms = [build_domain(base, n, ifs3) for n in range(4)]
    rng = np.random.default_rng(0)
    pts = rng.uniform([-0.3, -0.4], [1.3, 1.2], size=(4000, 2))
    inside = [d.contains(pts, closed=False) for d in doms]
    for a, b in zip(inside, inside[1:]):
        assert not np.any(a & ~b)
    assert np.all(doms[3].contains(base, closed=True))


def test_bumps_point_outward(ifs3):
    dom = build_domain(regular_polygon(3), 1, ifs3)
    # the bump apex of the bottom side lies below the x-axis
    assert dom.boundary[:5, 1].min() == pytest.approx(-math.sqrt(3) / 6)


def test_reject_bad_base(ifs3):
    with pytest.raises(GeometryError):
        build_domain(regular_polygon(3)[::-1], 1, ifs3)
    with pytest.raises(GeometryError):
        build_domain(np.array([[0, 0], [1, 0], [1, 1], [0.9, 0.2], [0, 1]]), 1, ifs3)


def test_intersection_pair_reported():
    bowtie = np.array([[0, 0], [1, 1], [1, 0], [0, 1]], dtype=float)
    pair = find_intersecting_segments(bowtie)
    assert pair is not None and set(pair) == {0, 2}
