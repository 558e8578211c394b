import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from isoneural.splinecore import (
    SINGULARITY_COUNTER,
    DomainError,
    Facet,
    GeometryError,
    KnotVector,
    basis_funs,
    facet_measure,
    facet_measure_batch,
    make_patch,
    metric_terms,
    nurbs_eval,
    nurbs_jacobian,
)


def cox_de_boor(U, i, p, t):
    """Textbook recursion, one basis function at a time."""
    if p == 0:
        last = U[i + 1] == U[-1] and U[i] < U[i + 1]
        return 1.0 if (U[i] <= t < U[i + 1]) or (last and t == U[-1]) else 0.0
    a = 0.0 if U[i + p] == U[i] else (t - U[i]) / (U[i + p] - U[i]) * cox_de_boor(U, i, p - 1, t)
    b = 0.0
    if U[i + p + 1] != U[i + 1]:
        b = (U[i + p + 1] - t) / (U[i + p + 1] - U[i + 1]) * cox_de_boor(U, i + 1, p - 1, t)
    return a + b


def full_basis(kv, t):
    span, N, dN = basis_funs(kv, np.array([t]))
    out = np.zeros(kv.n_basis)
    out[span[0] - kv.degree: span[0] + 1] = N[0]
    return out


@st.composite
def knot_vectors(draw):
    p = draw(st.integers(0, 4))
    n_int = draw(st.integers(0, 5))
    inner = sorted(draw(st.lists(st.floats(-0.95, 0.95), min_size=n_int, max_size=n_int)))
    return KnotVector(np.array([-1.0] * (p + 1) + inner + [1.0] * (p + 1)), p)


def test_degree_zero_constant():
    kv = KnotVector(np.array([-1.0, 1.0]), 0)
    span, N, dN = basis_funs(kv, np.linspace(-1, 1, 7))
    assert np.all(N == 1.0) and np.all(dN == 0.0)


@settings(max_examples=200, deadline=None)
@given(knot_vectors(), st.floats(-1.0, 1.0))
def test_partition_of_unity(kv, t):
    _, N, dN = basis_funs(kv, np.array([t]))
    assert abs(N.sum() - 1.0) < 1e-12
    assert abs(dN.sum()) < 1e-9


def test_quadratic_matches_recursion():
    U = np.array([-1, -1, -1, -0.5, 0, 0.5, 1, 1, 1], dtype=float)
    kv = KnotVector(U, 2)
    for t in (-0.25, 0.0, 0.2, 0.75, 1.0):
        ref = np.array([cox_de_boor(U, i, 2, t) for i in range(kv.n_basis)])
        np.testing.assert_allclose(full_basis(kv, t), ref, atol=1e-14)


def test_knots_rescaled_to_reference_interval():
    kv = KnotVector(np.array([0, 0, 0.5, 1, 1], dtype=float), 1)
    np.testing.assert_array_equal(kv.values, [-1, -1, 0, 1, 1])


@pytest.mark.parametrize("knots", [[0, 1, 0.5, 1], [0, 0.5, 1, 1], [1, 1, 1, 1]])
def test_bad_knot_vectors(knots):
    with pytest.raises(GeometryError):
        KnotVector(np.array(knots, dtype=float), 1)


def test_outside_reference_domain(identity2d):
    with pytest.raises(DomainError):
        identity2d.eval([[1.5, 0.0]])


def test_quarter_circle_unit_norm():
    w = math.sqrt(2) / 2
    arc = make_patch([2], [[-1, -1, -1, 1, 1, 1]], [[1, 0], [1, 1], [0, 1]], weights=[1, w, 1])
    t = np.linspace(-1, 1, 100)
    x = arc.eval(t[:, None])
    # rational Bezier form in s = (t + 1) / 2
    s = (t + 1) / 2
    b = np.stack([(1 - s) ** 2, 2 * s * (1 - s) * w, s**2], axis=1)
    ref = b @ np.array([[1, 0], [1, 1], [0, 1]]) / b.sum(axis=1, keepdims=True)
    np.testing.assert_allclose(x, ref, atol=1e-14)
    assert np.max(np.abs(np.linalg.norm(x, axis=1) - 1)) < 1e-12


def test_affine_midpoint(affine2d):
    np.testing.assert_allclose(nurbs_eval(affine2d, [0, 0]), [1.0, 0.5])


def test_equal_weights_reduce_to_bspline():
    cp = np.random.default_rng(0).normal(size=(3, 3, 2))
    p1 = make_patch([2, 2], [[0, 0, 0, 1, 1, 1]] * 2, cp)
    p2 = make_patch([2, 2], [[0, 0, 0, 1, 1, 1]] * 2, cp, weights=np.full((3, 3), 3.7))
    X = np.random.default_rng(1).uniform(-1, 1, (50, 2))
    np.testing.assert_allclose(p1.eval(X), p2.eval(X), atol=1e-14)


def test_identity_jacobian(identity2d):
    jd = nurbs_jacobian(identity2d, [0.3, -0.2])
    np.testing.assert_allclose(jd.J, np.eye(2), atol=1e-15)
    assert jd.detJ == pytest.approx(1.0)
    np.testing.assert_allclose(jd.K, np.eye(2), atol=1e-15)


def test_affine_jacobian(affine2d):
    jd = nurbs_jacobian(affine2d, [0.1, 0.7])
    np.testing.assert_allclose(jd.J, np.diag([1.0, 0.5]), atol=1e-15)
    assert jd.detJ == pytest.approx(0.5)
    np.testing.assert_allclose(jd.K, np.diag([0.5, 2.0]), atol=1e-14)


def test_annulus_jacobian_finite_differences(annulus):
    X = np.random.default_rng(3).uniform(-0.95, 0.95, (100, 2))
    _, J = annulus.eval_with_jacobian(X)
    h = 1e-6
    for k in range(2):
        E = np.zeros(2)
        E[k] = h
        fd = (annulus.eval(X + E) - annulus.eval(X - E)) / (2 * h)
        rel = np.abs(fd - J[:, :, k]) / np.maximum(np.abs(J[:, :, k]), 1e-3)
        assert rel.max() < 1e-7


def test_singular_jacobian_counted():
    J = np.array([[[1.0, 2.0], [2.0, 4.0]], [[1.0, 0.0], [0.0, 1.0]]])
    SINGULARITY_COUNTER.reset()
    _, detJ, K, singular = metric_terms(J)
    assert singular.tolist() == [True, False]
    assert detJ[0] == 0.0 and np.all(K[0] == 0.0)
    assert SINGULARITY_COUNTER.reset() == 1


@pytest.mark.parametrize("label", ["x1-", "x1+", "x2-", "x2+"])
def test_identity_facet_measure(identity2d, label):
    f = Facet.parse(label)
    pt = np.zeros(2)
    pt[f.axis] = f.side
    m, n = facet_measure(identity2d, f, pt)
    assert m == pytest.approx(1.0)
    np.testing.assert_allclose(n, f.normal(2))


def test_affine_facet_measure(affine2d):
    m, n = facet_measure(affine2d, "x1+", [1.0, 0.3])
    assert m == pytest.approx(0.5)
    np.testing.assert_allclose(n, [1.0, 0.0])


@pytest.mark.parametrize("side,length", [(-1, math.pi / 2), (1, math.pi)])
def test_curved_facet_length(annulus, side, length):
    t = np.linspace(-1, 1, 20001)
    X = np.stack([np.full_like(t, side), t], axis=1)
    pts = annulus.eval(X)
    polyline = np.sum(np.linalg.norm(np.diff(pts, axis=0), axis=1))
    measure, _, _ = facet_measure_batch(annulus, Facet(0, side), X)
    integral = np.trapezoid(measure, t) if hasattr(np, "trapezoid") else np.trapz(measure, t)
    assert abs(integral - polyline) / polyline < 1e-4
    assert abs(integral - length) / length < 1e-8


def test_facet_points_must_lie_on_facet(identity2d):
    with pytest.raises(DomainError):
        facet_measure_batch(identity2d, Facet(0, 1), np.array([[0.5, 0.0]]))


def test_rejects_nonpositive_weights():
    with pytest.raises(GeometryError):
        make_patch([1], [[0, 0, 1, 1]], [[0, 0], [1, 0]], weights=[1.0, 0.0])
