import numpy as np
import pytest
import torch

from conftest import square
from isoneural import case_path
from isoneural.ansatz import AnsatzError, VanishingSpec, build_ansatz
from isoneural.geometry import load_geometry, model_from_dict
from isoneural.splinecore import Facet
from isoneural.topology import detect_interfaces

HOLDER_NET = {"width": 16, "hidden_layers": 4, "activation": "squared_relu", "skip_connections": [3, 5]}


def random_theta(ans, seed=0):
    return np.random.default_rng(seed).normal(size=ans.n_params)


def lshape_ansatz(name="lshape.json", **kw):
    model = load_geometry(case_path(name))
    topo = detect_interfaces(model, **kw)
    return build_ansatz(model, topo, {"interior": {"width": 8}, "interface": {"width": 6}}, seed=1)


def zeros_of(spec):
    return sorted(f.label for f in spec.zero_facets())


def test_interior_polynomials():
    ans = lshape_ansatz()
    assert zeros_of(ans.patches[1].vanishing) == ["x1-", "x2+", "x2-"]
    assert zeros_of(ans.patches[2].vanishing) == ["x1+", "x1-", "x2+"]
    assert zeros_of(ans.patches[3].vanishing) == ["x1-", "x2-"]


def test_corner_and_edge_polynomials():
    ans = lshape_ansatz()
    corner = [t for t in ans.terms if t.q == 0][0]
    assert corner.block.spec is None and corner.block.size == 1
    assert zeros_of(corner.vanishing[1]) == ["x1-", "x2+"]
    assert zeros_of(corner.vanishing[2]) == ["x1-", "x2-"]
    assert zeros_of(corner.vanishing[3]) == ["x1+", "x2-"]
    edge = [t for t in ans.terms if t.multi_index == (1, 2)][0]
    assert zeros_of(edge.vanishing[1]) == ["x1+", "x1-", "x2+"]


@pytest.mark.parametrize("name", ["lshape.json", "lshape_curved.json", "quadrupole_sector.json"])
def test_interface_continuity(name):
    ans = lshape_ansatz(name)
    theta = random_theta(ans)
    s_rng = np.random.default_rng(5)
    for ent in ans.topology.active():
        s = s_rng.uniform(-1, 1, (1000, ent.q))
        vals = [ans.evaluate(pid, ent.localize(pid, s), theta=theta)[0].numpy() for pid in ent.multi_index]
        for v in vals[1:]:
            assert np.max(np.abs(v - vals[0])) < 1e-12


def test_dirichlet_trace_zero():
    ans = lshape_ansatz()
    theta = random_theta(ans)
    for rec in ans.model.boundaries:
        X = np.random.default_rng(0).uniform(-1, 1, (1000, 2))
        X[:, rec.facet.axis] = rec.facet.side
        assert np.max(np.abs(ans.evaluate(rec.patch_id, X, theta=theta)[0].numpy())) < 1e-12


def test_zero_parameters_give_zero_field():
    ans = lshape_ansatz()
    X = np.random.default_rng(0).uniform(-1, 1, (50, 2))
    for pid in (1, 2, 3):
        v, g = ans.evaluate(pid, X, theta=np.zeros(ans.n_params))
        assert not v.numpy().any() and not g.numpy().any()


def constant_lift_model(value, facet="x1-"):
    return model_from_dict({"patches": [square(1, 0, 0, 2.0, 1.0)],
                            "boundaries": [{"patch_id": 1, "facet": facet, "type": "dirichlet", "value": value}]})


def test_constant_dirichlet_lift():
    model = constant_lift_model(2.5)
    ans = build_ansatz(model, detect_interfaces(model), seed=0)
    X = np.random.default_rng(1).uniform(-1, 1, (100, 2))
    X[:, 0] = -1.0
    np.testing.assert_allclose(ans.evaluate(1, X, theta=random_theta(ans))[0].numpy(), 2.5, atol=1e-15)


def test_affine_chain_rule():
    # zero network + lift of 2 on x2+ gives uhat = 1 + xhat2 = 2 * x2 on [0,2]x[0,1]
    model = constant_lift_model(2.0, "x2+")
    ans = build_ansatz(model, detect_interfaces(model), seed=0)
    X = np.random.default_rng(2).uniform(-1, 1, (20, 2))
    x, v, g, _ = ans.pushforward_field(1, X, theta=np.zeros(ans.n_params))
    np.testing.assert_allclose(v[:, 0], 2 * x[:, 1], atol=1e-14)
    np.testing.assert_allclose(g[:, 0], np.tile([0.0, 2.0], (20, 1)), atol=1e-14)


def test_identity_patch_gradient(identity2d):
    model = model_from_dict({"patches": [{"id": 1, "dim": 2, "degrees": [1, 1], "knots": [[-1, -1, 1, 1]] * 2,
                                          "control_points": identity2d.control_points.tolist()}],
                             "boundaries": []})
    ans = build_ansatz(model, detect_interfaces(model), seed=0)
    X = np.random.default_rng(3).uniform(-1, 1, (20, 2))
    _, ref_grad = ans.evaluate(1, X)
    _, _, g, _ = ans.pushforward_field(1, X)
    np.testing.assert_allclose(g, ref_grad.numpy(), atol=1e-14)


def test_curved_patch_gradient_finite_differences():
    model = load_geometry(case_path("quarter_annulus.json"))
    ans = build_ansatz(model, detect_interfaces(model), seed=4)
    theta = random_theta(ans, 4) * 0.5
    rng = np.random.default_rng(6)
    X = rng.uniform(-0.9, 0.9, (30, 2))
    x, _, g, _ = ans.pushforward_field(1, X, theta=theta)
    h = 1e-6
    for k in range(2):
        e = np.zeros(2)
        e[k] = h
        xp, vp, _, _ = ans.pushforward_field(1, X + e, theta=theta, gradients=False)
        xm, vm, _, _ = ans.pushforward_field(1, X - e, theta=theta, gradients=False)
        du = (vp - vm)[:, 0]
        pred = np.einsum("bm,bm->b", g[:, 0], xp - xm)
        assert np.max(np.abs(du - pred) / np.maximum(np.abs(du), 1e-8)) < 1e-4


def test_holder_parameter_inventory():
    model = load_geometry(case_path("holder_3d.json"))
    topo = detect_interfaces(model, subentities="shared")
    ans = build_ansatz(model, topo, {"interior": HOLDER_NET, "interface": HOLDER_NET}, seed=0,
                       n_components=3, n_phi=2)
    sizes = sorted(b.size for b in ans.networks())
    assert len(sizes) == 12
    assert sizes == [1203] * 2 + [1219] * 5 + [1235] * 5
    assert ans.n_params == 14676


def test_holder_continuity_with_load_parameters():
    model = load_geometry(case_path("holder_3d.json"))
    topo = detect_interfaces(model, subentities="shared")
    ans = build_ansatz(model, topo, {"interior": {"width": 6}}, seed=0, n_components=3, n_phi=2)
    theta = random_theta(ans)
    phi = np.array([0.3, -0.7])
    for ent in topo.active():
        s = np.random.default_rng(1).uniform(-1, 1, (200, ent.q))
        vals = [ans.evaluate(pid, ent.localize(pid, s), phi, theta)[0].numpy() for pid in ent.multi_index]
        for v in vals[1:]:
            assert np.max(np.abs(v - vals[0])) < 1e-12


def test_parameter_gradients_flow():
    ans = lshape_ansatz()
    t = torch.tensor(random_theta(ans), requires_grad=True)
    v, _ = ans.evaluate(2, np.zeros((1, 2)), theta=t)
    (g,) = torch.autograd.grad(v.sum(), t)
    assert torch.count_nonzero(g) > 0


def test_load_parameter_validation():
    model = load_geometry(case_path("contact_square.json"))
    ans = build_ansatz(model, detect_interfaces(model), seed=0, n_components=2, n_phi=1)
    with pytest.raises(AnsatzError):
        ans.evaluate(1, np.zeros((1, 2)))
    with pytest.raises(AnsatzError):
        ans.evaluate(1, np.zeros((1, 2)), phi=[0.0, 1.0])
    with pytest.raises(AnsatzError):
        ans.evaluate(1, np.full((1, 2), 1.5), phi=[0.0])


def test_vanishing_spec_gradient():
    spec = VanishingSpec((1, 2), (1, 0), scale=-0.5)
    X = np.random.default_rng(0).uniform(-1, 1, (10, 2))
    _, g = spec.evaluate(X)
    h = 1e-7
    for k in range(2):
        e = np.zeros(2)
        e[k] = h
        fd = (spec.evaluate(X + e)[0] - spec.evaluate(X - e)[0]) / (2 * h)
        np.testing.assert_allclose(g[:, k], fd, rtol=1e-6, atol=1e-9)
    assert spec.describe() == "-0.5*(x1+1)(x1-1)(x2-1)^2"
    assert VanishingSpec.from_facets([Facet(0, 1)], 2).zero_facets() == [Facet(0, 1)]
