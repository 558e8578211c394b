"""Acceptance criteria, one test each; every test prints a PASS/FAIL line."""
import dataclasses
import filecmp
import math
import time

import numpy as np
import pytest
import torch

from isoneural import case_path
from isoneural.ansatz import build_ansatz
from isoneural.config import build_case, load_run_config
from isoneural.geometry import load_geometry
from isoneural.io import relative_l2
from isoneural.netdiff import NetworkSpec, forward_with_input_grad, init_network, loss_and_gradient
from isoneural.physics import ContactPlane, ElasticContactProblem, green_strain, lame_from_young, svk_density
from isoneural.splinecore import Facet, KnotVector, basis_funs, make_patch
from isoneural.topology import detect_interfaces
from isoneural.trainer import TrainState, train

SHIPPED = ["poisson_lshape", "lshape_curved", "quadrupole", "holder", "contact_square"]


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\n[acceptance {n:>2}] {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, detail

    return emit


def run_case(name, epochs=None, checkpoint=None, **overrides):
    cfg = load_run_config(case_path(f"{name}.yaml"))
    case = build_case(cfg)
    tc = cfg.training if epochs is None else dataclasses.replace(cfg.training, epochs=epochs)
    if overrides:
        tc = dataclasses.replace(tc, **overrides)
    state = train(case.model, case.topology, case.ansatz, case.problem, tc, TrainState.fresh(case.ansatz.theta0),
                  checkpoint_dir=checkpoint)
    return case, state


@pytest.fixture(scope="module")
def poisson_run():
    t0 = time.process_time()
    case, state = run_case("poisson_lshape")
    cpu = time.process_time() - t0
    err = relative_l2(case.ansatz, case.exact, theta=state.theta, n_points=75000)
    return case, state, cpu, err


def test_01_spline_correctness(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    pou = 0.0
    for p in range(5):
        inner = np.sort(rng.uniform(-1, 1, 6))
        kv = KnotVector(np.concatenate([[-1.0] * (p + 1), inner, [1.0] * (p + 1)]), p)
        _, N, _ = basis_funs(kv, rng.uniform(-1, 1, 200))
        pou = max(pou, float(np.max(np.abs(N.sum(axis=1) - 1))))
    patch = load_geometry(case_path("lshape_curved.json")).patches[1]
    X = rng.uniform(-0.99, 0.99, (200, 2))
    _, J = patch.eval_with_jacobian(X)
    h, fd_err = 1e-6, 0.0
    for k in range(2):
        e = np.zeros(2)
        e[k] = h
        fd = (patch.eval(X + e) - patch.eval(X - e)) / (2 * h)
        fd_err = max(fd_err, float(np.max(np.abs(fd - J[:, :, k]) / np.maximum(np.abs(J[:, :, k]), 1e-2))))
    dt = time.perf_counter() - t0
    report(1, pou < 1e-12 and fd_err < 1e-6 and dt < 1.0,
           f"partition of unity err {pou:.1e} (< 1e-12), FD Jacobian rel err {fd_err:.1e} (< 1e-6), {dt:.2f} s (< 1 s)")


def test_02_quarter_circle(report):
    w = math.sqrt(0.5)
    arc = make_patch([2], [[-1, -1, -1, 1, 1, 1]], [[1, 0], [1, 1], [0, 1]], weights=[1, w, 1])
    t = np.linspace(-1, 1, 100)
    x = arc.eval(t[:, None])
    s = (t + 1) / 2
    b = np.stack([(1 - s) ** 2, 2 * s * (1 - s) * w, s**2], axis=1)
    bezier = b @ np.array([[1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]) / b.sum(axis=1, keepdims=True)
    radius = float(np.max(np.abs(np.linalg.norm(x, axis=1) - 1)))
    oracle = float(np.max(np.abs(x - bezier)))
    report(2, radius < 1e-12 and oracle < 1e-12,
           f"max | |f(t)| - 1 | = {radius:.1e}, max deviation from rational Bezier {oracle:.1e} (< 1e-12)")


def test_03_differentiation_engine(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    worst = 0.0
    for k in range(20):
        act = ("tanh", "squared_relu")[k % 2]
        n_in = int(rng.integers(1, 4))
        spec = NetworkSpec.mlp(n_in, int(rng.integers(3, 7)), int(rng.integers(1, 3)), int(rng.integers(1, 3)),
                               activation=act)
        theta = init_network(spec, k).flat + rng.normal(scale=0.1, size=spec.n_params)
        x = rng.uniform(-1, 1, (10, n_in))

        def loss(t):
            out = forward_with_input_grad(spec, t, x)
            return (out.input_grads**2).sum() + 0.1 * (out.values**2).sum()

        _, g = loss_and_gradient(loss, theta)
        fd = np.zeros_like(theta)
        for i in range(theta.size):
            e = np.zeros_like(theta)
            e[i] = 1e-6
            fd[i] = (float(loss(torch.as_tensor(theta + e))) - float(loss(torch.as_tensor(theta - e)))) / 2e-6
        worst = max(worst, float(np.max(np.abs(g - fd)) / np.max(np.abs(fd))))
    dt = time.perf_counter() - t0
    report(3, worst < 1e-4 and dt < 10.0,
           f"20 networks (tanh + squared ReLU), max rel err vs central FD {worst:.1e} (< 1e-4), {dt:.2f} s (< 10 s)")


def test_04_structural_conformity(report):
    model = load_geometry(case_path("lshape.json"))
    topo = detect_interfaces(model)
    ans = build_ansatz(model, topo, seed=0)
    theta = np.random.default_rng(2).normal(size=ans.n_params)
    rng = np.random.default_rng(3)
    trace = 0.0
    for rec in model.boundaries:
        X = rng.uniform(-1, 1, (1000, 2))
        X[:, rec.facet.axis] = rec.facet.side
        trace = max(trace, float(np.max(np.abs(ans.evaluate(rec.patch_id, X, theta=theta)[0].numpy()))))
    jump = 0.0
    for ent in topo.active():
        s = rng.uniform(-1, 1, (1000, ent.q))
        vals = [ans.evaluate(pid, ent.localize(pid, s), theta=theta)[0].numpy() for pid in ent.multi_index]
        jump = max(jump, max(float(np.max(np.abs(v - vals[0]))) for v in vals))
    report(4, trace < 1e-12 and jump < 1e-12,
           f"Dirichlet trace max |u| = {trace:.1e}, interface mismatch {jump:.1e} (each < 1e-12)")


def test_05_multi_index_sets(report):
    topo = detect_interfaces(load_geometry(case_path("lshape.json")))
    got = {pid: sorted(topo.J[pid], key=lambda m: (len(m), m)) for pid in (1, 2, 3)}
    want = {1: [(1, 2), (1, 2, 3)], 2: [(1, 2), (2, 3), (1, 2, 3)], 3: [(2, 3), (1, 2, 3)]}
    report(5, got == want, "; ".join(f"J({p}) = {{{', '.join(map(str, got[p]))}}}" for p in (1, 2, 3)))


def test_06_parameter_inventory(report):
    case = build_case(load_run_config(case_path("holder.yaml")))
    nets = case.ansatz.networks()
    by_dim = {}
    for b in nets:
        by_dim.setdefault(b.spec.n_spatial, set()).add(b.size)
    ok = (len(nets) == 12 and case.ansatz.n_params == 14676
          and by_dim == {3: {1235}, 2: {1219}, 1: {1203}})
    report(6, ok, f"{len(nets)} networks, sizes by input dimension {dict(sorted(by_dim.items()))}, "
                  f"total {case.ansatz.n_params} (want 12 / 1235, 1219, 1203 / 14676)")


def test_07_manufactured_poisson(report, poisson_run):
    case, state, cpu, err = poisson_run
    report(7, err < 2e-2 and state.epoch <= 2000 and cpu < 900,
           f"rel L2 error {err:.3e} (< 2e-2) after {state.epoch} epochs, {cpu / 60:.1f} CPU-min (< 15)")


def test_08_elasticity_invariants(report):
    lam, mu = lame_from_young(2000.0, 0.3)
    eye = torch.eye(3, dtype=torch.float64)
    a = 0.83
    rot = torch.tensor([[math.cos(a), 0, math.sin(a)], [0, 1, 0], [-math.sin(a), 0, math.cos(a)]],
                       dtype=torch.float64)
    rigid = max(abs(float(svk_density(green_strain(F[None]), lam, mu))) for F in (eye, rot))
    A = torch.as_tensor(np.random.default_rng(4).normal(size=(10**6, 3, 3)))
    low = float(svk_density(0.5 * (A + A.transpose(1, 2)), lam, mu).min())
    model = load_geometry(case_path("contact_square.json"))
    prob = ElasticContactProblem(model, lam, mu, planes=[ContactPlane(axis=1, side="above", offset=1.0)],
                                 contact_facets=[(1, Facet(1, 1))], eps_n=1e4)
    rng = np.random.default_rng(5)
    y = torch.as_tensor(rng.uniform(-5, 1, (1000, 2)))
    F = torch.as_tensor(np.eye(2) + 0.3 * rng.normal(size=(1000, 2, 2)))
    N = torch.tensor([[0.0, 1.0]], dtype=torch.float64).expand(1000, 2)
    pen = float(prob.penalty_density(F, y, N, None).abs().max())
    report(8, rigid < 1e-14 and low >= 0 and pen == 0.0,
           f"|psi| for identity/rotation {rigid:.1e} (< 1e-14), min psi on 1e6 random E {low:.2e} (>= 0), "
           f"penalty without penetration {pen}")


def test_09_contact_penalty_study(report):
    depths = []
    for eps in (1e2, 1e3, 1e4):
        cfg = load_run_config(case_path("contact_square.yaml"))
        cfg.problem["contact"]["eps_n"] = eps
        case = build_case(cfg)
        state = train(case.model, case.topology, case.ansatz, case.problem, cfg.training)
        depths.append(case.problem.max_penetration(case.ansatz, np.array([-1.0]), state.theta))
    ok = depths[0] > depths[1] > depths[2]
    report(9, ok, "max penetration at phi = -1 for eps_N = 1e2, 1e3, 1e4: "
                  + ", ".join(f"{d:.4f}" for d in depths) + " (strictly decreasing)")


def test_10_reproducibility(report, tmp_path, poisson_run):
    run_case("contact_square", epochs=5, checkpoint=tmp_path / "a")
    run_case("contact_square", epochs=5, checkpoint=tmp_path / "b")
    names = ["params.f64", "adam_m.f64", "adam_v.f64", "state.json"]
    match, mismatch, errors = filecmp.cmpfiles(tmp_path / "a", tmp_path / "b", names, shallow=False)
    decreases = {"poisson_lshape": poisson_run[1].history}
    short = {"lshape_curved": 30, "quadrupole": 20, "holder": 4, "contact_square": 30}
    for name, epochs in short.items():
        decreases[name] = run_case(name, epochs=epochs)[1].history
    drops = {n: (h[0]["loss"], h[-1]["loss"]) for n, h in decreases.items()}
    ok = match == names and all(first > last for first, last in drops.values()) and set(drops) == set(SHIPPED)
    report(10, ok, f"identical checkpoints: {len(match)}/{len(names)} files; loss first > last: "
                   + ", ".join(f"{n} {f:.3g} -> {l:.3g}" for n, (f, l) in drops.items()))
