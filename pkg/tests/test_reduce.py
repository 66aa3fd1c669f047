import numpy as np
import pytest

from invariance.geometry import box_polyhedron, make_box_template
from invariance.rci import RciSpec, solve_r
from sysid import model as qlpv
from sysid.model import Dataset, DisturbanceSet, QlpvModel, SchedulingNet
from sysid.reduce import (
    branch_factors,
    lump_constant_branches,
    reduce_matrices,
    reduced_model,
    refit_output_map,
    select_indices,
)
from utils.errors import ConfigError


def _factors_at(m, x, u):
    single = Dataset(u=np.atleast_2d(u), y=np.zeros((1, 1)))
    return branch_factors(m.replace(x0=x), single)[0]


def _model(n_p=4, seed=0, zero_rows=(), uses_input=False):
    rng = np.random.default_rng(seed)
    A = np.stack([0.3 * np.eye(2) + 0.1 * rng.normal(size=(2, 2)) for _ in range(n_p)])
    B = rng.normal(size=(n_p, 2, 1)) * 0.5
    K = rng.normal(size=(n_p, 2, 1)) * 0.05
    net = SchedulingNet.random(n_p, 3 if uses_input else 2, 1, 3, rng, uses_input)
    net.b_L = rng.normal(size=n_p - 1)
    for i in zero_rows:
        net.W_L[i] = 0.0
    return QlpvModel(A=A, B=B, K=K, C=np.array([[1.0, -0.5]]), net=net, x0=np.array([0.2, -0.1]))


def _data(n=50, seed=1):
    rng = np.random.default_rng(seed)
    u = rng.uniform(-1, 1, size=(n, 1))
    return Dataset(u=u, y=rng.normal(size=(n, 1)) * 0.1)


def test_lumping_example_with_zero_bias():
    m = _model(n_p=3, zero_rows=(1,))
    m.net.b_L[1] = 0.0
    lumped = lump_constant_branches(m)
    assert lumped.n_p == 2
    np.testing.assert_allclose(lumped.A[-1], 0.5 * (m.A[1] + m.A[2]))
    np.testing.assert_allclose(lumped.net.b_L, m.net.b_L[:1] - np.log(2.0))


def test_lumping_without_constant_branches_is_identity():
    m = _model()
    assert lump_constant_branches(m) is m


def test_lumping_is_exact():
    m = _model(n_p=5, zero_rows=(0, 2))
    lumped = lump_constant_branches(m)
    assert lumped.n_p == 3
    rng = np.random.default_rng(3)
    for _ in range(20):
        x, u = rng.normal(size=2), rng.normal(size=1)
        p_full = qlpv.schedule(m.net, x, u)
        p_lumped = qlpv.schedule(lumped.net, x, u)
        A_full = np.tensordot(p_full, m.A, axes=1)
        A_lumped = np.tensordot(p_lumped, lumped.A, axes=1)
        np.testing.assert_allclose(A_lumped, A_full, atol=1e-12)
        np.testing.assert_allclose(p_lumped[:2], p_full[[1, 3]], atol=1e-12)
    data = _data()
    np.testing.assert_allclose(qlpv.simulate(lumped, data).x, qlpv.simulate(m, data).x, atol=1e-10)
    np.testing.assert_allclose(qlpv.simulate(lumped, data, "observer").x, qlpv.simulate(m, data, "observer").x,
                               atol=1e-10)


def test_select_indices_counts_candidates():
    plan = select_indices(_model(n_p=3), _data(), 2)
    assert plan.candidates == 2
    assert plan.n_p == 2
    assert len(plan.indices) == 1


def test_select_all_indices_scores_full_model():
    m = _model(n_p=4)
    data = _data()
    plan = select_indices(m, data, 4)
    assert plan.indices == (0, 1, 2)
    full = float(np.mean(np.sum((data.y - qlpv.simulate(m, data).y) ** 2, axis=1)))
    assert plan.score == pytest.approx(full, abs=1e-12)


def test_select_indices_matches_brute_force():
    m = _model(n_p=5, seed=2)
    data = _data()
    plan = select_indices(m, data, 3, workers=2)
    scores = {}
    for i in range(4):
        for j in range(i + 1, 4):
            mask = np.zeros(4)
            mask[[i, j]] = 1.0
            x = m.x0.copy()
            y_hat = []
            for t in range(data.n):
                logits = np.log(_factors_at(m, x, data.u[t])) + m.net.b_L
                e = np.append(np.where(mask > 0, np.exp(logits), 0.0), 1.0)
                p = e / e.sum()
                y_hat.append(m.C @ x)
                x = np.tensordot(p, m.A, axes=1) @ x + np.tensordot(p, m.B, axes=1) @ data.u[t]
            scores[(i, j)] = float(np.mean(np.sum((data.y - np.array(y_hat)) ** 2, axis=1)))
    best = min(scores, key=lambda k: (scores[k], k))
    assert plan.indices == best
    assert plan.score == pytest.approx(scores[best], abs=1e-12)


def test_select_indices_rejects_huge_search():
    with pytest.raises(ConfigError):
        select_indices(_model(n_p=5), _data(), 3, max_combinations=5)
    with pytest.raises(ConfigError):
        select_indices(_model(n_p=3), _data(), 4)


def _invariant_setup(m):
    spec = RciSpec(make_box_template(2), box_polyhedron([-2.0], [2.0]), box_polyhedron([-2.0], [2.0]), horizon=5)
    w = DisturbanceSet(c_w=np.zeros(1), eps_w=np.array([0.01]), kappa=1.1)
    sol = solve_r(m, w, spec)
    assert sol.optimal
    return spec, sol


def test_no_reduction_reproduces_vertex_matrices():
    m = _model(n_p=3)
    spec, sol = _invariant_setup(m)
    plan = select_indices(m, _data(), 3)
    red = reduce_matrices(plan, m, sol.q, sol.vertex_inputs, spec.template)
    assert red.qp_objective == pytest.approx(0.0, abs=1e-6)
    np.testing.assert_allclose(red.A, m.A, atol=1e-4)
    np.testing.assert_allclose(red.B, m.B, atol=1e-4)
    np.testing.assert_allclose(red.b_L, m.net.b_L, atol=1e-3)


def test_reduced_matrices_keep_set_invariant():
    m = _model(n_p=4, seed=5)
    spec, sol = _invariant_setup(m)
    plan = select_indices(m, _data(), 2)
    red = reduce_matrices(plan, m, sol.q, sol.vertex_inputs, spec.template)
    tpl = spec.template
    corners = np.einsum("kxf,f->kx", tpl.V, sol.q)
    for k in range(plan.n_p):
        for j in range(tpl.v):
            nxt = red.A[k] @ corners[j] + red.B[k] @ sol.vertex_inputs[j]
            assert np.all(tpl.F @ nxt <= sol.q + 1e-6)
    assert red.qp_objective >= red.fractional_objective - 1e-9
    reduced = reduced_model(plan, m, red)
    assert reduced.n_p == 2
    assert np.all(np.isfinite(qlpv.simulate(reduced, _data()).y))


def test_refit_recovers_exact_output_map():
    m = _model(n_p=2)
    data = _data()
    clean = Dataset(u=data.u, y=qlpv.simulate(m, data).y)
    refit = refit_output_map(m, clean, kappa=1.1)
    np.testing.assert_allclose(refit.disturbance.eps_w, 0.0, atol=1e-6)
    np.testing.assert_allclose(refit.C, m.C, atol=1e-5)


def test_refit_with_single_sample_has_zero_width():
    m = _model(n_p=2)
    refit = refit_output_map(m, _data(n=1), kappa=1.1, fixed_C=m.C)
    assert refit.disturbance.eps_w[0] == 0.0


def test_refit_lp_matches_min_max_oracle():
    m = _model(n_p=2)
    data = _data(n=40)
    refit = refit_output_map(m, data, kappa=1.1)
    fixed = refit_output_map(m, data, kappa=1.1, fixed_C=refit.C)
    res = data.y - qlpv.simulate(m, data).x @ refit.C.T
    assert fixed.disturbance.eps_w[0] == pytest.approx(0.5 * (res.max() - res.min()), abs=1e-12)
    np.testing.assert_allclose(fixed.disturbance.eps_w, refit.disturbance.eps_w, atol=1e-12)
    other = refit_output_map(m, data, kappa=1.1, fixed_C=m.C)
    assert refit.disturbance.eps_w.sum() <= other.disturbance.eps_w.sum() + 1e-6
