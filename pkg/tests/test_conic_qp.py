import itertools

import numpy as np
import pytest

from invariance.conic_qp import (
    QpProblem,
    QpStatus,
    directional,
    kkt_condition,
    solution_vjp,
    solve,
    solve_lp,
    value_gradient,
)
from utils.errors import DimensionError, NumericalError


def _random_qp(rng, n, m, n_eq=0):
    L = rng.normal(size=(n, n))
    P = L @ L.T + 0.1 * np.eye(n)
    c = rng.normal(size=n)
    G = rng.normal(size=(m, n))
    x0 = rng.normal(size=n)
    h = G @ x0 + rng.uniform(0.1, 1.0, size=m)
    A = rng.normal(size=(n_eq, n))
    b = A @ x0
    return QpProblem(P=P, c=c, A_eq=A, b_eq=b, G=G, h=h)


def _active_set_oracle(p):
    """Best objective over stationary points of every face."""
    best = np.inf
    n = p.n
    for k in range(0, min(n - p.n_eq, p.n_ineq) + 1):
        for active in itertools.combinations(range(p.n_ineq), k):
            A = np.vstack((p.A_eq, p.G[list(active)]))
            b = np.concatenate((p.b_eq, p.h[list(active)]))
            K = np.block([[p.P, A.T], [A, np.zeros((A.shape[0], A.shape[0]))]])
            try:
                sol = np.linalg.solve(K, np.concatenate((-p.c, b)))
            except np.linalg.LinAlgError:
                continue
            x = sol[:n]
            if np.all(p.G @ x <= p.h + 1e-9):
                best = min(best, p.objective(x))
    return best


def test_min_norm_with_lower_bound():
    p = QpProblem(P=np.array([[2.0]]), c=np.zeros(1), G=np.array([[-1.0]]), h=np.array([-1.0]))
    sol = solve(p)
    assert sol.status == QpStatus.OPTIMAL
    assert sol.x[0] == pytest.approx(1.0, abs=1e-6)
    assert sol.objective == pytest.approx(1.0, abs=1e-6)


def test_shifted_quadratic_with_upper_bound():
    p = QpProblem(P=np.array([[2.0]]), c=np.array([-6.0]), G=np.array([[1.0]]), h=np.array([2.0]), constant=9.0)
    sol = solve(p)
    assert sol.x[0] == pytest.approx(2.0, abs=1e-6)
    assert sol.objective == pytest.approx(1.0, abs=1e-6)
    assert np.all(sol.z >= 0)


def test_random_qps_match_active_set_enumeration():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n = int(rng.integers(1, 7))
        m = int(rng.integers(1, 11))
        p = _random_qp(rng, n, m)
        sol = solve(p)
        assert sol.status == QpStatus.OPTIMAL
        assert sol.objective == pytest.approx(_active_set_oracle(p), abs=1e-6, rel=1e-6)


def test_equality_constrained_qps():
    rng = np.random.default_rng(1)
    for _ in range(20):
        p = _random_qp(rng, 4, 5, n_eq=2)
        sol = solve(p)
        assert sol.optimal
        np.testing.assert_allclose(p.A_eq @ sol.x, p.b_eq, atol=1e-7)
        assert sol.objective == pytest.approx(_active_set_oracle(p), abs=1e-6, rel=1e-6)


def test_kkt_residuals_at_optimum():
    rng = np.random.default_rng(2)
    p = _random_qp(rng, 5, 8)
    sol = solve(p)
    r_d = p.P @ sol.x + p.c + p.G.T @ sol.z
    assert np.linalg.norm(r_d, np.inf) <= 1e-8 * (1 + np.abs(p.c).max())
    assert np.all(p.G @ sol.x <= p.h + 1e-8)
    assert sol.mu <= 1e-8
    # weak duality: primal objective >= dual objective
    dual = -0.5 * sol.x @ p.P @ sol.x - p.h @ sol.z
    assert p.objective(sol.x) >= dual - 1e-7


def test_empty_feasible_set_is_infeasible():
    p = QpProblem(P=np.array([[1.0]]), c=np.zeros(1), G=np.array([[-1.0], [1.0]]), h=np.array([-1.0, 0.0]))
    assert solve(p).status == QpStatus.INFEASIBLE


def test_inconsistent_equalities_are_infeasible():
    p = QpProblem(P=np.eye(2), c=np.zeros(2), A_eq=np.array([[1.0, 0.0], [1.0, 0.0]]), b_eq=np.array([0.0, 1.0]))
    assert solve(p).status == QpStatus.INFEASIBLE


def test_lp_examples():
    sol = solve_lp(np.array([1.0]), G=np.array([[-1.0]]), h=np.array([-2.0]))
    assert sol.objective == pytest.approx(2.0, abs=1e-6)
    sol = solve_lp(np.array([-1.0]), G=np.array([[1.0]]), h=np.array([5.0]))
    assert sol.objective == pytest.approx(-5.0, abs=1e-6)
    assert sol.x[0] == pytest.approx(5.0, abs=1e-6)


def test_unbounded_lp_is_dual_infeasible():
    sol = solve_lp(np.array([-1.0, 0.0]), G=np.array([[-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]]), h=np.array([0.0, 1.0, 1.0]))
    assert sol.status == QpStatus.DUAL_INFEASIBLE


def test_random_lps_match_vertex_enumeration():
    rng = np.random.default_rng(3)
    for _ in range(50):
        n = int(rng.integers(1, 4))
        G = np.vstack((rng.normal(size=(4, n)), np.eye(n), -np.eye(n)))
        h = np.concatenate((rng.uniform(0.5, 2.0, size=4), 3 * np.ones(2 * n)))
        c = rng.normal(size=n)
        best = np.inf
        for rows in itertools.combinations(range(G.shape[0]), n):
            try:
                v = np.linalg.solve(G[list(rows)], h[list(rows)])
            except np.linalg.LinAlgError:
                continue
            if np.all(G @ v <= h + 1e-9):
                best = min(best, c @ v)
        sol = solve_lp(c, G=G, h=h)
        assert sol.objective == pytest.approx(best, abs=1e-6)


def test_dimension_mismatch_rejected():
    with pytest.raises(DimensionError):
        QpProblem(P=np.eye(2), c=np.zeros(2), G=np.ones((3, 3)), h=np.ones(3))
    with pytest.raises(DimensionError):
        QpProblem(P=np.eye(2), c=np.zeros(2), G=np.ones((3, 2)), h=np.ones(2))


def test_indefinite_p_rejected():
    with pytest.raises(NumericalError):
        QpProblem(P=np.diag([1.0, -1.0]), c=np.zeros(2))


def test_value_gradient_scalar_envelope():
    p = QpProblem(P=np.array([[2.0]]), c=np.array([-6.0]), G=np.array([[1.0]]), h=np.array([2.0]), constant=9.0)
    grad = value_gradient(p, solve(p))
    assert grad.h[0] == pytest.approx(-2.0, abs=1e-6)


def test_value_gradient_inactive_constraint_is_zero():
    p = QpProblem(P=np.array([[2.0]]), c=np.array([-6.0]), G=np.array([[1.0]]), h=np.array([5.0]))
    grad = value_gradient(p, solve(p))
    assert abs(grad.h[0]) < 1e-6


def test_value_gradient_matches_finite_differences():
    rng = np.random.default_rng(4)
    step = 1e-4
    for _ in range(100):
        p = _random_qp(rng, int(rng.integers(2, 5)), int(rng.integers(2, 7)), n_eq=1)
        sol = solve(p, tol=1e-11)
        assert sol.optimal
        grad = value_gradient(p, sol)
        dirs = {
            "c": rng.normal(size=p.c.shape),
            "h": rng.normal(size=p.h.shape),
            "G": rng.normal(size=p.G.shape),
            "b_eq": rng.normal(size=p.b_eq.shape),
            "A_eq": rng.normal(size=p.A_eq.shape),
        }
        S = rng.normal(size=p.P.shape)
        dirs["P"] = S + S.T
        analytic = directional(grad, **dirs)

        def value(t):
            data = {name: getattr(p, name) + t * d for name, d in dirs.items()}
            return solve(QpProblem(**data), tol=1e-11).objective

        fd = (value(step) - value(-step)) / (2 * step)
        assert abs(fd - analytic) <= 1e-3 * max(1.0, abs(analytic))


def test_solution_vjp_matches_finite_differences():
    rng = np.random.default_rng(5)
    p = _random_qp(rng, 3, 4)
    sol = solve(p, tol=1e-11)
    weights = rng.normal(size=p.n)
    grad = solution_vjp(p, sol, weights)
    dh = rng.normal(size=p.h.shape)
    dc = rng.normal(size=p.c.shape)
    step = 1e-5

    def x_of(t):
        q = QpProblem(P=p.P, c=p.c + t * dc, G=p.G, h=p.h + t * dh)
        return solve(q, tol=1e-11).x

    fd = weights @ (x_of(step) - x_of(-step)) / (2 * step)
    assert fd == pytest.approx(directional(grad, h=dh, c=dc), abs=1e-4)


def test_kkt_condition_is_finite_at_optimum():
    rng = np.random.default_rng(6)
    p = _random_qp(rng, 3, 5)
    assert np.isfinite(kkt_condition(p, solve(p)))


def test_gradient_of_non_optimal_solution_rejected():
    p = QpProblem(P=np.array([[1.0]]), c=np.zeros(1), G=np.array([[-1.0], [1.0]]), h=np.array([-1.0, 0.0]))
    with pytest.raises(NumericalError):
        value_gradient(p, solve(p))
