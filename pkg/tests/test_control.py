import numpy as np
import pytest
from scipy.linalg import solve_discrete_are

from invariance.control import closed_loop, lqr, lqr_gain, reference_schedule, safety_filter, solve_dare
from invariance.geometry import box_polyhedron, make_box_template
from invariance.rci import RciSpec
from sysid.model import QlpvModel, Scaler, SchedulingNet
from sysid.plant import Plant
from utils.config import ControlConfig
from utils.errors import ConfigError, InfeasibleError


def _scalar_model(a=0.5, b=1.0, uses_input=False):
    net = SchedulingNet([], [], np.zeros((0, 1)), np.zeros(0), uses_input=uses_input)
    return QlpvModel(A=[[[a]]], B=[[[b]]], K=np.zeros((1, 1, 1)), C=[[1.0]], net=net, x0=np.zeros(1))


def _scalar_spec():
    return RciSpec(make_box_template(1), box_polyhedron([-1.0], [1.0]), box_polyhedron([-1.0], [1.0]), horizon=5)


class _ScalarPlant(Plant):
    def __init__(self, a=0.5, b=1.0):
        super().__init__(np.zeros(1))
        self.a, self.b = a, b

    def transition(self, z, u):
        return self.a * z + self.b * u

    def output_map(self, z):
        return z.copy()


def test_dare_zero_dynamics():
    P = solve_dare(np.zeros((1, 1)), np.ones((1, 1)), np.eye(1), np.eye(1))
    assert P[0, 0] == pytest.approx(1.0)
    K, _ = lqr(np.zeros((1, 1)), np.ones((1, 1)), np.eye(1), np.eye(1))
    assert K[0, 0] == pytest.approx(0.0)


def test_dare_golden_ratio():
    P = solve_dare(np.eye(1), np.eye(1), np.eye(1), np.eye(1))
    golden = (1 + np.sqrt(5)) / 2
    assert P[0, 0] == pytest.approx(golden, abs=1e-8)
    K, _ = lqr(np.eye(1), np.eye(1), np.eye(1), np.eye(1))
    assert K[0, 0] == pytest.approx(golden / (1 + golden), abs=1e-8)


def test_dare_matches_scipy_and_stabilizes():
    rng = np.random.default_rng(0)
    for _ in range(20):
        A = rng.normal(size=(3, 3))
        B = rng.normal(size=(3, 1))
        Q, R = np.eye(3), np.eye(1)
        K, P = lqr(A, B, Q, R)
        np.testing.assert_allclose(P, solve_discrete_are(A, B, Q, R), rtol=1e-6, atol=1e-6)
        assert np.max(np.abs(np.linalg.eigvals(A - B @ K))) < 1.0


def test_integrator_gains_stabilize_augmented_system():
    A = np.array([[0.9, 0.2], [0.0, 0.7]])
    B = np.array([[0.0], [1.0]])
    C = np.array([[1.0, 0.0]])
    T_x, T_q = lqr_gain(A, B, C, np.eye(2), 10 * np.eye(1), np.eye(1))
    A_cl = np.block([[A + B @ T_x, B @ T_q], [C, np.eye(1)]])
    assert np.max(np.abs(np.linalg.eigvals(A_cl))) < 1.0


def test_feasible_desired_input_passes_through():
    res = safety_filter(_scalar_model(), np.ones(2), _scalar_spec(), np.array([0.5]), np.array([0.5]), np.array([0.3]))
    assert not res.active
    assert res.u[0] == 0.3


def test_filter_projects_onto_invariance_constraint():
    # x+ = 0.25 + u must stay below 1
    res = safety_filter(_scalar_model(), np.ones(2), _scalar_spec(), np.array([0.5]), np.array([0.5]), np.array([0.9]))
    assert res.active
    assert res.u[0] == pytest.approx(0.75, abs=1e-6)


def test_filter_clamps_to_input_box_when_set_is_large():
    res = safety_filter(_scalar_model(), 100 * np.ones(2), _scalar_spec(), np.zeros(1), np.zeros(1), np.array([3.0]))
    assert res.u[0] == pytest.approx(1.0, abs=1e-6)
    res = safety_filter(_scalar_model(), 100 * np.ones(2), _scalar_spec(), np.zeros(1), np.zeros(1), np.array([-3.0]))
    assert res.u[0] == pytest.approx(-1.0, abs=1e-6)


def test_filter_matches_grid_search():
    m = _scalar_model(a=0.8, b=0.5)
    spec = _scalar_spec()
    q_star = np.array([0.6, 0.9])
    grid = np.arange(-2.0, 2.0, 1e-4)
    rng = np.random.default_rng(1)
    for _ in range(20):
        x = rng.uniform(-0.9, 0.6, size=1)
        u_des = rng.uniform(-3, 3, size=1)
        nxt = 0.8 * x[0] + 0.5 * grid
        ok = (np.abs(grid) <= 1.0) & (nxt <= q_star[0]) & (-nxt <= q_star[1])
        oracle = grid[ok][np.argmin(np.abs(grid[ok] - u_des[0]))]
        res = safety_filter(m, q_star, spec, x, x, u_des)
        assert res.u[0] == pytest.approx(oracle, abs=1e-3)


def test_filter_rejects_input_dependent_scheduling():
    with pytest.raises(ConfigError):
        safety_filter(_scalar_model(uses_input=True), np.ones(2), _scalar_spec(), np.zeros(1), np.zeros(1),
                      np.zeros(1))


def test_filter_signals_breach_when_no_input_is_admissible():
    with pytest.raises(InfeasibleError):
        safety_filter(_scalar_model(), np.array([-0.9, 1.0]), _scalar_spec(), np.array([0.5]), np.array([0.5]),
                      np.zeros(1))


def test_zero_reference_from_origin_keeps_filter_idle():
    m = _scalar_model()
    cfg = ControlConfig(steps=50)
    log = closed_loop(_ScalarPlant(), m, np.ones(2), _scalar_spec(), Scaler.identity(1, 1), np.zeros((50, 1)), cfg)
    assert log.steps == 50
    assert not log.filter_active.any()
    assert log.in_set.all()
    np.testing.assert_allclose(log.y, 0.0, atol=1e-12)


def test_aggressive_reference_activates_filter_and_respects_outputs():
    m = _scalar_model()
    cfg = ControlConfig(steps=100)
    y_ref = reference_schedule([2.0, -2.0], 50, 100, 1)
    log = closed_loop(_ScalarPlant(), m, np.ones(2), _scalar_spec(), Scaler.identity(1, 1), y_ref, cfg)
    assert log.filter_active.any()
    assert log.in_set.all()
    assert np.all(np.abs(log.y) <= 1.0 + 1e-6)
    assert np.all(np.abs(log.u) <= 1.0 + 1e-6)


def test_reference_schedule_cycles_levels():
    ref = reference_schedule([0.0, 1.0], 2, 6, 1)
    np.testing.assert_array_equal(ref[:, 0], [0, 0, 1, 1, 0, 0])
