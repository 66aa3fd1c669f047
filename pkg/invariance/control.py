"""Safety-filtered LQR reference tracking on the identified qLPV model."""
import logging
from dataclasses import dataclass, field

import numpy as np

from invariance import conic_qp
from invariance.geometry import TOL
from sysid.model import schedule
from utils.errors import ConfigError, InfeasibleError, NumericalError

logger = logging.getLogger(__name__)

IN_SET_TOL = 1e-6


def solve_dare(A, B, Q, R, tol=1e-9, max_iter=500):
    """Discrete algebraic Riccati equation by fixed-point iteration from P = Q."""
    A, B = np.atleast_2d(A), np.atleast_2d(B)
    Q, R = np.atleast_2d(Q), np.atleast_2d(R)
    P = Q.copy()
    for it in range(max_iter):
        BtP = B.T @ P
        gain = np.linalg.solve(R + BtP @ B, BtP @ A)
        P_next = Q + A.T @ P @ A - A.T @ P @ B @ gain
        P_next = 0.5 * (P_next + P_next.T)
        if not np.all(np.isfinite(P_next)):
            raise NumericalError(f"Riccati iteration diverged at iterate {it}", iterate=it)
        if np.max(np.abs(P_next - P)) <= tol * max(1.0, np.max(np.abs(P))):
            return P_next
        P = P_next
    raise NumericalError(f"Riccati iteration did not converge in {max_iter} iterations", iterate=max_iter)


def lqr(A, B, Q, R, tol=1e-9, max_iter=500):
    """State-feedback gain K (u = -K x) and the Riccati solution P."""
    P = solve_dare(A, B, Q, R, tol, max_iter)
    B = np.atleast_2d(B)
    K = np.linalg.solve(np.atleast_2d(R) + B.T @ P @ B, B.T @ P @ np.atleast_2d(A))
    return K, P


def lqr_gain(A, B, C, Q_x, Q_q, R, tol=1e-9, max_iter=500):
    """(T_x, T_q) for u = T_x x + T_q q on the plant augmented with an output integrator."""
    n_x, n_y = A.shape[0], C.shape[0]
    A_aug = np.block([[A, np.zeros((n_x, n_y))], [C, np.eye(n_y)]])
    B_aug = np.vstack((B, np.zeros((n_y, B.shape[1]))))
    Q_aug = np.block([[Q_x, np.zeros((n_x, n_y))], [np.zeros((n_y, n_x)), Q_q]])
    K, _ = lqr(A_aug, B_aug, Q_aug, R, tol, max_iter)
    return -K[:, :n_x], -K[:, n_x:]


@dataclass
class FilterResult:
    u: np.ndarray
    active: bool


def _scheduled(m, x):
    if m.net.uses_input:
        raise ConfigError("the safety filter needs a scheduling network that does not read the input")
    p = schedule(m.net, x, np.zeros(m.n_u))
    return p, np.tensordot(p, m.A, axes=1), np.tensordot(p, m.B, axes=1)


def safety_filter(m, q_star, spec, x, y, u_des, gains=None):
    """Closest input to u_des keeping the next observer state in X(q*).

    `gains` replaces the observer gains K_i in the one-step prediction.
    """
    x = np.asarray(x, dtype=float)
    u_des = np.atleast_1d(np.asarray(u_des, dtype=float))
    gains = m.K if gains is None else np.asarray(gains, dtype=float)
    p, A_p, B_p = _scheduled(m, x)
    L_p = np.tensordot(p, gains, axes=1)
    free = A_p @ x + L_p @ (np.asarray(y, dtype=float) - m.C @ x)
    F = spec.template.F
    G = np.vstack((spec.U.H, F @ B_p))
    h = np.concatenate((spec.U.h, np.asarray(q_star, dtype=float) - F @ free))

    if np.all(G @ u_des <= h + TOL):
        return FilterResult(u=u_des, active=False)

    n_u = u_des.size
    p_qp = conic_qp.QpProblem(P=2.0 * np.eye(n_u), c=-2.0 * u_des, G=G, h=h, constant=float(u_des @ u_des))
    sol = conic_qp.solve(p_qp)
    if not sol.optimal:
        raise InfeasibleError("safety filter has no admissible input; the RCI set was left",
                              status=sol.status.value)
    return FilterResult(u=sol.x, active=True)


@dataclass
class ControllerState:
    x: np.ndarray
    integrator: np.ndarray
    q_star: np.ndarray
    Q_x: np.ndarray
    Q_q: np.ndarray
    R: np.ndarray


@dataclass
class ClosedLoopLog:
    """Per-step record; y, y_ref, u and u_des in physical units, x in model units."""

    y: np.ndarray
    y_ref: np.ndarray
    u: np.ndarray
    u_des: np.ndarray
    filter_active: np.ndarray
    in_set: np.ndarray
    x: np.ndarray
    fallbacks: int = 0
    steps: int = field(init=False)

    def __post_init__(self):
        self.steps = self.y.shape[0]


def reference_schedule(levels, step_length, steps, n_y):
    """Piecewise-constant reference cycling through `levels`."""
    levels = np.asarray(levels, dtype=float).reshape(-1, 1) * np.ones((1, n_y))
    idx = (np.arange(steps) // step_length) % len(levels)
    return levels[idx]


def closed_loop(plant, m, q_star, spec, scaler, y_ref, cfg, x_init=None):
    """Run the observer, integrator, LQR and safety filter against a plant.

    The model, q* and spec live in scaled coordinates; `scaler` maps plant
    signals to and from them.
    """
    y_ref = np.atleast_2d(np.asarray(y_ref, dtype=float))
    if y_ref.shape[1] != m.n_y:
        y_ref = y_ref.reshape(-1, m.n_y)
    steps = min(cfg.steps, y_ref.shape[0])
    gains = None if cfg.filter_gains is None else np.asarray(cfg.filter_gains, dtype=float)
    state = ControllerState(
        x=np.zeros(m.n_x) if x_init is None else np.asarray(x_init, dtype=float),
        integrator=np.zeros(m.n_y),
        q_star=np.asarray(q_star, dtype=float),
        Q_x=cfg.qx_weight * np.eye(m.n_x),
        Q_q=cfg.qq_weight * np.eye(m.n_y),
        R=cfg.r_weight * np.eye(m.n_u),
    )
    F = spec.template.F
    if np.any(F @ state.x > state.q_star + IN_SET_TOL):
        logger.warning("Initial observer state is outside the RCI set")

    ys, us, u_dess, xs = [], [], [], []
    active, in_set = [], []
    fallbacks = 0
    for t in range(steps):
        y_phys = np.asarray(plant.measure(), dtype=float)
        if not np.all(np.isfinite(y_phys)):
            raise NumericalError(f"plant output is not finite at step {t}", step=t)
        y = scaler.scale_y(y_phys)
        r = scaler.scale_y(y_ref[t])

        _, A_p, B_p = _scheduled(m, state.x)
        try:
            T_x, T_q = lqr_gain(A_p, B_p, m.C, state.Q_x, state.Q_q, state.R, cfg.lqr_tol, cfg.lqr_max_iter)
            u_des = T_x @ state.x + T_q @ state.integrator
        except NumericalError as e:
            logger.warning("LQR failed at step %d (%s); desired input set to zero", t, e)
            u_des = np.zeros(m.n_u)
            fallbacks += 1

        try:
            result = safety_filter(m, state.q_star, spec, state.x, y, u_des, gains)
        except InfeasibleError as e:
            e.diagnostics["step"] = t
            raise

        ys.append(y_phys)
        us.append(scaler.unscale_u(result.u))
        u_dess.append(scaler.unscale_u(u_des))
        active.append(result.active)
        in_set.append(bool(np.all(F @ state.x <= state.q_star + IN_SET_TOL)))
        xs.append(state.x.copy())

        plant.advance(scaler.unscale_u(result.u))
        p, A_p, B_p = _scheduled(m, state.x)
        L_p = np.tensordot(p, m.K if gains is None else gains, axes=1)
        state.x = A_p @ state.x + B_p @ result.u + L_p @ (y - m.C @ state.x)
        state.integrator = state.integrator + y - r
        if cfg.integrator_clamp is not None:
            state.integrator = np.clip(state.integrator, -cfg.integrator_clamp, cfg.integrator_clamp)

    n_active = int(np.sum(active))
    logger.info("Closed loop: %d steps, filter active in %d, %d outside the set",
                steps, n_active, steps - int(np.sum(in_set)))
    return ClosedLoopLog(
        y=np.array(ys).reshape(steps, m.n_y),
        y_ref=y_ref[:steps],
        u=np.array(us).reshape(steps, m.n_u),
        u_des=np.array(u_dess).reshape(steps, m.n_u),
        filter_active=np.array(active, dtype=bool),
        in_set=np.array(in_set, dtype=bool),
        x=np.array(xs).reshape(steps, m.n_x),
        fallbacks=fallbacks,
    )
