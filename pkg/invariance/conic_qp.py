"""Dense convex QP solver with differentiable optimal value.

Problems have the form

    minimize    1/2 x'Px + c'x + constant
    subject to  A_eq x = b_eq,  G x <= h

and are solved with a Mehrotra predictor-corrector primal-dual interior
point method. Solutions keep the final barrier parameter mu so the relaxed
KKT system stays nonsingular for implicit differentiation.
"""
import logging
from dataclasses import dataclass, fields
from enum import Enum
from typing import Optional

import numpy as np
import scipy.linalg

from utils.errors import DimensionError, NumericalError

logger = logging.getLogger(__name__)

LP_REGULARIZATION = 1e-9
STEP_FACTOR = 0.99
KKT_DELTA = 1e-12
MAX_KKT_CONDITION = 1e15


class QpStatus(str, Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    DUAL_INFEASIBLE = "dual_infeasible"
    MAX_ITER = "max_iter"


def _as_matrix(M, n, name):
    if M is None or np.size(M) == 0:
        return np.zeros((0, n))
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.ndim != 2 or M.shape[1] != n:
        raise DimensionError(f"{name} has shape {M.shape}, expected (*, {n})")
    return M


def _as_vector(v, m):
    if v is None:
        return np.zeros(m)
    return np.asarray(v, dtype=float).reshape(-1)


@dataclass
class QpProblem:
    P: np.ndarray
    c: np.ndarray
    A_eq: Optional[np.ndarray] = None
    b_eq: Optional[np.ndarray] = None
    G: Optional[np.ndarray] = None
    h: Optional[np.ndarray] = None
    constant: float = 0.0

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float).reshape(-1)
        n = self.c.size
        self.P = np.asarray(self.P, dtype=float)
        if self.P.shape != (n, n):
            raise DimensionError(f"P has shape {self.P.shape}, expected ({n}, {n})")
        self.A_eq = _as_matrix(self.A_eq, n, "A_eq")
        self.G = _as_matrix(self.G, n, "G")
        self.b_eq = _as_vector(self.b_eq, self.A_eq.shape[0])
        self.h = _as_vector(self.h, self.G.shape[0])
        if self.b_eq.shape != (self.A_eq.shape[0],):
            raise DimensionError(f"b_eq has {self.b_eq.size} entries for {self.A_eq.shape[0]} equality rows")
        if self.h.shape != (self.G.shape[0],):
            raise DimensionError(f"h has {self.h.size} entries for {self.G.shape[0]} inequality rows")

        scale = max(1.0, np.abs(self.P).max(initial=0.0))
        asym = np.abs(self.P - self.P.T).max(initial=0.0)
        if asym > 1e-12 * scale:
            raise NumericalError(f"P is not symmetric (max asymmetry {asym:.3e})", asymmetry=asym)
        self.P = 0.5 * (self.P + self.P.T)
        if n:
            min_eig = np.linalg.eigvalsh(self.P).min()
            if min_eig < -1e-9 * scale:
                raise NumericalError(f"P is not positive semidefinite (min eigenvalue {min_eig:.3e})",
                                     min_eigenvalue=min_eig)
        for name in ("P", "c", "A_eq", "b_eq", "G", "h"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise NumericalError(f"QP data {name} contains non-finite values")

    @property
    def n(self):
        return self.c.size

    @property
    def n_eq(self):
        return self.A_eq.shape[0]

    @property
    def n_ineq(self):
        return self.G.shape[0]

    def objective(self, x):
        return float(0.5 * x @ self.P @ x + self.c @ x + self.constant)


@dataclass
class QpSolution:
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    s: np.ndarray
    objective: float
    status: QpStatus
    mu: float
    iterations: int

    @property
    def optimal(self):
        return self.status == QpStatus.OPTIMAL


@dataclass
class QpGradient:
    """Sensitivities with the same shapes as the QpProblem fields."""

    P: np.ndarray
    c: np.ndarray
    A_eq: np.ndarray
    b_eq: np.ndarray
    G: np.ndarray
    h: np.ndarray


def _max_step(v, dv):
    neg = dv < 0
    if not np.any(neg):
        return 1.0
    return min(1.0, float(np.min(-v[neg] / dv[neg])))


class _ReducedKkt:
    """Factorization of [[P + G'DG, A'], [A, 0]] with D = S^-1 Z."""

    def __init__(self, p, d):
        n, me = p.n, p.n_eq
        K = np.zeros((n + me, n + me))
        K[:n, :n] = p.P + (p.G.T * d) @ p.G
        K[:n, n:] = p.A_eq.T
        K[n:, :n] = p.A_eq
        self.K = K
        reg = K.copy()
        reg[:n, :n] += KKT_DELTA * np.eye(n)
        reg[n:, n:] -= KKT_DELTA * np.eye(me)
        self.lu = scipy.linalg.lu_factor(reg, check_finite=False)
        self.n = n

    def solve(self, rhs):
        sol = scipy.linalg.lu_solve(self.lu, rhs, check_finite=False)
        # one refinement step against the unregularized matrix
        sol = sol + scipy.linalg.lu_solve(self.lu, rhs - self.K @ sol, check_finite=False)
        return sol[: self.n], sol[self.n:]


def _newton_direction(p, kkt, d, s, z, r_d, r_p, r_i, r_c):
    # dz = D (G dx + r_i) - S^-1 r_c ; ds = -(r_c + S dz) / z
    rhs = np.concatenate((-r_d - p.G.T @ (d * r_i - r_c / s), -r_p))
    dx, dy = kkt.solve(rhs)
    dz = d * (p.G @ dx + r_i) - r_c / s
    ds = -(r_c + s * dz) / z
    return dx, dy, dz, ds


def _starting_point(p):
    n, me = p.n, p.n_eq
    K = np.zeros((n + me, n + me))
    K[:n, :n] = p.P + p.G.T @ p.G + KKT_DELTA * np.eye(n)
    K[:n, n:] = p.A_eq.T
    K[n:, :n] = p.A_eq
    K[n:, n:] = -KKT_DELTA * np.eye(me)
    rhs = np.concatenate((p.G.T @ p.h - p.c, p.b_eq))
    sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
    x, y = sol[:n], sol[n:]
    s = np.maximum(p.h - p.G @ x, 1.0)
    z = np.ones(p.n_ineq)
    return x, y, s, z


def _unbounded_direction(p, x, tol=1e-6):
    """True when x / |x| is a recession direction along which the cost decreases."""
    norm = np.linalg.norm(x)
    if not np.isfinite(norm) or norm < 1e4:
        return False
    d = x / norm
    return bool(
        p.c @ d < -tol
        and np.linalg.norm(p.P @ d, np.inf) <= tol
        and np.linalg.norm(p.A_eq @ d, np.inf) <= tol
        and np.all(p.G @ d <= tol)
    )


def _phase_one_infeasible(p, tol):
    """Minimize the uniform constraint violation t >= -1 over {A x = b}."""
    n = p.n
    if p.n_eq:
        x_ls = np.linalg.lstsq(p.A_eq, p.b_eq, rcond=None)[0]
        if np.linalg.norm(p.A_eq @ x_ls - p.b_eq, np.inf) > 1e-7 * (1.0 + np.abs(p.b_eq).max()):
            return True
    G1 = np.zeros((p.n_ineq + 1, n + 1))
    G1[:-1, :n] = p.G
    G1[:-1, n] = -1.0
    G1[-1, n] = -1.0
    h1 = np.concatenate((p.h, [1.0]))
    A1 = np.hstack((p.A_eq, np.zeros((p.n_eq, 1))))
    c1 = np.zeros(n + 1)
    c1[n] = 1.0
    phase1 = QpProblem(P=LP_REGULARIZATION * np.eye(n + 1), c=c1, A_eq=A1, b_eq=p.b_eq, G=G1, h=h1)
    sol = solve(phase1, tol=tol, _phase_one=False)
    if sol.status != QpStatus.OPTIMAL:
        return False
    violation = sol.x[n]
    logger.debug("phase-one violation %.3e", violation)
    return violation > max(1e-6, 1e3 * tol) * (1.0 + np.abs(p.h).max(initial=0.0))


def _solve_equality_only(p):
    n, me = p.n, p.n_eq
    K = np.zeros((n + me, n + me))
    K[:n, :n] = p.P
    K[:n, n:] = p.A_eq.T
    K[n:, :n] = p.A_eq
    rhs = np.concatenate((-p.c, p.b_eq))
    sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
    x, y = sol[:n], sol[n:]
    status = QpStatus.OPTIMAL
    if me and np.linalg.norm(p.A_eq @ x - p.b_eq, np.inf) > 1e-7 * (1.0 + np.abs(p.b_eq).max()):
        status = QpStatus.INFEASIBLE
    elif np.linalg.norm(p.P @ x + p.c + p.A_eq.T @ y, np.inf) > 1e-7 * (1.0 + np.abs(p.c).max(initial=0.0)):
        status = QpStatus.DUAL_INFEASIBLE
    return QpSolution(x=x, y=y, z=np.zeros(0), s=np.zeros(0), objective=p.objective(x),
                      status=status, mu=0.0, iterations=1)


def solve(p, tol=1e-8, max_iter=100, _phase_one=True):
    """Primal-dual interior point solve with Mehrotra predictor-corrector steps."""
    if p.n_ineq == 0:
        return _solve_equality_only(p)

    m = p.n_ineq
    x, y, s, z = _starting_point(p)
    b_scale = 1.0 + np.abs(p.b_eq).max(initial=0.0)
    h_scale = 1.0 + np.abs(p.h).max(initial=0.0)
    c_scale = 1.0 + np.abs(p.c).max(initial=0.0)

    status = QpStatus.MAX_ITER
    mu = float(s @ z) / m
    stalls = 0
    it = 0
    for it in range(1, max_iter + 1):
        r_d = p.P @ x + p.c + p.A_eq.T @ y + p.G.T @ z
        r_p = p.A_eq @ x - p.b_eq
        r_i = p.G @ x + s - p.h
        mu = float(s @ z) / m
        if not (np.all(np.isfinite(x)) and np.isfinite(mu)):
            break
        if (np.linalg.norm(r_p, np.inf) <= tol * b_scale
                and np.linalg.norm(r_i, np.inf) <= tol * h_scale
                and np.linalg.norm(r_d, np.inf) <= tol * c_scale
                and mu <= tol):
            status = QpStatus.OPTIMAL
            break

        # Farkas certificate from diverging duals
        dual_norm = np.abs(z).sum() + np.abs(y).sum()
        certificate = p.h @ z + p.b_eq @ y
        if (dual_norm > 1e6 and certificate / dual_norm < -1e-6
                and np.linalg.norm(p.A_eq.T @ y + p.G.T @ z, np.inf) / dual_norm <= 1e-9):
            status = QpStatus.INFEASIBLE
            break

        d = z / s
        try:
            kkt = _ReducedKkt(p, d)
        except (np.linalg.LinAlgError, ValueError):
            break

        # predictor
        dx, dy, dz, ds = _newton_direction(p, kkt, d, s, z, r_d, r_p, r_i, s * z)
        alpha = min(_max_step(s, ds), _max_step(z, dz))
        mu_aff = float((s + alpha * ds) @ (z + alpha * dz)) / m
        sigma = (mu_aff / mu) ** 3 if mu > 0 else 0.0

        # corrector
        r_c = s * z + ds * dz - sigma * mu
        dx, dy, dz, ds = _newton_direction(p, kkt, d, s, z, r_d, r_p, r_i, r_c)
        alpha = STEP_FACTOR * min(_max_step(s, ds), _max_step(z, dz))
        if not np.isfinite(alpha):
            break

        x = x + alpha * dx
        y = y + alpha * dy
        z = z + alpha * dz
        s = s + alpha * ds
        stalls = stalls + 1 if alpha < 1e-10 else 0
        if stalls >= 5:
            break

    if status != QpStatus.INFEASIBLE and _unbounded_direction(p, x):
        status = QpStatus.DUAL_INFEASIBLE
    elif status == QpStatus.MAX_ITER and _phase_one and _phase_one_infeasible(p, tol):
        status = QpStatus.INFEASIBLE

    if status != QpStatus.OPTIMAL:
        logger.debug("QP solve ended with status %s after %d iterations (mu %.3e)", status.value, it, mu)
    objective = p.objective(x) if status == QpStatus.OPTIMAL else np.inf
    return QpSolution(x=x, y=y, z=z, s=s, objective=objective, status=status, mu=mu, iterations=it)


def solve_lp(c, A_eq=None, b_eq=None, G=None, h=None, tol=1e-8, max_iter=100):
    """LP through the QP path with a 1e-9 quadratic regularization."""
    c = np.asarray(c, dtype=float).reshape(-1)
    p = QpProblem(P=LP_REGULARIZATION * np.eye(c.size), c=c, A_eq=A_eq, b_eq=b_eq, G=G, h=h)
    sol = solve(p, tol=tol, max_iter=max_iter)
    if sol.optimal:
        sol.objective = float(c @ sol.x)
    return sol


def _relaxed_kkt(p, sol):
    """OptNet-style KKT Jacobian at the barrier-relaxed solution."""
    n, mi, me = p.n, p.n_ineq, p.n_eq
    K = np.zeros((n + mi + me, n + mi + me))
    K[:n, :n] = p.P
    K[:n, n:n + mi] = p.G.T * sol.z
    K[:n, n + mi:] = p.A_eq.T
    K[n:n + mi, :n] = p.G
    K[n:n + mi, n:n + mi] = np.diag(-sol.s)
    K[n + mi:, :n] = p.A_eq
    return K


def kkt_condition(p, sol):
    """2-norm condition estimate of the relaxed KKT system."""
    return float(np.linalg.cond(_relaxed_kkt(p, sol)))


def _check_kkt(p, sol):
    if not sol.optimal:
        raise NumericalError(f"cannot differentiate a {sol.status.value} QP solution", status=sol.status.value)
    cond = kkt_condition(p, sol) if p.n_ineq + p.n_eq else 1.0
    if not np.isfinite(cond) or cond > MAX_KKT_CONDITION:
        raise NumericalError(f"KKT system is singular (condition estimate {cond:.3e})", condition=cond)
    return cond


def value_gradient(p, sol, check=True):
    """Gradient of the optimal value w.r.t. all problem data (envelope theorem)."""
    if check:
        _check_kkt(p, sol)
    x, y, z = sol.x, sol.y, sol.z
    return QpGradient(
        P=0.5 * np.outer(x, x),
        c=x.copy(),
        A_eq=np.outer(y, x),
        b_eq=-y,
        G=np.outer(z, x),
        h=-z,
    )


def directional(grad, **perturbations):
    """Inner product of a QpGradient with perturbations of named data fields."""
    names = {f.name for f in fields(QpGradient)}
    total = 0.0
    for name, value in perturbations.items():
        if name not in names:
            raise KeyError(f"unknown QP field {name!r}")
        if value is not None:
            total += float(np.sum(getattr(grad, name) * np.asarray(value, dtype=float)))
    return total


def solution_vjp(p, sol, dx):
    """Pull a cotangent on the optimizer x* back to the QP data."""
    _check_kkt(p, sol)
    n, mi = p.n, p.n_ineq
    K = _relaxed_kkt(p, sol)
    rhs = np.zeros(K.shape[0])
    rhs[:n] = -np.asarray(dx, dtype=float)
    d = np.linalg.solve(K, rhs)
    d_x, d_z, d_y = d[:n], d[n:n + mi], d[n + mi:]
    x, y, z = sol.x, sol.y, sol.z
    return QpGradient(
        P=0.5 * (np.outer(d_x, x) + np.outer(x, d_x)),
        c=d_x,
        A_eq=np.outer(d_y, x) + np.outer(y, d_x),
        b_eq=-d_y,
        G=np.outer(z * d_z, x) + np.outer(z, d_x),
        h=-z * d_z,
    )
