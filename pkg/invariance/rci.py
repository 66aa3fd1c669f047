"""Robust control invariant sets for the qLPV model.

The size of an RCI set X(q) is measured by how closely trajectories of the
nominal model, constrained to X(q) and the input set, can follow the vertices
of the output set. That value r is the optimum of a convex QP whose data are
differentiable functions of the model matrices and the disturbance set, which
is how r enters training.
"""
import logging
from dataclasses import dataclass, field
from typing import Optional

import jax
import jax.numpy as jnp
import numpy as np
from jax.flatten_util import ravel_pytree

from invariance import conic_qp
from invariance.conic_qp import QpProblem, QpStatus
from invariance.geometry import MIN_ABS_DET, ConstraintPolyhedron, TemplatePolytope, make_box_template
from sysid.model import lti_model
from sysid.optim import adam, lbfgs
from utils.errors import ConfigError, DimensionError, InfeasibleError, NumericalError

logger = logging.getLogger(__name__)

RESIDUAL_TOL = 1e-6
# |det Sigma| below this rejects a step of the initial-set program
MIN_SIGMA_DET = 1e-8


@dataclass(frozen=True)
class RciSpec:
    template: TemplatePolytope
    U: ConstraintPolyhedron
    Y: ConstraintPolyhedron
    horizon: int = 50
    kappa: float = 1.1
    size_function: str = "tracking"

    def __post_init__(self):
        if self.horizon < 1:
            raise ConfigError(f"horizon must be >= 1, got {self.horizon}")
        if self.Y.vertices is None or len(self.Y.vertices) == 0:
            raise ConfigError("output set needs a nonempty vertex list")
        if self.size_function not in ("tracking", "l1"):
            raise ConfigError(f"unknown size function {self.size_function!r}")
        if not self.kappa > 1.0:
            raise ConfigError(f"kappa must be > 1, got {self.kappa}")

    def with_template(self, template):
        return RciSpec(template, self.U, self.Y, self.horizon, self.kappa, self.size_function)


@dataclass
class RciSolution:
    """Set parameter, vertex inputs and the tracking trajectories (states x_1..x_M)."""

    q: np.ndarray
    vertex_inputs: np.ndarray
    states: np.ndarray
    inputs: np.ndarray
    r_value: float
    status: QpStatus
    problem: Optional[QpProblem] = field(default=None, repr=False)
    qp: Optional[conic_qp.QpSolution] = field(default=None, repr=False)

    @property
    def optimal(self):
        return self.status == QpStatus.OPTIMAL

    def to_dict(self):
        return {
            "q": self.q.tolist(),
            "vertex_inputs": self.vertex_inputs.tolist(),
            "r_value": self.r_value if np.isfinite(self.r_value) else None,
            "status": self.status.value,
        }

    @classmethod
    def from_dict(cls, data):
        r = data.get("r_value")
        return cls(
            q=np.asarray(data["q"], dtype=float),
            vertex_inputs=np.atleast_2d(np.asarray(data["vertex_inputs"], dtype=float)),
            states=np.zeros((0, 0, 0)),
            inputs=np.zeros((0, 0, 0)),
            r_value=np.inf if r is None else float(r),
            status=QpStatus(data["status"]),
        )


@dataclass
class RciResiduals:
    """lhs - rhs of every invariance row; all <= 0 iff X(q) is RCI."""

    dynamics: np.ndarray
    output: np.ndarray
    vertex_input: np.ndarray
    cone: np.ndarray

    def max(self):
        parts = [r.ravel() for r in (self.dynamics, self.output, self.vertex_input, self.cone) if r.size]
        return float(np.max(np.concatenate(parts))) if parts else -np.inf


def model_theta(m, w):
    """The model and disturbance data r depends on, as a jax pytree."""
    return {
        "A": jnp.asarray(m.A), "B": jnp.asarray(m.B), "K": jnp.asarray(m.K), "C": jnp.asarray(m.C),
        "c_w": jnp.asarray(w.c_w, dtype=float).reshape(-1),
        "eps_w": jnp.asarray(w.eps_w, dtype=float).reshape(-1),
    }


def _check_dims(m, spec):
    if m.n_x != spec.template.n_x:
        raise DimensionError(f"template is for n_x={spec.template.n_x}, model has n_x={m.n_x}")
    if spec.U.dim != m.n_u or spec.Y.dim != m.n_y:
        raise DimensionError(f"U/Y have dims {spec.U.dim}/{spec.Y.dim}, model has n_u={m.n_u}, n_y={m.n_y}")


def rci_residuals(m, w, spec, q, vertex_inputs):
    _check_dims(m, spec)
    tpl = spec.template
    q = np.asarray(q, dtype=float)
    U_v = np.atleast_2d(np.asarray(vertex_inputs, dtype=float)).reshape(tpl.v, m.n_u)
    c_w = np.asarray(w.c_w, dtype=float).reshape(-1)
    eps_w = np.asarray(w.eps_w, dtype=float).reshape(-1)
    kappa = spec.kappa
    X_v = np.einsum("kxf,f->kx", tpl.V, q)

    nxt = np.einsum("ixy,ky->ikx", m.A, X_v) + np.einsum("ixu,ku->ikx", m.B, U_v)
    FK = np.einsum("fx,ixy->ify", tpl.F, m.K)
    shift = FK @ c_w + kappa * np.abs(FK) @ eps_w
    dynamics = np.einsum("fx,ikx->ikf", tpl.F, nxt) + shift[:, None, :] - q

    Hy, hy = spec.Y.H, spec.Y.h
    output = (X_v @ m.C.T + c_w) @ Hy.T + kappa * (np.abs(Hy) @ eps_w) - hy
    vertex_input = U_v @ spec.U.H.T - spec.U.h
    return RciResiduals(dynamics=dynamics, output=output, vertex_input=vertex_input, cone=tpl.E @ q)


def size_l1(q):
    return float(np.sum(np.abs(np.asarray(q, dtype=float))))


class RQpAssembler:
    """Builds the size QP for one (spec, dimensions) pair.

    Decision vector: [q (f), vertex inputs (v*n_u), tracking inputs
    (v_y*M*n_u)] in tracking mode, [q, vertex inputs, t (f)] with
    |q| <= t in l1 mode. The data function is jitted once per instance.
    """

    def __init__(self, spec, n_p, n_x, n_u, n_y, regularization=1e-9):
        if n_x != spec.template.n_x or spec.U.dim != n_u or spec.Y.dim != n_y:
            raise DimensionError("size QP dimensions do not match the RCI spec")
        self.spec = spec
        self.n_p, self.n_x, self.n_u, self.n_y = n_p, n_x, n_u, n_y
        self.regularization = regularization
        tpl = spec.template
        self.f, self.v = tpl.f, tpl.v
        self.v_y = spec.Y.vertices.shape[0]
        self.M = spec.horizon
        self.tracking = spec.size_function == "tracking"
        self.n_vertex = self.v * n_u
        self.n_traj = self.v_y * self.M * n_u if self.tracking else 0
        self.n_aux = 0 if self.tracking else self.f
        self.n = self.f + self.n_vertex + self.n_traj + self.n_aux
        self.constant = float(self.M * np.sum(spec.Y.vertices ** 2)) if self.tracking else 0.0
        self._data = jax.jit(self._build)

    @classmethod
    def for_model(cls, m, spec, regularization=1e-9):
        _check_dims(m, spec)
        return cls(spec, m.n_p, m.n_x, m.n_u, m.n_y, regularization)

    def _blocks(self, rows, **parts):
        widths = (("q", self.f), ("v", self.n_vertex), ("T", self.n_traj), ("t", self.n_aux))
        cols = [parts.get(name, jnp.zeros((rows, width))) for name, width in widths]
        return jnp.concatenate(cols, axis=1)

    def _condensed(self, A_bar, B_bar):
        """(M, M, n_x, n_u) blocks of the map from u_0..u_{M-1} to x_1..x_M."""
        M = self.M

        def power(P, _):
            return A_bar @ P, P

        _, powers = jax.lax.scan(power, jnp.eye(self.n_x), None, length=M)
        AB = powers @ B_bar
        lag = np.arange(M)[:, None] - np.arange(M)[None, :]
        return jnp.where((lag >= 0)[:, :, None, None], AB[np.clip(lag, 0, None)], 0.0)

    def _build(self, theta):
        spec, tpl = self.spec, self.spec.template
        A, B, K, C = theta["A"], theta["B"], theta["K"], theta["C"]
        c_w, eps_w = theta["c_w"], theta["eps_w"]
        f, v, M, n_u, kappa = self.f, self.v, self.M, self.n_u, spec.kappa
        F, E, V = jnp.asarray(tpl.F), jnp.asarray(tpl.E), jnp.asarray(tpl.V)
        Hu, hu = jnp.asarray(spec.U.H), jnp.asarray(spec.U.h)
        Hy, hy = jnp.asarray(spec.Y.H), jnp.asarray(spec.Y.h)
        m_u = Hu.shape[0]

        G_rows, h_rows = [], []
        gamma = None
        P = jnp.zeros((self.n, self.n))
        c = jnp.zeros(self.n)

        if self.tracking:
            gamma = self._condensed(A.mean(axis=0), B.mean(axis=0))
            Z = jnp.einsum("yx,tsxu->tysu", C, gamma).reshape(M * self.n_y, M * n_u)
            targets = jnp.asarray(np.tile(spec.Y.vertices, (1, M)))
            i0 = f + self.n_vertex
            P = P.at[i0:i0 + self.n_traj, i0:i0 + self.n_traj].set(jnp.kron(jnp.eye(self.v_y), 2.0 * Z.T @ Z))
            c = c.at[i0:i0 + self.n_traj].set((-2.0 * targets @ Z).reshape(-1))

            # x_t^j in X(q) and u_t^j in U
            FG = jnp.einsum("fx,tsxu->tfsu", F, gamma).reshape(M * f, M * n_u)
            rows = self.v_y * M * f
            G_rows.append(self._blocks(rows, q=jnp.tile(-jnp.eye(f), (self.v_y * M, 1)),
                                       T=jnp.kron(jnp.eye(self.v_y), FG)))
            h_rows.append(jnp.zeros(rows))
            rows = self.v_y * M * m_u
            G_rows.append(self._blocks(rows, T=jnp.kron(jnp.eye(self.v_y * M), Hu)))
            h_rows.append(jnp.tile(hu, self.v_y * M))
        else:
            c = c.at[f + self.n_vertex:].set(1.0)
            G_rows.append(self._blocks(f, q=jnp.eye(f), t=-jnp.eye(f)))
            G_rows.append(self._blocks(f, q=-jnp.eye(f), t=-jnp.eye(f)))
            h_rows.extend((jnp.zeros(f), jnp.zeros(f)))

        # robust invariance at every vertex, for every model vertex
        rows = self.n_p * v * f
        FAV = jnp.einsum("fx,ixy,kyg->ikfg", F, A, V) - jnp.eye(f)
        FB = jnp.einsum("fx,ixu->ifu", F, B)
        vertex_block = jnp.einsum("ifu,kl->ikflu", FB, jnp.eye(v)).reshape(rows, v * n_u)
        FK = jnp.einsum("fx,ixy->ify", F, K)
        shift = FK @ c_w + kappa * jnp.abs(FK) @ eps_w
        G_rows.append(self._blocks(rows, q=FAV.reshape(rows, f), v=vertex_block))
        h_rows.append(jnp.broadcast_to(-shift[:, None, :], (self.n_p, v, f)).reshape(-1))

        # outputs at the vertices stay in Y for every disturbance
        HCV = jnp.einsum("my,yx,kxg->kmg", Hy, C, V)
        rows = v * Hy.shape[0]
        G_rows.append(self._blocks(rows, q=HCV.reshape(rows, f)))
        h_rows.append(jnp.tile(hy - Hy @ c_w - kappa * jnp.abs(Hy) @ eps_w, v))

        G_rows.append(self._blocks(v * m_u, v=jnp.kron(jnp.eye(v), Hu)))
        h_rows.append(jnp.tile(hu, v))
        G_rows.append(self._blocks(E.shape[0], q=E))
        h_rows.append(jnp.zeros(E.shape[0]))

        P = P + self.regularization * jnp.eye(self.n)
        data = (P, c, jnp.concatenate(G_rows, axis=0), jnp.concatenate(h_rows))
        return data, gamma

    def data(self, theta):
        return self._data(theta)[0]

    def problem(self, m, w, fixed_q=None):
        (P, c, G, h), _ = self._data(model_theta(m, w))
        A_eq = b_eq = None
        if fixed_q is not None:
            A_eq = np.hstack((np.eye(self.f), np.zeros((self.f, self.n - self.f))))
            b_eq = np.asarray(fixed_q, dtype=float).reshape(self.f)
        return QpProblem(P=np.asarray(P), c=np.asarray(c), A_eq=A_eq, b_eq=b_eq,
                         G=np.asarray(G), h=np.asarray(h), constant=self.constant)

    def solve(self, m, w, fixed_q=None, tol=1e-8, max_iter=100):
        theta = model_theta(m, w)
        _, gamma = self._data(theta)
        p = self.problem(m, w, fixed_q)
        qp = conic_qp.solve(p, tol=tol, max_iter=max_iter)
        return self._unpack(p, qp, gamma)

    def _unpack(self, p, qp, gamma):
        f, M, n_u = self.f, self.M, self.n_u
        x = qp.x
        q = x[:f].copy()
        vertex_inputs = x[f:f + self.n_vertex].reshape(self.v, n_u)
        if self.tracking:
            inputs = x[f + self.n_vertex:f + self.n_vertex + self.n_traj].reshape(self.v_y, M, n_u)
            G = np.asarray(gamma).transpose(0, 2, 1, 3).reshape(M * self.n_x, M * n_u)
            states = (inputs.reshape(self.v_y, M * n_u) @ G.T).reshape(self.v_y, M, self.n_x)
        else:
            inputs = np.zeros((self.v_y, 0, n_u))
            states = np.zeros((self.v_y, 0, self.n_x))
        r_value = qp.objective if qp.optimal else np.inf
        if not qp.optimal:
            logger.info("size QP ended with status %s", qp.status.value)
        return RciSolution(q=q, vertex_inputs=vertex_inputs, states=states, inputs=inputs,
                           r_value=float(r_value), status=qp.status, problem=p, qp=qp)

    def gradient(self, theta, sol, check=True):
        """Gradient of r w.r.t. the theta pytree, via the envelope theorem."""
        if not sol.optimal:
            raise NumericalError(f"cannot differentiate a {sol.status.value} size QP", status=sol.status.value)
        g = conic_qp.value_gradient(sol.problem, sol.qp, check=check)
        _, pullback = jax.vjp(self.data, theta)
        cotangent = (jnp.asarray(g.P), jnp.asarray(g.c), jnp.asarray(g.G), jnp.asarray(g.h))
        return pullback(cotangent)[0]


def assemble_r_qp(m, w, spec, fixed_q=None, regularization=1e-9):
    return RQpAssembler.for_model(m, spec, regularization).problem(m, w, fixed_q)


def solve_r(m, w, spec, fixed_q=None, regularization=1e-9, tol=1e-8, max_iter=100):
    """Optimal size r of the largest trackable RCI set; r = inf when infeasible."""
    return RQpAssembler.for_model(m, spec, regularization).solve(m, w, fixed_q, tol, max_iter)


def r_gradient(m, w, spec, sol, check=True):
    """dr/d(A, B, K, C, c_w, eps_w) as numpy arrays keyed by name."""
    assembler = RQpAssembler.for_model(m, spec)
    grads = assembler.gradient(model_theta(m, w), sol, check=check)
    return {name: np.asarray(g) for name, g in grads.items()}


def recompute_q(m, w, spec, regularization=1e-9, tol=1e-8, max_iter=100):
    """Fresh RCI parameter for the current model; Infeasible is a valid outcome."""
    sol = solve_r(m, w, spec, regularization=regularization, tol=tol, max_iter=max_iter)
    if sol.optimal:
        logger.info("Recomputed RCI set: r = %.6g, ||q||_1 = %.6g", sol.r_value, size_l1(sol.q))
    else:
        logger.warning("No RCI set of the current template exists for this model (%s)", sol.status.value)
    return sol


@dataclass
class InvarianceCertificate:
    checks: int
    violations: int
    max_excess: float

    @property
    def passed(self):
        return self.violations == 0


def certify_invariance(m, w, spec, sol, n_samples=100, seed=0, tol=RESIDUAL_TOL):
    """Monte Carlo one-step check from every vertex for sampled disturbances."""
    tpl = spec.template
    rng = np.random.default_rng(seed)
    c_w = np.asarray(w.c_w, dtype=float).reshape(-1)
    half = spec.kappa * np.asarray(w.eps_w, dtype=float).reshape(-1)
    X_v = np.einsum("kxf,f->kx", tpl.V, sol.q)
    samples = c_w + rng.uniform(-1.0, 1.0, size=(n_samples, m.n_y)) * half
    checks, violations, worst = 0, 0, -np.inf
    for k in range(tpl.v):
        u_k = sol.vertex_inputs[k]
        y = X_v[k] @ m.C.T + samples
        out_excess = (y @ spec.Y.H.T - spec.Y.h).max(axis=1)
        for i in range(m.n_p):
            nxt = m.A[i] @ X_v[k] + m.B[i] @ u_k + samples @ m.K[i].T
            excess = np.maximum((nxt @ tpl.F.T - sol.q).max(axis=1), out_excess)
            checks += n_samples
            violations += int(np.sum(excess > tol))
            worst = max(worst, float(excess.max()))
    if violations:
        logger.warning("Invariance check failed in %d of %d samples (max excess %.3e)", violations, checks, worst)
    return InvarianceCertificate(checks=checks, violations=violations, max_excess=worst)


@dataclass
class InitialRci:
    sigma: np.ndarray
    template: TemplatePolytope
    solution: RciSolution

    @property
    def r_value(self):
        return self.solution.r_value


def _initial_program(A, B, C, w, spec):
    """Objective and stacked constraint rows of the initial-set program over Sigma."""
    tpl = spec.template
    F = jnp.asarray(tpl.F)
    corners = jnp.asarray(np.einsum("kxf,f->kx", tpl.V, np.ones(tpl.f)))
    Hu, hu = jnp.asarray(spec.U.H), jnp.asarray(spec.U.h)
    Hy, hy = jnp.asarray(spec.Y.H), jnp.asarray(spec.Y.h)
    c_w = jnp.asarray(w.c_w, dtype=float).reshape(-1)
    eps_w = jnp.asarray(w.eps_w, dtype=float).reshape(-1)
    targets = jnp.asarray(spec.Y.vertices)
    A, B, C = jnp.asarray(A), jnp.asarray(B), jnp.asarray(C)
    kappa = spec.kappa
    n_x = A.shape[0]

    def trajectories(U):
        def body(x, u):
            x = A @ x + B @ u
            return x, x

        return jax.vmap(lambda Uj: jax.lax.scan(body, jnp.zeros(n_x), Uj)[1])(U)

    def rows(z):
        S = z["sigma"]
        S_inv = jnp.linalg.inv(S)
        X_v = corners @ S.T
        nxt = X_v @ A.T + z["vertex"] @ B.T
        g_dyn = nxt @ (F @ S_inv).T - 1.0
        g_out = (X_v @ C.T + c_w) @ Hy.T + kappa * (jnp.abs(Hy) @ eps_w) - hy
        g_vin = z["vertex"] @ Hu.T - hu
        X = trajectories(z["traj"])
        g_state = X @ (F @ S_inv).T - 1.0
        g_tin = z["traj"] @ Hu.T - hu
        return jnp.concatenate([g.ravel() for g in (g_dyn, g_out, g_vin, g_state, g_tin)])

    def tracking(z):
        X = trajectories(z["traj"])
        return jnp.sum((targets[:, None, :] - X @ C.T) ** 2)

    return tracking, rows


def _initial_scale(corners, C, spec, floor, radius):
    """Largest s = radius / 2^k whose box s*[-1, 1]^n_x maps into the output set."""
    s = 0.5 * radius
    for _ in range(60):
        if np.all((s * corners @ C.T) @ spec.Y.H.T <= spec.Y.h - floor):
            return s
        s *= 0.5
    return s


def solve_initial_rci(lti, w, spec, cfg, state_radius=1.0):
    """Initial box RCI set {x : |Sigma^-1 x| <= 1} for the identified LTI model.

    Penalty method over (Sigma, vertex inputs, tracking inputs), then an exact
    size QP with Sigma fixed and q = 1.
    """
    A, B, C = (np.atleast_2d(np.asarray(M, dtype=float)) for M in lti)
    n_x = A.shape[0]
    if A.size == 0:
        raise ConfigError("no states left to build an invariant set for")
    base = make_box_template(n_x)
    spec = spec.with_template(base)
    n_u = B.shape[1]

    floor = spec.Y.H @ np.asarray(w.c_w).reshape(-1) + spec.kappa * np.abs(spec.Y.H) @ np.asarray(w.eps_w).reshape(-1)
    if np.any(floor >= spec.Y.h):
        raise InfeasibleError("the inflated disturbance set does not fit inside the output set",
                              max_residual=float(np.max(floor - spec.Y.h)))

    tracking, rows = _initial_program(A, B, C, w, spec)
    z = {
        "sigma": np.eye(n_x),
        "vertex": np.zeros((base.v, n_u)),
        "traj": np.zeros((spec.Y.vertices.shape[0], spec.horizon, n_u)),
    }
    corners = np.einsum("kxf,f->kx", base.V, np.ones(base.f))
    z["sigma"] = _initial_scale(corners, C, spec, floor, state_radius) * np.eye(n_x)
    flat, unravel = ravel_pytree({k: jnp.asarray(v) for k, v in z.items()})

    def abs_det(x):
        return float(abs(np.linalg.det(np.asarray(unravel(x)["sigma"]))))

    rho = cfg.rho_start
    while rho <= cfg.rho_stop * (1 + 1e-12):
        def penalized(x, rho=rho):
            zz = unravel(x)
            g = rows(zz) + cfg.init_margin
            return tracking(zz) + rho * jnp.sum(jnp.maximum(g, 0.0) ** 2)

        value_and_grad = jax.jit(jax.value_and_grad(penalized))

        def fg(x):
            if abs_det(x) < MIN_SIGMA_DET:
                return np.inf, np.zeros_like(x)
            val, grad = value_and_grad(jnp.asarray(x))
            return float(val), np.asarray(grad)

        flat, loss = adam(fg, np.asarray(flat), cfg.init_adam_iters, cfg.init_adam_lr,
                          accept=lambda x: abs_det(x) >= MIN_SIGMA_DET, desc=f"init rho={rho:.0e}")
        flat, loss = lbfgs(fg, flat, cfg.init_lbfgs_iters, desc=f"init lbfgs rho={rho:.0e}")
        violation = float(jnp.max(rows(unravel(jnp.asarray(flat)))))
        logger.info("Initial RCI penalty rho=%.0e: loss %.6g, max violation %.3e", rho, loss, violation)
        rho *= cfg.rho_factor

    z = unravel(jnp.asarray(flat))
    sigma = np.asarray(z["sigma"])
    max_violation = float(jnp.max(rows(z)))
    if abs(np.linalg.det(sigma)) <= MIN_ABS_DET:
        raise NumericalError("initial RCI program returned a singular Sigma", abs_det=abs(np.linalg.det(sigma)))

    # shrink until the output rows hold exactly; dynamics rows are invariant to scaling
    X_v = corners @ sigma.T
    load = (X_v @ C.T) @ spec.Y.H.T
    slack = spec.Y.h - floor
    ratios = np.where(load > 0, slack / np.where(load > 0, load, 1.0), np.inf)
    sigma = sigma * min(1.0, float(ratios.min()))

    template = make_box_template(n_x, sigma)
    lti_m = lti_model(A, B, C)
    exact_spec = spec.with_template(template)
    sol = solve_r(lti_m, w, exact_spec, fixed_q=np.ones(template.f),
                  regularization=cfg.regularization, tol=cfg.qp_tol, max_iter=cfg.qp_max_iter)
    if not sol.optimal:
        raise InfeasibleError("initial RCI program did not reach a feasible point",
                              max_residual=max(max_violation, 0.0))
    residual = rci_residuals(lti_m, w, exact_spec, sol.q, sol.vertex_inputs).max()
    if residual > RESIDUAL_TOL:
        raise InfeasibleError(f"initial RCI set violates its conditions by {residual:.3e}", max_residual=residual)
    logger.info("Initial RCI set found: r_L = %.6g", sol.r_value)
    return InitialRci(sigma=sigma, template=template, solution=sol)
