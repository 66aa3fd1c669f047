"""Identification problems solved by single shooting.

Every loss is a jax function of a flat parameter vector, so reverse-mode
differentiation through the `lax.scan` time recursion gives the adjoint
gradient. Adam runs first, L-BFGS polishes, and group-Lasso groups are
driven to exact zeros by a short proximal-gradient pass before read-out.
"""
import logging
from dataclasses import dataclass
from typing import Optional

import jax
import jax.numpy as jnp
import numpy as np
from jax.flatten_util import ravel_pytree

from invariance.rci import RQpAssembler
from sysid import model as qlpv
from sysid.model import DisturbanceSet, QlpvModel, SchedulingNet, lti_model
from sysid.optim import adam, lbfgs
from utils.errors import InfeasibleError, NumericalError

logger = logging.getLogger(__name__)


@dataclass
class LossReport:
    total: float
    mse: float
    reg_groups: float = 0.0
    rci_penalty: float = 0.0
    r_value: float = float("nan")
    bfr_train: Optional[float] = None
    bfr_test: Optional[float] = None

    def as_row(self):
        return {"total": self.total, "mse": self.mse, "reg_groups": self.reg_groups,
                "rci_penalty": self.rci_penalty, "r_value": self.r_value}


def smooth_group_norm(g, delta):
    return jnp.sqrt(jnp.sum(g ** 2) + delta ** 2) - delta


def lti_groups(params):
    """Group i: row i and column i of A, row i of B, column i of C."""
    A, B, C = params["A"], params["B"], params["C"]
    return [jnp.concatenate((A[i], A[:, i], B[i], C[:, i])) for i in range(A.shape[0])]


def scheduling_groups(params):
    """Group i: the last-layer weights W_Li of scheduling branch i."""
    W_L = params["net"]["W_L"]
    return [W_L[i] for i in range(W_L.shape[0])]


def _group_indices(unravel, size, group_fn):
    positions = unravel(jnp.arange(size, dtype=float))
    return [np.unique(np.asarray(g).astype(int)) for g in group_fn(positions)]


def group_soft_threshold(x, groups, threshold):
    """Block soft-thresholding, one group at a time (exact for disjoint groups)."""
    x = np.array(x, dtype=float)
    for idx in groups:
        norm = np.linalg.norm(x[idx])
        x[idx] = 0.0 if norm <= threshold else x[idx] * (1.0 - threshold / norm)
    return x


def prox_polish(value_and_grad, x, groups, lam, iters, step=1.0):
    """Proximal gradient with backtracking on the smooth part of the loss."""
    x = np.asarray(x, dtype=float)
    if lam <= 0 or iters <= 0 or not groups:
        return x
    f, g = value_and_grad(x)
    for _ in range(iters):
        while True:
            z = group_soft_threshold(x - step * g, groups, step * lam)
            fz, gz = value_and_grad(z)
            d = z - x
            if np.isfinite(fz) and fz <= f + g @ d + d @ d / (2 * step) + 1e-15:
                break
            step *= 0.5
            if step < 1e-14:
                return x
        x, f, g = z, fz, gz
    return x


def _numpy_value_and_grad(fn):
    jitted = jax.jit(jax.value_and_grad(fn))

    def value_and_grad(x):
        value, grad = jitted(jnp.asarray(x))
        return float(value), np.asarray(grad)

    return value_and_grad


def _minimize(value_and_grad, x0, cfg, desc, log=None, report=None):
    def callback(optimizer):
        if log is None or report is None:
            return None
        return lambda it, x: log.record(it, optimizer, report(x))

    x, loss = adam(value_and_grad, x0, cfg.adam_iters, cfg.adam_lr, desc=f"{desc} adam",
                   callback=callback("adam"), log_every=cfg.log_every)
    x, loss = lbfgs(value_and_grad, x, cfg.lbfgs_iters, desc=f"{desc} lbfgs",
                    callback=callback("lbfgs"), log_every=cfg.log_every)
    return x, loss


def _mse(Y, Y_hat):
    return jnp.mean(jnp.sum((Y - Y_hat) ** 2, axis=1))


def adjoint_gradient(m, data, mode="prediction"):
    """Gradient of the output MSE w.r.t. every model parameter (reverse sweep through time)."""
    qlpv.simulate(m, data, mode)
    U, Y = jnp.asarray(data.u), jnp.asarray(data.y)
    uses_input = m.net.uses_input

    def mse(p):
        if mode == "prediction":
            X = qlpv.rollout(p, U, p["x0"], uses_input)
        else:
            X = qlpv.observer_rollout(p, U, Y, uses_input)
        return _mse(Y, X @ p["C"].T)

    grad = jax.grad(mse)(m.params)
    flat = np.asarray(ravel_pytree(grad)[0])
    if not np.all(np.isfinite(flat)):
        raise NumericalError(f"non-finite adjoint in {mode} mode")
    return jax.tree_util.tree_map(np.asarray, grad)


@dataclass
class LtiFit:
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    group_norms: np.ndarray
    report: LossReport

    @property
    def n_x(self):
        return self.A.shape[0]

    def model(self, n_p=1):
        return lti_model(self.A, self.B, self.C, n_p=n_p)


def fit_lti(data, nx_hat, cfg, seed=0, log=None):
    """Group-Lasso LTI fit from x_0 = 0; states whose group vanishes are pruned."""
    if nx_hat < 1:
        raise ValueError(f"nx_hat must be >= 1, got {nx_hat}")
    rng = np.random.default_rng(seed)
    n_u, n_y = data.n_u, data.n_y
    init = {
        "A": 0.5 * np.eye(nx_hat) + 0.1 * rng.standard_normal((nx_hat, nx_hat)) / np.sqrt(nx_hat),
        "B": 0.1 * rng.standard_normal((nx_hat, n_u)),
        "C": 0.1 * rng.standard_normal((n_y, nx_hat)),
    }
    flat0, unravel = ravel_pytree({k: jnp.asarray(v) for k, v in init.items()})
    U, Y = jnp.asarray(data.u), jnp.asarray(data.y)

    def mse(p):
        def body(x, u):
            return p["A"] @ x + p["B"] @ u, x

        X = jax.lax.scan(body, jnp.zeros(nx_hat), U)[1]
        return _mse(Y, X @ p["C"].T)

    def loss(x):
        p = unravel(x)
        reg = sum(smooth_group_norm(g, cfg.group_smoothing) for g in lti_groups(p))
        return mse(p) + cfg.kappa_x * reg

    def terms(x):
        p = unravel(jnp.asarray(x))
        e = float(mse(p))
        reg = cfg.kappa_x * float(sum(jnp.linalg.norm(g) for g in lti_groups(p)))
        return LossReport(total=e + reg, mse=e, reg_groups=reg)

    x, _ = _minimize(_numpy_value_and_grad(loss), np.asarray(flat0), cfg, "lti", log, terms)
    groups = _group_indices(unravel, flat0.size, lti_groups)
    x = prox_polish(_numpy_value_and_grad(lambda x: mse(unravel(x))), x, groups, cfg.kappa_x, cfg.prox_iters)

    p = {k: np.asarray(v) for k, v in unravel(jnp.asarray(x)).items()}
    norms = np.array([np.linalg.norm(np.asarray(g)) for g in lti_groups(p)])
    keep = np.flatnonzero(norms >= cfg.zero_group_threshold)
    if keep.size < nx_hat:
        logger.info("Pruned %d of %d LTI states (group norms below %.1e)", nx_hat - keep.size, nx_hat,
                    cfg.zero_group_threshold)
    A = p["A"][np.ix_(keep, keep)]
    B = p["B"][keep]
    C = p["C"][:, keep]
    report = terms(x)
    logger.info("LTI fit: n_x = %d, mse = %.6g", keep.size, report.mse)
    return LtiFit(A=A, B=B, C=C, group_norms=norms, report=report)


def lti_residuals(fit, data):
    """Prediction residuals y - C x of an LTI fit simulated from x_0 = 0."""
    if fit.n_x == 0:
        return data.y.copy()
    return data.y - qlpv.simulate(fit.model(), data).y


def _split(m):
    """Trainable pytree (K excluded) and the uses_input flag."""
    p = m.params
    return {"A": p["A"], "B": p["B"], "C": p["C"], "x0": p["x0"], "net": p["net"]}, m.net.uses_input


def _prune_groups(m, threshold):
    norms = m.net.group_norms()
    zero = norms < threshold
    if np.any(zero):
        W_L = m.net.W_L.copy()
        W_L[zero] = 0.0
        net = SchedulingNet(m.net.W_hidden, m.net.b_hidden, W_L, m.net.b_L, m.net.uses_input)
        m = m.replace(net=net)
    return m


def count_nonzero_groups(m, threshold=1e-6):
    return int(np.sum(m.net.group_norms() >= threshold))


def fit_qlpv(data, init, cfg, log=None):
    """qLPV prediction-error fit with group Lasso on the last scheduling layer."""
    trainable, uses_input = _split(init)
    flat0, unravel = ravel_pytree(trainable)
    U, Y = jnp.asarray(data.u), jnp.asarray(data.y)
    K = jnp.asarray(init.K)

    def mse(p):
        X = qlpv.rollout(p, U, p["x0"], uses_input)
        return _mse(Y, X @ p["C"].T)

    def loss(x):
        p = unravel(x)
        reg = sum(smooth_group_norm(g, cfg.group_smoothing) for g in scheduling_groups(p))
        return mse(p) + cfg.kappa_p * reg

    def terms(x):
        p = unravel(jnp.asarray(x))
        e = float(mse(p))
        reg = cfg.kappa_p * float(sum(jnp.linalg.norm(g) for g in scheduling_groups(p)))
        return LossReport(total=e + reg, mse=e, reg_groups=reg)

    x, _ = _minimize(_numpy_value_and_grad(loss), np.asarray(flat0), cfg, "qlpv", log, terms)
    groups = _group_indices(unravel, flat0.size, scheduling_groups)
    x = prox_polish(_numpy_value_and_grad(lambda x: mse(unravel(x))), x, groups, cfg.kappa_p, cfg.prox_iters)

    p = dict(unravel(jnp.asarray(x)))
    p["K"] = K
    m = _prune_groups(QlpvModel.from_params(p, uses_input), cfg.zero_group_threshold)
    report = terms(x)
    logger.info("qLPV fit: mse = %.6g, %d of %d scheduling groups nonzero", report.mse,
                count_nonzero_groups(m, cfg.zero_group_threshold), m.n_p - 1)
    return m, report


def initial_qlpv(lti, n_p, model_cfg, seed):
    """Replicated LTI matrices (A, B, C) with x_0 = 0, K = 0 and a seeded random scheduling net."""
    A, B, C = (np.atleast_2d(np.asarray(M, dtype=float)) for M in lti)
    rng = np.random.default_rng(seed)
    n_in = A.shape[0] + (B.shape[1] if model_cfg.schedule_on_input else 0)
    net = SchedulingNet.random(n_p, n_in, model_cfg.hidden_layers, model_cfg.units, rng, model_cfg.schedule_on_input)
    return lti_model(A, B, C, n_p=n_p, net=net)


def _rci_constraint_rows(p, vertex, Y_res, w, spec):
    """Stacked g <= 0 rows: residual bounds, invariance at q = 1, outputs and vertex inputs."""
    tpl = spec.template
    F = jnp.asarray(tpl.F)
    corners = jnp.asarray(np.einsum("kxf,f->kx", tpl.V, np.ones(tpl.f)))
    c_w = jnp.asarray(w.c_w, dtype=float).reshape(-1)
    eps_w = jnp.asarray(w.eps_w, dtype=float).reshape(-1)
    Hy, hy = jnp.asarray(spec.Y.H), jnp.asarray(spec.Y.h)
    Hu, hu = jnp.asarray(spec.U.H), jnp.asarray(spec.U.h)

    g_res = jnp.abs(Y_res - c_w) - eps_w
    nxt = jnp.einsum("ixy,ky->ikx", p["A"], corners) + jnp.einsum("ixu,ku->ikx", p["B"], vertex)
    g_ci = jnp.einsum("fx,ikx->ikf", F, nxt) - 1.0
    g_out = (corners @ p["C"].T + c_w) @ Hy.T + spec.kappa * (jnp.abs(Hy) @ eps_w) - hy
    g_vin = vertex @ Hu.T - hu
    return jnp.concatenate([g.ravel() for g in (g_res, g_ci, g_out, g_vin)])


def fit_qlpv_with_rci(data, init, vertex_inputs, w, spec, cfg, log=None):
    """qLPV fit that keeps X(1) = {x : F x <= 1} an RCI set, via squared-hinge penalties.

    `init` is the replicated LTI model; at that point every constraint row
    holds, so the penalty starts at zero.
    """
    trainable, uses_input = _split(init)
    trainable["vertex"] = jnp.asarray(vertex_inputs, dtype=float).reshape(spec.template.v, init.n_u)
    flat0, unravel = ravel_pytree(trainable)
    U, Y = jnp.asarray(data.u), jnp.asarray(data.y)

    def parts(x):
        p = unravel(x)
        X = qlpv.rollout(p, U, p["x0"], uses_input)
        Y_hat = X @ p["C"].T
        g = _rci_constraint_rows(p, p["vertex"], Y - Y_hat, w, spec)
        penalty = jnp.sum(jnp.maximum(g, 0.0) ** 2)
        return p, _mse(Y, Y_hat), penalty

    def loss(x):
        p, e, penalty = parts(x)
        reg = sum(smooth_group_norm(g, cfg.group_smoothing) for g in scheduling_groups(p))
        return e + cfg.kappa_p * reg + cfg.penalty_weight * penalty

    def smooth(x):
        _, e, penalty = parts(x)
        return e + cfg.penalty_weight * penalty

    def terms(x):
        p, e, penalty = parts(jnp.asarray(x))
        reg = cfg.kappa_p * float(sum(jnp.linalg.norm(g) for g in scheduling_groups(p)))
        pen = cfg.penalty_weight * float(penalty)
        return LossReport(total=float(e) + reg + pen, mse=float(e), reg_groups=reg, rci_penalty=pen)

    start = terms(flat0)
    if start.rci_penalty > 0:
        logger.warning("Constraint penalty is %.3e at the initial point", start.rci_penalty)
    x, _ = _minimize(_numpy_value_and_grad(loss), np.asarray(flat0), cfg, "qlpv-rci", log, terms)
    groups = _group_indices(unravel, flat0.size, scheduling_groups)
    x = prox_polish(_numpy_value_and_grad(smooth), x, groups, cfg.kappa_p, cfg.prox_iters)

    p = dict(unravel(jnp.asarray(x)))
    vertex = np.asarray(p.pop("vertex"))
    p["K"] = jnp.zeros_like(jnp.asarray(init.K))
    m = _prune_groups(QlpvModel.from_params(p, uses_input), cfg.zero_group_threshold)
    report = terms(x)
    logger.info("qLPV fit with RCI constraints: mse = %.6g, penalty = %.3e", report.mse, report.rci_penalty)
    return m, vertex, report


def prediction_disturbance(m, data, kappa):
    """Disturbance set bounding the prediction residuals y - C x."""
    return qlpv.estimate_disturbance(data.y - qlpv.simulate(m, data).y, kappa)


def fit_concurrent(data, init, spec, cfg, log=None, regularization=1e-9, qp_tol=1e-8, qp_max_iter=100):
    """Prediction MSE plus tau times the RCI size r, with W from observer residuals.

    Steps where the size QP is infeasible are rejected by the optimizer.
    """
    trainable, uses_input = _split(init)
    trainable["K"] = jnp.asarray(init.K)
    flat0, unravel = ravel_pytree(trainable)
    U, Y = jnp.asarray(data.u), jnp.asarray(data.y)
    assembler = RQpAssembler.for_model(init, spec, regularization)
    kappa = spec.kappa

    def mse(p):
        X = qlpv.rollout(p, U, p["x0"], uses_input)
        return _mse(Y, X @ p["C"].T)

    def reg(p):
        return sum(smooth_group_norm(g, cfg.group_smoothing) for g in scheduling_groups(p))

    def smooth_loss(x):
        p = unravel(x)
        return mse(p) + cfg.kappa_p * reg(p)

    def theta_r(x):
        p = unravel(x)
        Z = qlpv.observer_rollout(p, U, Y, uses_input)
        c_w, eps_w = qlpv.disturbance_bounds(Y - Z @ p["C"].T)
        return {"A": p["A"], "B": p["B"], "K": p["K"], "C": p["C"], "c_w": c_w, "eps_w": eps_w}

    smooth_vg = jax.jit(jax.value_and_grad(smooth_loss))
    theta_jit = jax.jit(theta_r)

    def to_model(x):
        return QlpvModel.from_params(dict(unravel(jnp.asarray(x))), uses_input)

    def size(x):
        theta = theta_jit(jnp.asarray(x))
        w = DisturbanceSet(c_w=np.asarray(theta["c_w"]), eps_w=np.maximum(np.asarray(theta["eps_w"]), 0.0),
                           kappa=kappa)
        sol = assembler.solve(to_model(x), w, tol=qp_tol, max_iter=qp_max_iter)
        return theta, w, sol

    def value_and_grad(x):
        value, grad = smooth_vg(jnp.asarray(x))
        value, grad = float(value), np.asarray(grad)
        if cfg.tau == 0:
            return value, grad
        theta, _, sol = size(x)
        if not sol.optimal:
            return np.inf, np.zeros_like(grad)
        g_theta = assembler.gradient(theta, sol, check=False)
        _, pullback = jax.vjp(theta_r, jnp.asarray(x))
        g_r = np.asarray(pullback(g_theta)[0])
        return value + cfg.tau * sol.r_value, grad + cfg.tau * g_r

    def terms(x):
        p = unravel(jnp.asarray(x))
        e = float(mse(p))
        reg_value = cfg.kappa_p * float(sum(jnp.linalg.norm(g) for g in scheduling_groups(p)))
        r = size(x)[2].r_value
        total = e + reg_value + (cfg.tau * r if cfg.tau else 0.0)
        return LossReport(total=total, mse=e, reg_groups=reg_value, r_value=r)

    _, _, sol0 = size(flat0)
    if not sol0.optimal:
        raise InfeasibleError("size QP is infeasible at the initial model; run the RCI stages first",
                              status=sol0.status.value)
    logger.info("Concurrent fit (tau = %.3g): initial r = %.6g", cfg.tau, sol0.r_value)

    x, _ = _minimize(value_and_grad, np.asarray(flat0), cfg, f"concurrent tau={cfg.tau:g}", log, terms)
    m = _prune_groups(to_model(x), cfg.zero_group_threshold)
    report = terms(x)
    w = qlpv.estimate_disturbance(qlpv.observer_residuals(m, data), kappa)
    logger.info("Concurrent fit done: mse = %.6g, r = %.6g", report.mse, report.r_value)
    return m, w, report
