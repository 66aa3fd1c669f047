"""Scheduling-order reduction of an identified qLPV model.

Branches whose last-layer weights vanished have a constant logit and are
lumped exactly into the terminal branch. Further reduction keeps the best
subset of branches, refits the vertex matrices and last-layer biases by a
convex QP that preserves control invariance of X(q), and refits C with the
disturbance box by an LP.
"""
import itertools
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Tuple

import jax
import jax.numpy as jnp
import numpy as np

from invariance import conic_qp
from sysid import model as qlpv
from sysid.model import DisturbanceSet, SchedulingNet
from utils.errors import ConfigError, DimensionError, NumericalError

logger = logging.getLogger(__name__)

B_FLOOR = 1e-6


def lump_constant_branches(m, threshold=1e-6):
    """Fold every branch with W_Li = 0 into the terminal one; input-output behavior is unchanged."""
    norms = m.net.group_norms()
    constant = np.flatnonzero(norms < threshold)
    if constant.size == 0:
        logger.warning("No constant scheduling branches; lumping leaves the model unchanged")
        return m
    keep = np.flatnonzero(norms >= threshold)
    weights = np.exp(m.net.b_L[constant])
    beta = 1.0 + weights.sum()
    A_term = (np.tensordot(weights, m.A[constant], axes=1) + m.A[-1]) / beta
    B_term = (np.tensordot(weights, m.B[constant], axes=1) + m.B[-1]) / beta
    K_term = (np.tensordot(weights, m.K[constant], axes=1) + m.K[-1]) / beta
    net = SchedulingNet(
        W_hidden=[W[keep] for W in m.net.W_hidden],
        b_hidden=[b[keep] for b in m.net.b_hidden],
        W_L=m.net.W_L[keep],
        b_L=m.net.b_L[keep] - np.log(beta),
        uses_input=m.net.uses_input,
    )
    logger.info("Lumped %d constant branches (beta = %.6g); n_p %d -> %d", constant.size, beta, m.n_p, keep.size + 1)
    return m.replace(
        A=np.concatenate((m.A[keep], A_term[None])),
        B=np.concatenate((m.B[keep], B_term[None])),
        K=np.concatenate((m.K[keep], K_term[None])),
        net=net,
    )


def branch_factors(m, data):
    """f_it = exp(N_i(x_t, u_t) - b_Li) along the model's own prediction from x_0."""
    states = qlpv.simulate(m, data).x
    net_params = m.net.params
    logits = jax.vmap(lambda x, u: qlpv._forward_net(net_params, x, u, m.net.uses_input))(
        jnp.asarray(states), jnp.asarray(data.u))
    return np.exp(np.asarray(logits) - m.net.b_L)


@dataclass
class ReductionPlan:
    indices: Tuple[int, ...]
    factors: np.ndarray
    score: float
    candidates: int

    @property
    def n_p(self):
        return len(self.indices) + 1


def _restricted_mse(m, data, indices):
    y_hat = qlpv.simulate_restricted(m, data, indices).y
    return float(np.mean(np.sum((data.y - y_hat) ** 2, axis=1)))


def select_indices(m, data, target_np, max_combinations=1_000_000, workers=1):
    """Retained branch set with the lowest restricted-simulation MSE; ties go to the first set."""
    n_branch = m.n_p - 1
    if not 1 <= target_np <= m.n_p:
        raise ConfigError(f"target n_p must lie in [1, {m.n_p}], got {target_np}")
    count = math.comb(n_branch, target_np - 1)
    if count > max_combinations:
        raise ConfigError(f"{count} candidate index sets exceed the limit of {max_combinations}; "
                          "lump constant branches first or raise reduce.max_combinations")
    candidates = list(itertools.combinations(range(n_branch), target_np - 1))
    logger.info("Scoring %d candidate index sets for n_p = %d", count, target_np)
    if workers > 1 and count > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            scores = list(pool.map(lambda idx: _restricted_mse(m, data, idx), candidates))
    else:
        scores = [_restricted_mse(m, data, idx) for idx in candidates]
    best = int(np.argmin(scores))
    factors = branch_factors(m, data)
    logger.info("Selected branches %s (mse %.6g)", candidates[best], scores[best])
    return ReductionPlan(indices=candidates[best], factors=factors, score=scores[best],
                         candidates=count)


@dataclass
class ReducedMatrices:
    b_L: np.ndarray
    A: np.ndarray
    B: np.ndarray
    qp_objective: float
    fractional_objective: float


def _vertex_data(m, plan):
    """Full-order scheduled matrices M_t = sum_i p_i(x_t, u_t) [A_i B_i], row-major flattened."""
    e = np.hstack((plan.factors * np.exp(m.net.b_L), np.ones((plan.factors.shape[0], 1))))
    p = e / e.sum(axis=1, keepdims=True)
    S = np.concatenate((m.A, m.B), axis=2).reshape(m.n_p, -1)
    return p @ S


def _fractional_objective(plan, M, b, S):
    w = np.hstack((plan.factors[:, list(plan.indices)], np.ones((M.shape[0], 1))))
    b_all = np.append(b, 1.0)
    denom = w @ b_all
    M_tilde = (w @ S) / denom[:, None]
    return float(np.mean(np.sum((M - M_tilde) ** 2, axis=1)))


def reduce_matrices(plan, m, q, vertex_inputs, template, enforce_invariance=True, regularization=1e-9):
    """Convex refit of (b_L, A, B) for the retained branches keeping X(q) control invariant.

    Variables are bb_k = exp(b_Lk) and S_k = bb_k [A_k B_k]; the terminal
    branch has bb = 1.
    """
    n_x, n_u = m.n_x, m.n_u
    k_red = plan.n_p
    d = n_x * (n_x + n_u)
    n_b = k_red - 1
    n = n_b + k_red * d
    M = _vertex_data(m, plan)
    N = M.shape[0]
    w = plan.factors[:, list(plan.indices)]
    fk = np.hstack((w, np.ones((N, 1))))
    mm = np.sum(M ** 2, axis=1)

    # residual_t = sum_j w_j bb_j M_t + M_t - sum_k fk_k S_k
    P = np.zeros((n, n))
    c = np.zeros(n)
    P[:n_b, :n_b] = np.einsum("tj,tl,t->jl", w, w, mm)
    c[:n_b] = np.einsum("tj,t->j", w, mm)
    cross = -np.einsum("tj,tk,td->jkd", w, fk, M)
    P_ss = np.einsum("tk,tl->kl", fk, fk)
    c_s = -np.einsum("tk,td->kd", fk, M)
    for k in range(k_red):
        sk = slice(n_b + k * d, n_b + (k + 1) * d)
        P[:n_b, sk] = cross[:, k]
        P[sk, :n_b] = cross[:, k].T
        c[sk] = c_s[k]
        for l in range(k_red):
            P[sk, n_b + l * d:n_b + (l + 1) * d] = P_ss[k, l] * np.eye(d)
    P = 2.0 * P / N + regularization * np.eye(n)
    c = 2.0 * c / N
    constant = float(mm.sum() / N)

    G_rows = [np.hstack((-np.eye(n_b), np.zeros((n_b, k_red * d))))]
    h_rows = [-B_FLOOR * np.ones(n_b)]
    if enforce_invariance:
        q = np.asarray(q, dtype=float)
        F = template.F
        corners = np.einsum("kxf,f->kx", template.V, q)
        vertex_inputs = np.asarray(vertex_inputs, dtype=float).reshape(template.v, n_u)
        for k in range(k_red):
            for j in range(template.v):
                xi = np.concatenate((corners[j], vertex_inputs[j]))
                row = np.zeros((template.f, n))
                row[:, n_b + k * d:n_b + (k + 1) * d] = F @ np.kron(np.eye(n_x), xi[None, :])
                if k < n_b:
                    row[:, k] = -q
                    h = np.zeros(template.f)
                else:
                    h = q.copy()
                G_rows.append(row)
                h_rows.append(h)
    problem = conic_qp.QpProblem(P=P, c=c, G=np.vstack(G_rows), h=np.concatenate(h_rows), constant=constant)
    sol = conic_qp.solve(problem)
    if not sol.optimal:
        raise NumericalError(f"reduction QP ended with status {sol.status.value}", status=sol.status.value)

    b = sol.x[:n_b]
    S = sol.x[n_b:].reshape(k_red, d)
    scale = np.append(b, 1.0)
    AB = (S / scale[:, None]).reshape(k_red, n_x, n_x + n_u)
    fractional = _fractional_objective(plan, M, b, S)
    logger.info("Reduction QP: bound %.6g, fractional objective %.6g", sol.objective, fractional)
    return ReducedMatrices(b_L=np.log(b), A=AB[:, :, :n_x], B=AB[:, :, n_x:], qp_objective=float(sol.objective),
                           fractional_objective=fractional)


def reduced_model(plan, m, reduced):
    """qLPV model with the retained networks, refitted biases and vertex matrices."""
    idx = list(plan.indices)
    net = SchedulingNet(
        W_hidden=[W[idx] for W in m.net.W_hidden],
        b_hidden=[b[idx] for b in m.net.b_hidden],
        W_L=m.net.W_L[idx],
        b_L=np.asarray(reduced.b_L, dtype=float),
        uses_input=m.net.uses_input,
    )
    K = np.concatenate((m.K[idx], m.K[-1:]))
    return m.replace(A=reduced.A, B=reduced.B, K=K, net=net)


@dataclass
class OutputRefit:
    C: np.ndarray
    disturbance: DisturbanceSet


def refit_output_map(m, data, kappa, x_init=None, fixed_C=None, tol=1e-8):
    """(C, c_w, eps_w) minimizing ||eps_w||_1 with |y_t - C x_t - c_w| <= eps_w along the reduced sequence."""
    states = qlpv.simulate(m, data, x_init=x_init).x
    Y = data.y
    n_y, n_x = Y.shape[1], states.shape[1]
    if fixed_C is not None:
        C = np.atleast_2d(np.asarray(fixed_C, dtype=float))
        if C.shape != (n_y, n_x):
            raise DimensionError(f"fixed C has shape {C.shape}, expected {(n_y, n_x)}")
        res = Y - states @ C.T
        c_w = 0.5 * (res.max(axis=0) + res.min(axis=0))
        eps_w = 0.5 * (res.max(axis=0) - res.min(axis=0))
        return OutputRefit(C=C, disturbance=DisturbanceSet(c_w=c_w, eps_w=eps_w, kappa=kappa))

    # variables [C row-major, c_w, eps_w]
    n_c = n_y * n_x
    n = n_c + 2 * n_y
    G_rows, h_rows = [], []
    for i in range(n_y):
        Xc = np.zeros((len(Y), n))
        Xc[:, i * n_x:(i + 1) * n_x] = states
        Xc[:, n_c + i] = 1.0
        E = np.zeros((len(Y), n))
        E[:, n_c + n_y + i] = 1.0
        G_rows += [-Xc - E, Xc - E]
        h_rows += [-Y[:, i], Y[:, i]]
    cost = np.concatenate((np.zeros(n_c + n_y), np.ones(n_y)))
    sol = conic_qp.solve_lp(cost, G=np.vstack(G_rows), h=np.concatenate(h_rows), tol=tol)
    if not sol.optimal:
        raise NumericalError(f"output refit LP ended with status {sol.status.value}", status=sol.status.value)
    C = sol.x[:n_c].reshape(n_y, n_x)
    res = Y - states @ C.T
    c_w = 0.5 * (res.max(axis=0) + res.min(axis=0))
    eps_w = 0.5 * (res.max(axis=0) - res.min(axis=0))
    logger.info("Output map refit: ||eps_w||_1 = %.6g", float(eps_w.sum()))
    return OutputRefit(C=C, disturbance=DisturbanceSet(c_w=c_w, eps_w=eps_w, kappa=kappa))
