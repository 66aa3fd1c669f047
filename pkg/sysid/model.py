"""qLPV model with a softmax scheduling network.

State update x+ = A(p) x + B(p) u with A(p) = sum_i p_i A_i and p the softmax of
n_p - 1 network outputs plus a constant zero logit. The observer variant adds
K(p) (y - C x). All model arithmetic is written against `jax.numpy` so the
same functions serve simulation and reverse-mode training.
"""
import logging
from dataclasses import dataclass
from functools import partial
from typing import List, Optional

import jax
import jax.numpy as jnp
import numpy as np

from utils.errors import ConfigError, DimensionError, NumericalError

logger = logging.getLogger(__name__)


@dataclass
class SchedulingNet:
    """Per-branch swish MLPs; layer weights are stacked over the n_p - 1 branches."""

    W_hidden: List[np.ndarray]
    b_hidden: List[np.ndarray]
    W_L: np.ndarray
    b_L: np.ndarray
    uses_input: bool = True

    @property
    def n_p(self):
        return self.W_L.shape[0] + 1

    @property
    def params(self):
        return {
            "W": [jnp.asarray(W) for W in self.W_hidden],
            "b": [jnp.asarray(b) for b in self.b_hidden],
            "W_L": jnp.asarray(self.W_L),
            "b_L": jnp.asarray(self.b_L),
        }

    @classmethod
    def from_params(cls, params, uses_input):
        return cls(
            W_hidden=[np.asarray(W, dtype=float) for W in params["W"]],
            b_hidden=[np.asarray(b, dtype=float) for b in params["b"]],
            W_L=np.asarray(params["W_L"], dtype=float),
            b_L=np.asarray(params["b_L"], dtype=float),
            uses_input=uses_input,
        )

    @classmethod
    def random(cls, n_p, n_in, hidden_layers, units, rng, uses_input=True):
        W_hidden, b_hidden = [], []
        width = n_in
        for _ in range(hidden_layers):
            W_hidden.append(rng.normal(size=(n_p - 1, units, width)) / np.sqrt(width))
            b_hidden.append(np.zeros((n_p - 1, units)))
            width = units
        W_L = rng.normal(size=(n_p - 1, width)) / np.sqrt(width)
        return cls(W_hidden, b_hidden, W_L, np.zeros(n_p - 1), uses_input)

    def group_norms(self):
        """Euclidean norm of each last-layer weight row W_Li."""
        return np.linalg.norm(self.W_L, axis=1)

    def to_dict(self):
        return {
            "uses_input": self.uses_input,
            "W_hidden": [W.tolist() for W in self.W_hidden],
            "b_hidden": [b.tolist() for b in self.b_hidden],
            "W_L": self.W_L.tolist(),
            "b_L": self.b_L.tolist(),
            "dims": {"n_p": self.n_p, "width": self.W_L.shape[1],
                     "layers": [list(W.shape) for W in self.W_hidden]},
        }

    @classmethod
    def from_dict(cls, data):
        n_p, width = data["dims"]["n_p"], data["dims"]["width"]
        shapes = data["dims"]["layers"]
        W_hidden = [np.asarray(W, dtype=float).reshape(s) for W, s in zip(data["W_hidden"], shapes)]
        b_hidden = [np.asarray(b, dtype=float).reshape(s[:2]) for b, s in zip(data["b_hidden"], shapes)]
        return cls(
            W_hidden=W_hidden,
            b_hidden=b_hidden,
            W_L=np.asarray(data["W_L"], dtype=float).reshape(n_p - 1, width),
            b_L=np.asarray(data["b_L"], dtype=float).reshape(n_p - 1),
            uses_input=bool(data["uses_input"]),
        )


@dataclass
class QlpvModel:
    A: np.ndarray
    B: np.ndarray
    K: np.ndarray
    C: np.ndarray
    net: SchedulingNet
    x0: np.ndarray

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=float)
        self.B = np.asarray(self.B, dtype=float)
        self.K = np.asarray(self.K, dtype=float)
        self.C = np.atleast_2d(np.asarray(self.C, dtype=float))
        self.x0 = np.asarray(self.x0, dtype=float).reshape(-1)
        n_p, n_x = self.A.shape[0], self.A.shape[1]
        if self.A.shape != (n_p, n_x, n_x):
            raise DimensionError(f"A has shape {self.A.shape}, expected ({n_p}, {n_x}, {n_x})")
        if self.B.shape[:2] != (n_p, n_x) or self.K.shape[:2] != (n_p, n_x):
            raise DimensionError(f"B {self.B.shape} / K {self.K.shape} do not match A {self.A.shape}")
        if self.C.shape[1] != n_x or self.K.shape[2] != self.C.shape[0]:
            raise DimensionError(f"C {self.C.shape} does not match n_x={n_x}, K {self.K.shape}")
        if self.net.n_p != n_p:
            raise DimensionError(f"scheduling net has {self.net.n_p} branches, model has {n_p}")
        if self.x0.shape != (n_x,):
            raise DimensionError(f"x0 has shape {self.x0.shape}, expected ({n_x},)")

    @property
    def n_x(self):
        return self.A.shape[1]

    @property
    def n_u(self):
        return self.B.shape[2]

    @property
    def n_y(self):
        return self.C.shape[0]

    @property
    def n_p(self):
        return self.A.shape[0]

    @property
    def params(self):
        """jax pytree of every trainable array."""
        return {
            "A": jnp.asarray(self.A),
            "B": jnp.asarray(self.B),
            "K": jnp.asarray(self.K),
            "C": jnp.asarray(self.C),
            "x0": jnp.asarray(self.x0),
            "net": self.net.params,
        }

    @classmethod
    def from_params(cls, params, uses_input):
        return cls(
            A=np.asarray(params["A"]),
            B=np.asarray(params["B"]),
            K=np.asarray(params["K"]),
            C=np.asarray(params["C"]),
            net=SchedulingNet.from_params(params["net"], uses_input),
            x0=np.asarray(params["x0"]),
        )

    def replace(self, **changes):
        data = {"A": self.A, "B": self.B, "K": self.K, "C": self.C, "net": self.net, "x0": self.x0}
        data.update(changes)
        return QlpvModel(**data)

    def to_dict(self):
        return {
            "dims": {"n_x": self.n_x, "n_u": self.n_u, "n_y": self.n_y, "n_p": self.n_p},
            "A": self.A.tolist(),
            "B": self.B.tolist(),
            "K": self.K.tolist(),
            "C": self.C.tolist(),
            "x0": self.x0.tolist(),
            "net": self.net.to_dict(),
        }

    @classmethod
    def from_dict(cls, data):
        d = data["dims"]
        n_p, n_x, n_u, n_y = d["n_p"], d["n_x"], d["n_u"], d["n_y"]
        return cls(
            A=np.asarray(data["A"], dtype=float).reshape(n_p, n_x, n_x),
            B=np.asarray(data["B"], dtype=float).reshape(n_p, n_x, n_u),
            K=np.asarray(data["K"], dtype=float).reshape(n_p, n_x, n_y),
            C=np.asarray(data["C"], dtype=float).reshape(n_y, n_x),
            net=SchedulingNet.from_dict(data["net"]),
            x0=np.asarray(data["x0"], dtype=float).reshape(n_x),
        )


def lti_model(A, B, C, n_p=1, net=None, K=None, x0=None):
    """Replicate one LTI triple over n_p vertices."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float).reshape(A.shape[0], -1)
    C = np.asarray(C, dtype=float).reshape(-1, A.shape[0])
    if net is None:
        net = SchedulingNet([], [], np.zeros((n_p - 1, A.shape[0] + B.shape[1])), np.zeros(n_p - 1))
    K = np.zeros((n_p, A.shape[0], C.shape[0])) if K is None else K
    x0 = np.zeros(A.shape[0]) if x0 is None else x0
    return QlpvModel(A=np.repeat(A[None], n_p, axis=0), B=np.repeat(B[None], n_p, axis=0),
                     K=K, C=C, net=net, x0=x0)


@dataclass(frozen=True)
class DisturbanceSet:
    c_w: np.ndarray
    eps_w: np.ndarray
    kappa: float

    def __post_init__(self):
        if np.any(np.asarray(self.eps_w) < 0):
            raise ConfigError(f"eps_w must be nonnegative, got {self.eps_w}")
        if not self.kappa > 1.0:
            raise ConfigError(f"kappa must be > 1, got {self.kappa}")

    def to_dict(self):
        return {"c_w": np.asarray(self.c_w).tolist(), "eps_w": np.asarray(self.eps_w).tolist(), "kappa": self.kappa}

    @classmethod
    def from_dict(cls, data):
        return cls(c_w=np.asarray(data["c_w"], dtype=float), eps_w=np.asarray(data["eps_w"], dtype=float),
                   kappa=float(data["kappa"]))


@dataclass(frozen=True)
class Scaler:
    u_mean: np.ndarray
    u_std: np.ndarray
    y_mean: np.ndarray
    y_std: np.ndarray

    @classmethod
    def fit(cls, u, y):
        u, y = np.atleast_2d(u), np.atleast_2d(y)
        u_std, y_std = u.std(axis=0), y.std(axis=0)
        for name, std in (("u", u_std), ("y", y_std)):
            if np.any(std <= 0):
                raise ConfigError(f"degenerate {name} channel(s) {np.flatnonzero(std <= 0).tolist()} have zero variance")
        return cls(u.mean(axis=0), u_std, y.mean(axis=0), y_std)

    @classmethod
    def identity(cls, n_u, n_y):
        return cls(np.zeros(n_u), np.ones(n_u), np.zeros(n_y), np.ones(n_y))

    def scale_u(self, u):
        return (u - self.u_mean) / self.u_std

    def scale_y(self, y):
        return (y - self.y_mean) / self.y_std

    def unscale_u(self, u):
        return u * self.u_std + self.u_mean

    def unscale_y(self, y):
        return y * self.y_std + self.y_mean

    def to_dict(self):
        return {k: np.asarray(getattr(self, k)).tolist() for k in ("u_mean", "u_std", "y_mean", "y_std")}

    @classmethod
    def from_dict(cls, data):
        return cls(**{k: np.asarray(data[k], dtype=float) for k in ("u_mean", "u_std", "y_mean", "y_std")})


@dataclass
class Dataset:
    """Input/output sequences. `scaler` is set when u and y are in scaled units."""

    u: np.ndarray
    y: np.ndarray
    t: Optional[np.ndarray] = None
    scaler: Optional[Scaler] = None

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        if self.u.ndim == 1:
            self.u = self.u[:, None]
        if self.y.ndim == 1:
            self.y = self.y[:, None]
        if self.u.shape[0] != self.y.shape[0]:
            raise DimensionError(f"u has {self.u.shape[0]} samples but y has {self.y.shape[0]}")
        if self.u.shape[0] == 0:
            raise DimensionError("dataset is empty")
        if self.t is None:
            self.t = np.arange(self.u.shape[0], dtype=float)

    @property
    def n(self):
        return self.u.shape[0]

    @property
    def n_u(self):
        return self.u.shape[1]

    @property
    def n_y(self):
        return self.y.shape[1]

    def scale(self, scaler):
        if self.scaler is not None:
            return self
        return Dataset(scaler.scale_u(self.u), scaler.scale_y(self.y), self.t, scaler)

    def physical(self):
        if self.scaler is None:
            return self
        return Dataset(self.scaler.unscale_u(self.u), self.scaler.unscale_y(self.y), self.t, None)

    def head(self, n):
        return Dataset(self.u[:n], self.y[:n], self.t[:n], self.scaler)


# jax kernels: `params` is the pytree from QlpvModel.params


def _forward_net(net_params, x, u, uses_input):
    z = jnp.concatenate((x, u)) if uses_input else x
    n_branch = net_params["W_L"].shape[0]
    h = jnp.broadcast_to(z, (n_branch, z.shape[0]))
    for W, b in zip(net_params["W"], net_params["b"]):
        h = jax.nn.swish(jnp.einsum("kui,ki->ku", W, h) + b)
    return jnp.sum(net_params["W_L"] * h, axis=1) + net_params["b_L"]


def schedule_from_logits(logits):
    return jax.nn.softmax(jnp.concatenate((logits, jnp.zeros(1))))


def schedule_params(net_params, x, u, uses_input):
    return schedule_from_logits(_forward_net(net_params, x, u, uses_input))


def _mix(p, M):
    return jnp.tensordot(p, M, axes=1)


def step_params(params, x, u, uses_input):
    p = schedule_params(params["net"], x, u, uses_input)
    return _mix(p, params["A"]) @ x + _mix(p, params["B"]) @ u


def observer_step_params(params, z, u, y, uses_input):
    p = schedule_params(params["net"], z, u, uses_input)
    innovation = y - params["C"] @ z
    return _mix(p, params["A"]) @ z + _mix(p, params["B"]) @ u + _mix(p, params["K"]) @ innovation


@partial(jax.jit, static_argnums=(3,))
def rollout(params, U, x_init, uses_input):
    """States x_0..x_{N-1} from x_init under inputs U."""

    def body(x, u):
        return step_params(params, x, u, uses_input), x

    return jax.lax.scan(body, x_init, U)[1]


@partial(jax.jit, static_argnums=(3,))
def observer_rollout(params, U, Y, uses_input):
    """Observer states z_0..z_{N-1} from z_0 = 0."""

    def body(z, uy):
        u, y = uy
        return observer_step_params(params, z, u, y, uses_input), z

    z0 = jnp.zeros(params["A"].shape[1])
    return jax.lax.scan(body, z0, (U, Y))[1]


@partial(jax.jit, static_argnums=(4,))
def restricted_rollout(params, U, x_init, mask, uses_input):
    """Rollout where only branches with mask == 1 keep their exponential term."""

    def body(x, u):
        logits = _forward_net(params["net"], x, u, uses_input)
        logits = jnp.where(mask > 0, logits, -jnp.inf)
        p = schedule_from_logits(logits)
        return _mix(p, params["A"]) @ x + _mix(p, params["B"]) @ u, x

    return jax.lax.scan(body, x_init, U)[1]


def disturbance_bounds(residuals):
    """(center, half-width) of the residual box; max/min picked at the first attained index."""
    n_y = residuals.shape[1]
    cols = jnp.arange(n_y)
    r_max = residuals[jnp.argmax(residuals, axis=0), cols]
    r_min = residuals[jnp.argmin(residuals, axis=0), cols]
    return 0.5 * (r_max + r_min), 0.5 * (r_max - r_min)


def _first_nonfinite(states):
    bad = ~np.all(np.isfinite(states), axis=1)
    return int(np.argmax(bad)) if bad.any() else None


# numpy-facing operations


def schedule(net, x, u):
    p = np.asarray(schedule_params(net.params, jnp.asarray(x, dtype=float),
                                   jnp.asarray(u, dtype=float), net.uses_input))
    if not np.all(np.isfinite(p)):
        raise NumericalError("scheduling network produced non-finite activations")
    return p


def step(m, x, u):
    x_next = np.asarray(step_params(m.params, jnp.asarray(x, dtype=float), jnp.asarray(u, dtype=float),
                                    m.net.uses_input))
    if not np.all(np.isfinite(x_next)):
        raise NumericalError("non-finite state after model step")
    return x_next


def step_observer(m, z, u, y):
    z_next = np.asarray(observer_step_params(m.params, jnp.asarray(z, dtype=float), jnp.asarray(u, dtype=float),
                                             jnp.asarray(y, dtype=float), m.net.uses_input))
    if not np.all(np.isfinite(z_next)):
        raise NumericalError("non-finite state after observer step")
    return z_next


@dataclass
class Simulation:
    x: np.ndarray
    y: np.ndarray
    mode: str = "prediction"


def simulate(m, data, mode="prediction", x_init=None):
    """Single-shooting simulation; observer mode starts from z_0 = 0."""
    U = jnp.asarray(data.u)
    if data.n_u != m.n_u:
        raise DimensionError(f"dataset has {data.n_u} inputs, model expects {m.n_u}")
    if mode == "prediction":
        x_start = m.x0 if x_init is None else np.asarray(x_init, dtype=float)
        states = np.asarray(rollout(m.params, U, jnp.asarray(x_start), m.net.uses_input))
    elif mode == "observer":
        if data.n_y != m.n_y:
            raise DimensionError(f"dataset has {data.n_y} outputs, model expects {m.n_y}")
        states = np.asarray(observer_rollout(m.params, U, jnp.asarray(data.y), m.net.uses_input))
    else:
        raise ValueError(f"unknown simulation mode {mode!r}")
    bad = _first_nonfinite(states)
    if bad is not None:
        raise NumericalError(f"non-finite state at time index {bad} ({mode} simulation)", time_index=bad)
    return Simulation(x=states, y=states @ m.C.T, mode=mode)


def simulate_restricted(m, data, indices, x_init=None):
    """Prediction with only the retained branches (plus the terminal one) scheduled."""
    mask = np.zeros(m.n_p - 1)
    mask[list(indices)] = 1.0
    x_start = m.x0 if x_init is None else np.asarray(x_init, dtype=float)
    states = np.asarray(restricted_rollout(m.params, jnp.asarray(data.u), jnp.asarray(x_start),
                                           jnp.asarray(mask), m.net.uses_input))
    bad = _first_nonfinite(states)
    if bad is not None:
        raise NumericalError(f"non-finite state at time index {bad} (restricted simulation)", time_index=bad)
    return Simulation(x=states, y=states @ m.C.T)


def estimate_disturbance(residuals, kappa):
    residuals = np.asarray(residuals, dtype=float)
    if residuals.ndim == 1:
        residuals = residuals[:, None]
    if residuals.size == 0:
        raise DimensionError("no residuals to bound")
    c_w, eps_w = disturbance_bounds(jnp.asarray(residuals))
    return DisturbanceSet(c_w=np.asarray(c_w), eps_w=np.maximum(np.asarray(eps_w), 0.0), kappa=float(kappa))


def observer_residuals(m, data):
    sim = simulate(m, data, mode="observer")
    return data.y - sim.y


def bfr(y, y_hat):
    """Best fit ratio in percent, clipped at 0."""
    y = np.asarray(y, dtype=float)
    y_hat = np.asarray(y_hat, dtype=float)
    if y.shape != y_hat.shape:
        raise DimensionError(f"y {y.shape} and y_hat {y_hat.shape} differ")
    denom = np.linalg.norm(y - y.mean(axis=0))
    if denom == 0:
        logger.warning("BFR undefined for a constant output sequence; reporting 0")
        return 0.0
    return float(max(0.0, 1.0 - np.linalg.norm(y - y_hat) / denom) * 100.0)


def kappa_lower_bound(alpha, eps_w):
    alpha = np.atleast_1d(np.asarray(alpha, dtype=float))
    eps_w = np.atleast_1d(np.asarray(eps_w, dtype=float))
    if np.any(eps_w == 0):
        logger.warning("zero disturbance half-width; kappa bound is unbounded")
        return np.inf
    return float(1.0 + np.max(alpha / eps_w))


def nominal_matrices(m):
    """Vertex averages (A_bar, B_bar)."""
    return m.A.mean(axis=0), m.B.mean(axis=0)
