"""Configuration-constrained polytope templates and constraint polyhedra.

A template is X(q) = {x : F x <= q}. On the configuration cone E q <= 0 the
polytope equals the convex hull of the points V_k q, which makes every
vertex a linear function of q.
"""
import itertools
import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from utils.errors import DimensionError, NumericalError

logger = logging.getLogger(__name__)

TOL = 1e-9
MIN_ABS_DET = 1e-10


@dataclass(frozen=True)
class TemplatePolytope:
    F: np.ndarray
    E: np.ndarray
    vertex_maps: Tuple[np.ndarray, ...]

    @property
    def n_x(self):
        return self.F.shape[1]

    @property
    def f(self):
        return self.F.shape[0]

    @property
    def v(self):
        return len(self.vertex_maps)

    @property
    def V(self):
        """Vertex maps stacked as (v, n_x, f)."""
        return np.stack(self.vertex_maps)

    def to_dict(self):
        return {
            "F": self.F.tolist(),
            "E": self.E.tolist(),
            "V": [V.tolist() for V in self.vertex_maps],
            "dims": {"n_x": self.n_x, "f": self.f, "v": self.v},
        }

    @classmethod
    def from_dict(cls, data):
        n_x, f = data["dims"]["n_x"], data["dims"]["f"]
        return cls(
            F=np.asarray(data["F"], dtype=float).reshape(f, n_x),
            E=np.asarray(data["E"], dtype=float).reshape(-1, f),
            vertex_maps=tuple(np.asarray(V, dtype=float).reshape(n_x, f) for V in data["V"]),
        )


@dataclass(frozen=True)
class ConstraintPolyhedron:
    """{x : H x <= h}, optionally with its vertex list."""

    H: np.ndarray
    h: np.ndarray
    vertices: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.H.ndim != 2 or self.h.shape != (self.H.shape[0],):
            raise DimensionError(f"H {self.H.shape} and h {self.h.shape} do not match")
        if self.vertices is not None:
            excess = self.vertices @ self.H.T - self.h
            if excess.size and excess.max() > TOL:
                raise ValueError(f"vertex list leaves the polyhedron by {excess.max():.3e}")
        if np.any(self.h <= 0):
            logger.warning("origin is not strictly inside the constraint polyhedron")

    @property
    def dim(self):
        return self.H.shape[1]

    def contains(self, x, tol=TOL):
        return bool(np.all(self.H @ np.asarray(x, dtype=float) <= self.h + tol))

    def to_scaled(self, mean, std):
        """Express the set in scaled coordinates s = (x - mean) / std."""
        mean = np.asarray(mean, dtype=float)
        std = np.asarray(std, dtype=float)
        H = self.H * std[None, :]
        h = self.h - self.H @ mean
        vertices = None if self.vertices is None else (self.vertices - mean) / std
        return ConstraintPolyhedron(H=H, h=h, vertices=vertices)

    def to_dict(self):
        return {
            "H": self.H.tolist(),
            "h": self.h.tolist(),
            "vertices": None if self.vertices is None else self.vertices.tolist(),
        }

    @classmethod
    def from_dict(cls, data):
        H = np.asarray(data["H"], dtype=float)
        vertices = data.get("vertices")
        return cls(
            H=H.reshape(len(data["h"]), -1),
            h=np.asarray(data["h"], dtype=float),
            vertices=None if vertices is None else np.asarray(vertices, dtype=float).reshape(-1, H.shape[1]),
        )


def box_polyhedron(lower, upper):
    """Axis-aligned box with its 2^n vertices."""
    lower = np.atleast_1d(np.asarray(lower, dtype=float))
    upper = np.atleast_1d(np.asarray(upper, dtype=float))
    if lower.shape != upper.shape or np.any(upper < lower):
        raise ValueError(f"invalid box bounds {lower} / {upper}")
    n = lower.size
    H = np.vstack((np.eye(n), -np.eye(n)))
    h = np.concatenate((upper, -lower))
    vertices = np.array(list(itertools.product(*zip(upper, lower))), dtype=float)
    return ConstraintPolyhedron(H=H, h=h, vertices=vertices)


def _coordinate_selectors(n_x):
    # one selector per sign pattern, '+' picks the upper offset of that axis
    selectors = []
    for signs in itertools.product((1, -1), repeat=n_x):
        S = np.zeros((n_x, 2 * n_x))
        for i, s in enumerate(signs):
            if s > 0:
                S[i, i] = 1.0
            else:
                S[i, n_x + i] = -1.0
        selectors.append(S)
    return selectors


def make_box_template(n_x, sigma=None):
    """Box template F = [I; -I] Sigma^-1 with exact vertex maps."""
    if n_x < 1:
        raise DimensionError(f"n_x must be >= 1, got {n_x}")
    sigma = np.eye(n_x) if sigma is None else np.atleast_2d(np.asarray(sigma, dtype=float))
    if sigma.shape != (n_x, n_x):
        raise DimensionError(f"Sigma must be {n_x}x{n_x}, got {sigma.shape}")
    det = abs(np.linalg.det(sigma))
    if not np.isfinite(det) or det <= MIN_ABS_DET:
        raise NumericalError(f"Sigma is near-singular (|det| = {det:.3e})", abs_det=det)
    F_base = np.vstack((np.eye(n_x), -np.eye(n_x)))
    F = F_base @ np.linalg.inv(sigma)
    # q_upper + q_lower >= 0, written as E q <= 0
    E = -np.hstack((np.eye(n_x), np.eye(n_x)))
    vertex_maps = tuple(sigma @ S for S in _coordinate_selectors(n_x))
    return TemplatePolytope(F=F, E=E, vertex_maps=vertex_maps)


def contains(poly, q, x):
    x = np.asarray(x, dtype=float)
    if x.shape != (poly.n_x,):
        raise DimensionError(f"point has shape {x.shape}, template expects ({poly.n_x},)")
    return bool(np.all(poly.F @ x <= np.asarray(q, dtype=float) + TOL))


def in_configuration_cone(poly, q):
    q = np.asarray(q, dtype=float)
    if q.shape != (poly.f,):
        raise DimensionError(f"q has shape {q.shape}, template expects ({poly.f},)")
    return bool(np.all(poly.E @ q <= TOL))


def vertices(poly, q):
    """Vertices V_k q as a (v, n_x) array."""
    return np.einsum("kxf,f->kx", poly.V, np.asarray(q, dtype=float))


def boundary_polyline(poly, q, C=None):
    """Closed boundary of X(q) for plotting.

    In 2-D the vertices are ordered by angle and the first one is repeated.
    With an output map C the set is projected and, for scalar outputs, the
    image interval [min, max] is returned.
    """
    pts = vertices(poly, q)
    if C is not None:
        pts = pts @ np.atleast_2d(C).T
        if pts.shape[1] == 1:
            return np.array([[pts.min()], [pts.max()]])
    if pts.shape[1] != 2:
        return pts
    center = pts.mean(axis=0)
    order = np.argsort(np.arctan2(pts[:, 1] - center[1], pts[:, 0] - center[0]))
    ring = pts[order]
    return np.vstack((ring, ring[:1]))
