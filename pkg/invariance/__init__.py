"""Polytopic invariant sets, the convex QP solver and the safety-filter controller."""
