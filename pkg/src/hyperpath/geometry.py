"""Numerically safe Poincare-ball primitives.

All functions operate on float64 torch tensors whose last dimension holds the
point coordinates; leading dimensions broadcast. The ball with curvature
magnitude ``c > 0`` is ``{x : c * ||x||^2 < 1}`` (radius ``1/sqrt(c)``). Every
point-producing operation re-projects its output to a ``BALL_EPS`` margin
inside the boundary so downstream ``atanh`` / ``acosh`` calls stay finite.

Tangent vectors at the origin are measured in geodesic length, i.e.
``norm(log_map_0(x)) == hyp_distance(origin, x)`` holds exactly and
``exp_map_0`` is the matching inverse. All operations are pure functions and
differentiable in both the points and the curvature.
"""

from __future__ import annotations

import math

import torch
from torch import Tensor

# Margin kept between any produced point and the ball boundary.
BALL_EPS = 1e-5
# Guard for atanh near its poles.
ATANH_EPS = 1e-12
# Guard against 0/0 in the radial direction of exp/log at the origin.
_NORM_FLOOR = 1e-15

_LEAKY_SLOPE = 0.01


def curvature_from_theta(theta: Tensor) -> Tensor:
    """Positive curvature magnitude ``c = softplus(theta) = ln(1 + e^theta)``."""
    return torch.nn.functional.softplus(theta)


def theta_for_curvature(c: float) -> float:
    """Inverse of :func:`curvature_from_theta` for initialisation."""
    if c <= 0:
        raise ValueError(f"curvature must be positive, got {c}")
    return math.log(math.expm1(c))


def _as_c(c: Tensor | float, like: Tensor) -> Tensor:
    return torch.as_tensor(c, dtype=like.dtype, device=like.device)


def project_to_ball(v: Tensor, c: Tensor | float) -> Tensor:
    """Rescale ``v`` onto norm ``(1 - BALL_EPS)/sqrt(c)`` if it is at or past
    that margin; interior points pass through unchanged."""
    c = _as_c(c, v)
    max_norm = (1.0 - BALL_EPS) / torch.sqrt(c)
    norm = torch.linalg.vector_norm(v, dim=-1, keepdim=True)
    scaled = v * (max_norm / norm.clamp_min(_NORM_FLOOR))
    return torch.where(norm >= max_norm, scaled, v)


def mobius_add(x: Tensor, y: Tensor, c: Tensor | float) -> Tensor:
    """Gyrovector addition ``x (+)_c y`` of two points in the same ball."""
    c = _as_c(c, x)
    xy = (x * y).sum(dim=-1, keepdim=True)
    x2 = (x * x).sum(dim=-1, keepdim=True)
    y2 = (y * y).sum(dim=-1, keepdim=True)
    num = (1.0 + 2.0 * c * xy + c * y2) * x + (1.0 - c * x2) * y
    den = 1.0 + 2.0 * c * xy + c * c * x2 * y2
    return project_to_ball(num / den.clamp_min(_NORM_FLOOR), c)


def exp_map_0(v: Tensor, c: Tensor | float) -> Tensor:
    """Exponential map at the origin; ``v = 0`` maps to the origin.

    ``exp_0(v) = tanh(sqrt(c) * ||v|| / 2) * v / (sqrt(c) * ||v||)`` so the
    geodesic distance from the origin to the image equals ``||v||``.
    """
    c = _as_c(c, v)
    sqrt_c = torch.sqrt(c)
    norm = torch.linalg.vector_norm(v, dim=-1, keepdim=True).clamp_min(_NORM_FLOOR)
    out = torch.tanh(sqrt_c * norm / 2.0) * v / (sqrt_c * norm)
    return project_to_ball(out, c)


def log_map_0(y: Tensor, c: Tensor | float) -> Tensor:
    """Logarithmic map at the origin, inverse of :func:`exp_map_0`.

    ``log_0(y) = (2 / sqrt(c)) * atanh(sqrt(c) * ||y||) * y / ||y||``.
    """
    c = _as_c(c, y)
    sqrt_c = torch.sqrt(c)
    norm = torch.linalg.vector_norm(y, dim=-1, keepdim=True).clamp_min(_NORM_FLOOR)
    arg = (sqrt_c * norm).clamp(max=1.0 - ATANH_EPS)
    return (2.0 / sqrt_c) * torch.atanh(arg) * y / norm


def hyp_matvec(m: Tensor, x: Tensor, c: Tensor | float) -> Tensor:
    """Matrix action ``M (x)_c x = exp_0(M @ log_0(x))``; rows of ``m`` give
    the output dimension."""
    if m.shape[-1] != x.shape[-1]:
        raise ValueError(
            f"matrix columns ({m.shape[-1]}) must match point dimension ({x.shape[-1]})"
        )
    return exp_map_0(log_map_0(x, c) @ m.transpose(-1, -2), c)


def hyp_activation(x: Tensor, c: Tensor | float, act: str = "leaky_relu") -> Tensor:
    """Apply a Euclidean activation in the tangent space: ``exp_0(act(log_0(x)))``."""
    t = log_map_0(x, c)
    if act == "leaky_relu":
        t = torch.nn.functional.leaky_relu(t, negative_slope=_LEAKY_SLOPE)
    elif act != "identity":
        raise ValueError(f"unsupported activation {act!r}")
    return exp_map_0(t, c)


def hyp_distance(x: Tensor, y: Tensor, c: Tensor | float) -> Tensor:
    """Geodesic distance between two points of the same ball.

    ``d(x, y) = acosh(1 + 2c||x-y||^2 / ((1 - c||x||^2)(1 - c||y||^2))) / sqrt(c)``
    with the acosh argument clamped to ``>= 1`` against float rounding.
    """
    c = _as_c(c, x)
    d2 = ((x - y) ** 2).sum(dim=-1)
    x2 = (x * x).sum(dim=-1)
    y2 = (y * y).sum(dim=-1)
    den = ((1.0 - c * x2) * (1.0 - c * y2)).clamp_min(_NORM_FLOOR)
    arg = (1.0 + 2.0 * c * d2 / den).clamp_min(1.0)
    return torch.acosh(arg) / torch.sqrt(c)


def in_ball(x: Tensor, c: Tensor | float) -> Tensor:
    """Boolean mask: does each point satisfy the margin invariant
    ``c * ||x||^2 <= (1 - BALL_EPS)^2``?"""
    c = _as_c(c, x)
    return c * (x * x).sum(dim=-1) <= (1.0 - BALL_EPS) ** 2 * (1.0 + 1e-12)
