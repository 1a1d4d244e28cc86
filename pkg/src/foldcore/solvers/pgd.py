"""Projected gradient descent with constant or Polyak stepsizes."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from ..diffstep import DiffStep
from ..foldengine import FixedPoint, ForwardTrace, Status, relative_l1


@dataclass(frozen=True)
class GradModel:
    """Smooth objective access: value, gradient, Hessian and cross products.

    `hvp(x, c, v)` applies the (symmetric) Hessian in x; `cross_vjp(x, c, g)`
    is g^T d(grad)/dc, the piece a gradient step needs to pull gradients back
    to the parameters.
    """

    state_dim: int
    param_dim: int
    value: Callable[[np.ndarray, np.ndarray], float]
    grad: Callable[[np.ndarray, np.ndarray], np.ndarray]
    hvp: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]
    cross_vjp: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class Constant:
    alpha: float

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("constant stepsize must be positive")


@dataclass(frozen=True)
class Polyak:
    """alpha_k = (f(x_k) - f*) / max(||grad f(x_k)||^2, 1e-12), clipped at 0."""

    f_star: float


StepsizePolicy = Constant | Polyak


def pgd_solve(
    model: GradModel,
    projection: DiffStep,
    c: np.ndarray,
    x0: np.ndarray,
    policy: StepsizePolicy,
    tol: float = 1e-10,
    max_iter: int = 10_000,
    reference: np.ndarray | None = None,
) -> tuple[FixedPoint, ForwardTrace]:
    """Iterate x <- P(x - alpha * grad f(x, c)) until the update stalls.

    Stops when ||x_{k+1} - x_k||_inf <= tol * max(1, ||x_k||_inf). The
    stepsizes actually used are recorded in the fixed point's aux dict,
    which is what the adaptive-stepsize diagnostics replay.
    """
    c = np.asarray(c, dtype=float)
    x = np.asarray(x0, dtype=float).copy()
    errors: list = []
    alphas: list = []
    status = Status.ITERLIMIT
    iterations = max_iter
    diff = np.inf
    for k in range(1, max_iter + 1):
        grad = model.grad(x, c)
        if isinstance(policy, Constant):
            alpha = policy.alpha
        else:
            gap = model.value(x, c) - policy.f_star
            alpha = max(gap, 0.0) / max(float(grad @ grad), 1e-12)
        alphas.append(alpha)
        x_next = projection.eval(x - alpha * grad, c)
        diff = float(np.max(np.abs(x_next - x), initial=0.0))
        x = x_next
        if reference is not None:
            errors.append(relative_l1(x, reference))
        if diff <= tol * max(1.0, np.max(np.abs(x), initial=0.0)):
            status, iterations = Status.CONVERGED, k
            break

    fp = FixedPoint(
        x_star=x,
        c=c,
        residual=diff,
        iterations=iterations,
        status=status,
        aux={"alphas": alphas},
    )
    return fp, ForwardTrace(errors, status)
