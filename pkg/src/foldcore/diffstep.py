"""Differentiable update steps: forward evaluation plus hand-derived VJPs.

A DiffStep packages one iteration x -> U(x, c) of a solver together with the
two pullbacks g -> g^T dU/dx and g -> g^T dU/dc. These products are all the
backward engines ever need, so no tape is involved: each primitive carries
its own derivative rule, and `compose` chains them.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import DimensionMismatch, InfeasibleMass
from .linalg import LuFactorization

Array = np.ndarray
EvalFn = Callable[[Array, Array], Array]
VjpFn = Callable[[Array, Array, Array], Array]


@dataclass(frozen=True)
class DiffStep:
    """One differentiable update x -> U(x, c).

    vjp_state(x, c, g) returns g^T dU/dx as a state-dim vector and
    vjp_param(x, c, g) returns g^T dU/dc as a param-dim vector; both are
    linear in g.
    """

    state_dim: int
    param_dim: int
    eval: EvalFn
    vjp_state: VjpFn
    vjp_param: VjpFn


def affine_step(phi: Array, psi: Array) -> DiffStep:
    """U(x, c) = phi @ x + psi @ c, with exact Jacobians phi and psi."""
    phi = np.asarray(phi, dtype=float)
    psi = np.asarray(psi, dtype=float)
    if phi.shape[0] != psi.shape[0]:
        raise DimensionMismatch("phi and psi must have matching row counts")
    return DiffStep(
        state_dim=phi.shape[1],
        param_dim=psi.shape[1],
        eval=lambda x, c: phi @ x + psi @ c,
        vjp_state=lambda x, c, g: phi.T @ g,
        vjp_param=lambda x, c, g: psi.T @ g,
    )


def grad_step(
    objective_grad: Callable[[Array, Array], Array],
    objective_hvp: Callable[[Array, Array, Array], Array],
    objective_cross_vjp: Callable[[Array, Array, Array], Array],
    alpha: float,
    state_dim: int,
    param_dim: int,
) -> DiffStep:
    """Gradient-descent step x - alpha * grad_f(x, c).

    `objective_hvp(x, c, v)` is the Hessian-vector product of f in x (the
    Hessian is assumed symmetric) and `objective_cross_vjp(x, c, g)` is
    g^T d(grad_f)/dc.
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    return DiffStep(
        state_dim=state_dim,
        param_dim=param_dim,
        eval=lambda x, c: x - alpha * objective_grad(x, c),
        vjp_state=lambda x, c, g: g - alpha * objective_hvp(x, c, g),
        vjp_param=lambda x, c, g: -alpha * objective_cross_vjp(x, c, g),
    )


def box_project(lo, hi, state_dim: int, param_dim: int = 0) -> DiffStep:
    """Coordinatewise clamp into [lo, hi]; derivative 1 strictly inside."""
    lo = np.broadcast_to(np.asarray(lo, dtype=float), (state_dim,))
    hi = np.broadcast_to(np.asarray(hi, dtype=float), (state_dim,))
    if np.any(lo > hi):
        raise ValueError("lo must not exceed hi")

    def vjp_state(x, c, g):
        inside = (x > lo) & (x < hi)
        return np.where(inside, g, 0.0)

    return DiffStep(
        state_dim=state_dim,
        param_dim=param_dim,
        eval=lambda x, c: np.clip(x, lo, hi),
        vjp_state=vjp_state,
        vjp_param=lambda x, c, g: np.zeros(param_dim),
    )


def capped_simplex_project(v: Array, mass: float, tol: float = 1e-12) -> Array:
    """Euclidean projection of v onto {x : sum(x) = mass, 0 <= x <= 1}.

    Bisection on the shift tau in clip(v - tau, 0, 1): the coordinate sum is
    monotone decreasing in tau, and [min(v) - 1, max(v)] brackets the root.
    """
    v = np.asarray(v, dtype=float)
    if mass > v.size:
        raise InfeasibleMass(f"mass {mass} exceeds dimension {v.size}")
    if mass <= 0:
        raise ValueError("mass must be positive")
    lo, hi = float(np.min(v)) - 1.0, float(np.max(v))
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if np.sum(np.clip(v - mid, 0.0, 1.0)) > mass:
            lo = mid
        else:
            hi = mid
        if hi - lo <= tol:
            break
    return np.clip(v - 0.5 * (lo + hi), 0.0, 1.0)


def simplex_project(mass: float, state_dim: int, param_dim: int = 0) -> DiffStep:
    """Projection onto the capped simplex {sum(x) = mass, 0 <= x <= 1}.

    The projection Jacobian is I - (1/|A|) 11^T on the set A of coordinates
    strictly inside (0, 1) and zero elsewhere; coordinates landing exactly on
    a bound count as clamped.
    """

    def eval_(x, c):
        return capped_simplex_project(x, mass)

    def vjp_state(x, c, g):
        p = capped_simplex_project(x, mass)
        active = (p > 0.0) & (p < 1.0)
        out = np.zeros_like(g)
        na = int(np.sum(active))
        if na:
            ga = g[active]
            out[active] = ga - np.sum(ga) / na
        return out

    return DiffStep(
        state_dim=state_dim,
        param_dim=param_dim,
        eval=eval_,
        vjp_state=vjp_state,
        vjp_param=lambda x, c, g: np.zeros(param_dim),
    )


def soft_threshold(threshold: float, state_dim: int, param_dim: int = 0) -> DiffStep:
    """Soft thresholding sign(x) * max(|x| - threshold, 0)."""
    if threshold < 0:
        raise ValueError("threshold must be nonnegative")

    def eval_(x, c):
        return np.sign(x) * np.maximum(np.abs(x) - threshold, 0.0)

    def vjp_state(x, c, g):
        return np.where(np.abs(x) > threshold, g, 0.0)

    return DiffStep(
        state_dim=state_dim,
        param_dim=param_dim,
        eval=eval_,
        vjp_state=vjp_state,
        vjp_param=lambda x, c, g: np.zeros(param_dim),
    )


def kkt_linear_solve(
    build_system: Callable[[Array, Array], tuple[Array, Array]],
    state_dim: int,
    param_dim: int,
    rhs_vjp_state: VjpFn | None = None,
    rhs_vjp_param: VjpFn | None = None,
    matrix_vjp_param: Callable[[Array, Array], Array] | None = None,
) -> DiffStep:
    """Linear-solve primitive z = M(c)^{-1} r(x, c).

    `build_system(x, c)` returns (M, r). The pullback of g through the solve
    is w = M^{-T} g applied to r; when M depends on c, the matrix cotangent
    -w z^T is contracted against dM/dc by `matrix_vjp_param(c, W)`. Default
    rhs VJPs take r = x (so the pullback to state is w itself) and no
    parameter dependence.
    """

    def factor(x, c):
        m, r = build_system(x, c)
        return LuFactorization(np.asarray(m, dtype=float)), np.asarray(r, dtype=float)

    def eval_(x, c):
        fac, r = factor(x, c)
        return fac.solve(r)

    def pullback(x, c, g):
        fac, r = factor(x, c)
        z = fac.solve(r)
        w = fac.solve_transpose(g)
        return w, z

    def vjp_state(x, c, g):
        w, _ = pullback(x, c, g)
        if rhs_vjp_state is None:
            if len(w) != state_dim:
                raise DimensionMismatch(
                    "default rhs pullback needs the system dim to equal state_dim"
                )
            return w
        return rhs_vjp_state(x, c, w)

    def vjp_param(x, c, g):
        w, z = pullback(x, c, g)
        out = np.zeros(param_dim)
        if rhs_vjp_param is not None:
            out = out + rhs_vjp_param(x, c, w)
        if matrix_vjp_param is not None:
            out = out + matrix_vjp_param(c, -np.outer(w, z))
        return out

    return DiffStep(state_dim, param_dim, eval_, vjp_state, vjp_param)


def compose(steps: Sequence[DiffStep]) -> DiffStep:
    """Sequential composition; VJPs back-chain through recorded stage inputs."""
    steps = list(steps)
    if not steps:
        raise ValueError("compose needs at least one step")
    param_dim = steps[0].param_dim
    for prev, nxt in zip(steps, steps[1:]):
        if prev.state_dim != nxt.state_dim:
            raise DimensionMismatch(
                f"stage dims {prev.state_dim} -> {nxt.state_dim} disagree"
            )
    if any(s.param_dim != param_dim for s in steps):
        raise DimensionMismatch("all stages must share param_dim")

    def stage_inputs(x, c):
        xs = [x]
        for s in steps[:-1]:
            xs.append(s.eval(xs[-1], c))
        return xs

    def eval_(x, c):
        out = x
        for s in steps:
            out = s.eval(out, c)
        return out

    def vjp_state(x, c, g):
        xs = stage_inputs(x, c)
        a = g
        for s, xi in zip(reversed(steps), reversed(xs)):
            a = s.vjp_state(xi, c, a)
        return a

    def vjp_param(x, c, g):
        xs = stage_inputs(x, c)
        a = g
        out = np.zeros(param_dim)
        for s, xi in zip(reversed(steps), reversed(xs)):
            out = out + s.vjp_param(xi, c, a)
            a = s.vjp_state(xi, c, a)
        return out

    return DiffStep(steps[0].state_dim, param_dim, eval_, vjp_state, vjp_param)


@dataclass(frozen=True)
class VjpReport:
    max_rel_err_state: float
    max_rel_err_param: float
    probe_count: int


def fd_check(
    step: DiffStep,
    x: Array,
    c: Array,
    h: float | None = None,
    probes: int = 10,
    seed: int = 0,
) -> VjpReport:
    """Compare both VJPs against central finite differences of eval.

    For each seeded probe g, g^T [U(x + h e_i) - U(x - h e_i)] / (2h) is
    assembled coordinatewise and compared to the analytic pullback. Results
    are only meaningful away from nondifferentiable kinks.
    """
    x = np.asarray(x, dtype=float)
    c = np.asarray(c, dtype=float)
    rng = np.random.default_rng(seed)
    hx = 1e-5 * max(1.0, np.max(np.abs(x), initial=0.0)) if h is None else h
    hc = 1e-5 * max(1.0, np.max(np.abs(c), initial=0.0)) if h is None else h

    def fd_pullback(g):
        fd_s = np.empty(step.state_dim)
        for i in range(step.state_dim):
            e = np.zeros(step.state_dim)
            e[i] = hx
            fd_s[i] = g @ (step.eval(x + e, c) - step.eval(x - e, c)) / (2 * hx)
        fd_p = np.empty(step.param_dim)
        for j in range(step.param_dim):
            e = np.zeros(step.param_dim)
            e[j] = hc
            fd_p[j] = g @ (step.eval(x, c + e) - step.eval(x, c - e)) / (2 * hc)
        return fd_s, fd_p

    err_s = 0.0
    err_p = 0.0
    for _ in range(probes):
        g = rng.standard_normal(step.state_dim)
        fd_s, fd_p = fd_pullback(g)
        an_s = step.vjp_state(x, c, g)
        an_p = step.vjp_param(x, c, g)
        scale_s = max(np.max(np.abs(fd_s), initial=0.0), 1.0)
        err_s = max(err_s, np.max(np.abs(an_s - fd_s), initial=0.0) / scale_s)
        if step.param_dim:
            scale_p = max(np.max(np.abs(fd_p), initial=0.0), 1.0)
            err_p = max(err_p, np.max(np.abs(an_p - fd_p), initial=0.0) / scale_p)
    return VjpReport(err_s, err_p, probes)
