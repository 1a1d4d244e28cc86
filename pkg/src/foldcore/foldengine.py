"""Backward-pass engines for differentiating c -> x*(c) at a fixed point.

Given a converged fixed point x* = U(x*, c) and an incoming gradient g, all
three engines compute g^T J where J solves (I - Phi) J = Psi, with Phi and
Psi the state and parameter Jacobians of the update step at x*. They differ
only in how the transposed system (I - Phi)^T v = g is solved:

  * lfpi      -- iterate v <- vjp_state(v) + g; equivalent to backpropagating
                 the update step unrolled at the fixed point.
  * gmres     -- Krylov solve of the same system; converges within state-dim
                 iterations whether or not Phi is contractive.
  * jacobian  -- extract Phi row-by-row and solve directly by LU.

`unrolled_backprop` is the reference implementation that actually walks a
forward trajectory and reverse-accumulates, used for the diagnostics that
compare folding against honest unrolling.
"""

from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .diffstep import DiffStep
from .errors import SingularSystem, StaleFixedPoint
from .linalg import (
    GmresResult,
    LinearOperator,
    LuFactorization,
    PowerIterationResult,
    gmres,
    power_iteration,
)

DIVERGENCE_LIMIT = 1e12


class Status(enum.Enum):
    CONVERGED = "ok"
    ITERLIMIT = "iterlimit"
    DIVERGED = "diverged"


@dataclass
class FixedPoint:
    """A converged solution record for the mapping c -> x*(c).

    `x_star` is the state vector the update step iterates (which may bundle
    auxiliary solver state, e.g. the dual pair of a splitting method);
    solver-specific outputs live in `aux`.
    """

    x_star: np.ndarray
    c: np.ndarray
    residual: float
    iterations: int
    status: Status = Status.CONVERGED
    aux: dict = field(default_factory=dict)


@dataclass
class ForwardTrace:
    errors: list
    status: Status = Status.CONVERGED


@dataclass
class BackwardTrace:
    errors: list
    status: Status = Status.CONVERGED


@dataclass
class GradResult:
    grad_c: np.ndarray
    trace: BackwardTrace
    iterations: int
    status: Status = Status.CONVERGED
    emissions: list | None = None


def relative_l1(value: np.ndarray, reference: np.ndarray) -> float:
    """Relative L1 error of `value` against `reference`."""
    denom = float(np.sum(np.abs(reference)))
    return float(np.sum(np.abs(value - reference))) / max(denom, 1e-300)


def _check_fixed_point(step: DiffStep, fp: FixedPoint) -> None:
    if fp.residual > 1e-6:
        warnings.warn(
            f"fixed-point residual {fp.residual:.3e} above 1e-6; "
            "backward results may be inaccurate",
            stacklevel=3,
        )


def backprop_lfpi(
    step: DiffStep,
    fp: FixedPoint,
    g: np.ndarray,
    tol: float = 1e-10,
    max_iter: int = 100_000,
    reference_grad: np.ndarray | None = None,
    record: bool = False,
) -> GradResult:
    """Linear fixed-point iteration on (I - Phi)^T v = g.

    Iterates v_k = vjp_state(x*, c, v_{k-1}) + g from v_0 = g, so the k-th
    parameter product vjp_param(v_k) reproduces the gradient after k+1 steps
    of backpropagating the update at the fixed point. Diverges exactly when
    the spectral radius of Phi reaches one.
    """
    _check_fixed_point(step, fp)
    x, c = fp.x_star, fp.c
    tracing = record or reference_grad is not None
    v = np.asarray(g, dtype=float).copy()
    stop_scale = max(1.0, np.max(np.abs(g), initial=0.0))
    emissions: list | None = [] if tracing else None
    errors: list = []

    def emit(vk):
        out = step.vjp_param(x, c, vk)
        emissions.append(out)
        if reference_grad is not None:
            errors.append(relative_l1(out, reference_grad))

    if tracing:
        emit(v)
    status = Status.ITERLIMIT
    iterations = max_iter
    for k in range(1, max_iter + 1):
        v_next = step.vjp_state(x, c, v) + g
        diff = np.max(np.abs(v_next - v), initial=0.0)
        v = v_next
        if tracing:
            emit(v)
        if not np.all(np.isfinite(v)) or np.max(np.abs(v), initial=0.0) > DIVERGENCE_LIMIT:
            status, iterations = Status.DIVERGED, k
            break
        if diff <= tol * stop_scale:
            status, iterations = Status.CONVERGED, k
            break

    grad_c = emissions[-1] if tracing else step.vjp_param(x, c, v)
    return GradResult(grad_c, BackwardTrace(errors, status), iterations, status,
                      emissions)


def backprop_gmres(
    step: DiffStep,
    fp: FixedPoint,
    g: np.ndarray,
    tol: float = 1e-10,
    max_iter: int | None = None,
    reference_grad: np.ndarray | None = None,
    record: bool = False,
) -> GradResult:
    """GMRes solve of (I - Phi)^T v = g using only backward products.

    The operator image of r is r - vjp_state(x*, c, r). Exact convergence is
    guaranteed within state-dim iterations for nonsingular (I - Phi), with no
    contractivity requirement on Phi.
    """
    _check_fixed_point(step, fp)
    x, c = fp.x_star, fp.c
    n = step.state_dim
    op = LinearOperator(n, lambda r: r - step.vjp_state(x, c, r))
    cap = n if max_iter is None else min(max_iter, n)
    tracing = record or reference_grad is not None
    result: GmresResult = gmres(op, np.asarray(g, dtype=float), tol=tol,
                                max_iter=cap, record_iterates=tracing)
    if not result.converged:
        raise SingularSystem(
            f"backward residual {result.residual_history[-1]:.3e} above "
            f"tolerance after {result.iterations} iterations"
        )
    grad_c = step.vjp_param(x, c, result.x)
    emissions = None
    errors: list = []
    if tracing:
        emissions = [step.vjp_param(x, c, vk) for vk in result.iterates]
        if reference_grad is not None:
            errors = [relative_l1(e, reference_grad) for e in emissions]
    return GradResult(grad_c, BackwardTrace(errors, Status.CONVERGED),
                      result.iterations, Status.CONVERGED, emissions)


def extract_state_jacobian(step: DiffStep, fp: FixedPoint) -> np.ndarray:
    """Materialize Phi by backpropagating the identity through the step."""
    n = step.state_dim
    phi = np.empty((n, n))
    for i in range(n):
        e = np.zeros(n)
        e[i] = 1.0
        phi[i, :] = step.vjp_state(fp.x_star, fp.c, e)
    return phi


def backprop_jacobian(step: DiffStep, fp: FixedPoint, g: np.ndarray) -> GradResult:
    """Direct engine: build Phi, LU-solve (I - Phi)^T v = g, pull back.

    This is the designated ground-truth engine for error traces: the dense
    solve leaves no iterative-convergence question on the reference side.
    """
    _check_fixed_point(step, fp)
    phi = extract_state_jacobian(step, fp)
    system = np.eye(step.state_dim) - phi.T
    v = LuFactorization(system).solve(np.asarray(g, dtype=float))
    grad_c = step.vjp_param(fp.x_star, fp.c, v)
    return GradResult(grad_c, BackwardTrace([], Status.CONVERGED), 1,
                      Status.CONVERGED)


@dataclass
class UnrolledResult:
    x_final: np.ndarray
    grad_c: np.ndarray
    fwd_trace: ForwardTrace
    bwd_trace: BackwardTrace
    bwd_partials: list


def unrolled_backprop(
    step: DiffStep | Sequence[DiffStep],
    x0: np.ndarray,
    c: np.ndarray,
    iters: int,
    g: np.ndarray,
    fwd_reference: np.ndarray | None = None,
    bwd_reference: np.ndarray | None = None,
) -> UnrolledResult:
    """Reference unrolled backpropagation of `iters` update steps.

    Walks the forward trajectory storing every iterate, then for each k
    reverse-accumulates g^T dx_k/dc (the gradient of the k-step-truncated
    unroll, with x0 treated as constant). `step` may be a sequence of length
    `iters` for iteration-dependent updates such as adaptive stepsizes.
    Traces record relative L1 errors against the supplied references.
    """
    if iters < 1:
        raise ValueError("iters must be at least 1")
    steps = list(step) if isinstance(step, (list, tuple)) else [step] * iters
    if len(steps) != iters:
        raise ValueError("need one step per iteration")
    c = np.asarray(c, dtype=float)
    xs = [np.asarray(x0, dtype=float)]
    fwd_errors = []
    for k in range(iters):
        xs.append(steps[k].eval(xs[-1], c))
        if fwd_reference is not None:
            fwd_errors.append(relative_l1(xs[-1], fwd_reference))

    p = steps[0].param_dim
    partials = []
    bwd_errors = []
    for k in range(1, iters + 1):
        a = np.asarray(g, dtype=float)
        out = np.zeros(p)
        for i in range(k - 1, -1, -1):
            out = out + steps[i].vjp_param(xs[i], c, a)
            a = steps[i].vjp_state(xs[i], c, a)
        partials.append(out)
        if bwd_reference is not None:
            bwd_errors.append(relative_l1(out, bwd_reference))

    return UnrolledResult(
        x_final=xs[-1],
        grad_c=partials[-1],
        fwd_trace=ForwardTrace(fwd_errors),
        bwd_trace=BackwardTrace(bwd_errors),
        bwd_partials=partials,
    )


def spectral_radius(
    step: DiffStep,
    fp: FixedPoint,
    tol: float = 1e-9,
    max_iter: int = 5000,
    seed: int = 0,
) -> PowerIterationResult:
    """Power-iteration estimate of rho(Phi) at the fixed point.

    Runs on the transposed product g -> vjp_state(x*, c, g), which shares the
    spectrum of Phi.
    """
    op = LinearOperator(step.state_dim,
                        lambda v: step.vjp_state(fp.x_star, fp.c, v))
    return power_iteration(op, tol=tol, max_iter=max_iter, seed=seed)


ENGINES = ("lfpi", "gmres", "jacobian")


@dataclass
class FoldedLayer:
    """The differentiable mapping c -> x*(c): oracle + step + engine choice.

    `oracle` must expose solve(c) -> FixedPoint and a `tol` attribute; the
    solve result is cached per exact bit pattern of c so repeated backward
    calls at one parameter vector reuse the forward pass.
    """

    oracle: object
    step: DiffStep
    mode: str = "gmres"
    backward_tol: float = 1e-10
    backward_max_iter: int = 100_000
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.mode not in ENGINES:
            raise ValueError(f"mode must be one of {ENGINES}, got {self.mode!r}")


def layer_solve(layer: FoldedLayer, c: np.ndarray) -> FixedPoint:
    """Forward pass through the layer's oracle, cached by the bits of c."""
    c = np.ascontiguousarray(c, dtype=float)
    key = c.tobytes()
    fp = layer._cache.get(key)
    if fp is None:
        fp = layer.oracle.solve(c)
        if fp.x_star.shape[0] != layer.step.state_dim:
            raise ValueError(
                f"oracle returned state dim {fp.x_star.shape[0]}, "
                f"step expects {layer.step.state_dim}"
            )
        layer._cache[key] = fp
    return fp


def layer_backward(
    layer: FoldedLayer,
    c: np.ndarray,
    g: np.ndarray,
    reference_grad: np.ndarray | None = None,
) -> GradResult:
    """Solve the layer forward (cached) and run the selected backward engine."""
    fp = layer_solve(layer, c)
    resid = float(np.max(np.abs(layer.step.eval(fp.x_star, fp.c) - fp.x_star),
                         initial=0.0))
    tol = getattr(layer.oracle, "tol", 1e-10)
    if resid > 1e2 * tol:
        raise StaleFixedPoint(
            f"fixed-point residual {resid:.3e} exceeds 100 x forward tol {tol:.1e}"
        )
    if layer.mode == "lfpi":
        return backprop_lfpi(layer.step, fp, g, tol=layer.backward_tol,
                             max_iter=layer.backward_max_iter,
                             reference_grad=reference_grad)
    if layer.mode == "gmres":
        return backprop_gmres(layer.step, fp, g, tol=layer.backward_tol,
                              max_iter=layer.backward_max_iter,
                              reference_grad=reference_grad)
    return backprop_jacobian(layer.step, fp, g)
