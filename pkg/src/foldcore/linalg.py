"""Dense linear-system kernels: LU solve, unrestarted GMRes, power iteration.

Everything here is matrix-free where it can be: GMRes and power iteration
only ever touch an operator through its `apply` callable, which is how the
backward engines expose Jacobian products without materializing them.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import scipy.linalg

from .errors import Breakdown, SingularMatrix

PIVOT_TOL = 1e-12


@dataclass(frozen=True)
class LinearOperator:
    """A square operator v -> A v of dimension `dim`, applied via a callable."""

    dim: int
    apply: Callable[[np.ndarray], np.ndarray]

    @staticmethod
    def from_matrix(a: np.ndarray) -> "LinearOperator":
        a = np.asarray(a, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError(f"expected a square matrix, got shape {a.shape}")
        return LinearOperator(a.shape[0], lambda v: a @ v)


class LuFactorization:
    """Partial-pivoting LU of a square matrix, reusable for many solves."""

    def __init__(self, a: np.ndarray):
        a = np.asarray(a, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError(f"expected a square matrix, got shape {a.shape}")
        with warnings.catch_warnings():
            # scipy warns instead of raising on exactly singular input;
            # the pivot check below is the error contract.
            warnings.simplefilter("ignore")
            lu, piv = scipy.linalg.lu_factor(a, check_finite=False)
        diag = np.abs(np.diag(lu))
        if not np.all(np.isfinite(lu)) or np.min(diag) < PIVOT_TOL:
            raise SingularMatrix(
                f"pivot magnitude {np.min(diag):.3e} below {PIVOT_TOL:.0e}"
            )
        self.dim = a.shape[0]
        self._lu = (lu, piv)

    def solve(self, b: np.ndarray) -> np.ndarray:
        return scipy.linalg.lu_solve(self._lu, np.asarray(b, dtype=float),
                                     check_finite=False)

    def solve_transpose(self, b: np.ndarray) -> np.ndarray:
        return scipy.linalg.lu_solve(self._lu, np.asarray(b, dtype=float),
                                     trans=1, check_finite=False)


def lu_solve(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve A x = b by LU with partial pivoting.

    Raises SingularMatrix when a pivot magnitude drops below 1e-12.
    """
    return LuFactorization(a).solve(b)


@dataclass
class GmresResult:
    x: np.ndarray
    residual_history: list
    converged: bool
    iterations: int
    iterates: list | None = None


def gmres(
    a: LinearOperator,
    b: np.ndarray,
    x0: np.ndarray | None = None,
    tol: float = 1e-10,
    max_iter: int | None = None,
    record_iterates: bool = False,
) -> GmresResult:
    """Unrestarted GMRes with Arnoldi orthogonalization and Givens updating.

    Stops when ||A x - b||_2 <= tol * ||b||_2. The Givens-rotated residual
    magnitudes give the (non-increasing) residual history without assembling
    intermediate solutions; with `record_iterates` the least-squares solution
    is assembled at every iteration as well.

    Raises Breakdown if Arnoldi produces a zero vector while the residual is
    still above tolerance.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    b = np.asarray(b, dtype=float)
    n = a.dim
    if b.shape != (n,):
        raise ValueError(f"rhs shape {b.shape} does not match operator dim {n}")
    if max_iter is None:
        max_iter = n
    x0 = np.zeros(n) if x0 is None else np.asarray(x0, dtype=float)

    b_norm = np.linalg.norm(b)
    if b_norm == 0.0:
        return GmresResult(np.zeros(n), [0.0], True, 0,
                           [np.zeros(n)] if record_iterates else None)

    r0 = b - a.apply(x0)
    beta = np.linalg.norm(r0)
    history = [beta]
    if beta <= tol * b_norm:
        return GmresResult(x0.copy(), history, True, 0,
                           [x0.copy()] if record_iterates else None)

    m = max_iter
    q = np.zeros((n, m + 1))
    h = np.zeros((m + 1, m))
    cs = np.zeros(m)
    sn = np.zeros(m)
    g = np.zeros(m + 1)
    g[0] = beta
    q[:, 0] = r0 / beta

    def assemble(k: int) -> np.ndarray:
        y = scipy.linalg.solve_triangular(h[:k, :k], g[:k], check_finite=False)
        return x0 + q[:, :k] @ y

    iterates = [] if record_iterates else None
    converged = False
    k = 0
    for k in range(1, m + 1):
        j = k - 1
        w = a.apply(q[:, j])
        for i in range(k):
            h[i, j] = q[:, i] @ w
            w = w - h[i, j] * q[:, i]
        h[k, j] = np.linalg.norm(w)

        happy = h[k, j] < 1e-14 * max(1.0, beta)
        if not happy:
            q[:, k] = w / h[k, j]

        # fold previous rotations into the new column, then add a new one
        for i in range(j):
            tmp = cs[i] * h[i, j] - sn[i] * h[i + 1, j]
            h[i + 1, j] = sn[i] * h[i, j] + cs[i] * h[i + 1, j]
            h[i, j] = tmp
        nu = np.hypot(h[j, j], h[k, j])
        if nu == 0.0:
            raise Breakdown("zero diagonal in Givens update")
        cs[j] = h[j, j] / nu
        sn[j] = -h[k, j] / nu
        h[j, j] = cs[j] * h[j, j] - sn[j] * h[k, j]
        h[k, j] = 0.0
        g[k] = sn[j] * g[j]
        g[j] = cs[j] * g[j]

        resid = abs(g[k])
        history.append(resid)
        if record_iterates:
            iterates.append(assemble(k))
        if resid <= tol * b_norm:
            converged = True
            break
        if happy:
            raise Breakdown(
                f"Arnoldi breakdown at iteration {k} with residual {resid:.3e}"
            )

    x = assemble(k)
    return GmresResult(x, history, converged, k, iterates)


@dataclass(frozen=True)
class PowerIterationResult:
    value: float
    converged: bool
    iterations: int


def power_iteration(
    a: LinearOperator,
    dim: int | None = None,
    tol: float = 1e-9,
    max_iter: int = 5000,
    seed: int = 0,
) -> PowerIterationResult:
    """Estimate the dominant eigenvalue magnitude of `a`.

    The start vector is drawn deterministically from `seed`. Convergence is
    declared when successive Rayleigh-quotient magnitudes agree to `tol`.
    A complex-conjugate dominant pair makes the estimates oscillate; in that
    case the average of the last two estimates is reported unconverged.
    """
    n = a.dim if dim is None else dim
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(n)
    v /= np.linalg.norm(v)
    prev = np.inf
    est = 0.0
    for it in range(1, max_iter + 1):
        w = a.apply(v)
        norm_w = np.linalg.norm(w)
        if norm_w == 0.0:
            return PowerIterationResult(0.0, True, it)
        est = abs(float(v @ w))
        if abs(est - prev) <= tol * max(1.0, est):
            return PowerIterationResult(est, True, it)
        prev = est
        v = w / norm_w
    return PowerIterationResult((est + prev) / 2.0, False, max_iter)


def dense_matrix(rows: Sequence[Sequence[float]]) -> np.ndarray:
    """Build a float64 dense matrix, validating finiteness."""
    a = np.asarray(rows, dtype=float)
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix entries must be finite")
    return a
