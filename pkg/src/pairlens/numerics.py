"""Dense linear algebra, deterministic randomness, and numeric oracles.

Everything here is architecture-agnostic: a conjugate-gradient solver for
symmetric systems, central-difference gradients used as test oracles, and a
smallest-eigenvalue routine with a dense path for small dimensions and a
Lanczos path above.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse.linalg

from .errors import (
    InvalidConfigError,
    NegativeCurvatureError,
    NoConvergenceError,
    NonFiniteEvaluationError,
)

EPS = float(np.finfo(np.float64).eps)
#: Central-difference step factor: cbrt(machine epsilon).
FD_STEP = EPS ** (1.0 / 3.0)

DENSE_EIG_LIMIT = 200


def require_finite(arr: np.ndarray, what: str = "array") -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteEvaluationError(f"{what} contains NaN/Inf")
    return arr


@dataclass(frozen=True)
class Rng:
    """Deterministic random stream: same seed and algorithm, same bits."""

    seed: int
    algorithm: str = "pcg64"

    def __post_init__(self):
        if self.algorithm != "pcg64":
            raise InvalidConfigError(f"unknown rng algorithm {self.algorithm!r}")

    def generator(self, *tags: int) -> np.random.Generator:
        """Child generator keyed by integer tags (independent sub-streams)."""
        return np.random.default_rng([int(self.seed)] + [int(t) for t in tags])


@dataclass(frozen=True)
class CgConfig:
    """Conjugate-gradient settings.

    tol is a relative residual threshold; max_iter defaults to 10 * dim;
    extra_damping is added to the operator diagonal as a rescue knob.
    """

    tol: float = 1e-8
    max_iter: int | None = None
    extra_damping: float = 0.0

    def __post_init__(self):
        if not self.tol > 0:
            raise InvalidConfigError("cg tol must be > 0")
        if self.max_iter is not None and self.max_iter < 1:
            raise InvalidConfigError("cg max_iter must be >= 1")
        if self.extra_damping < 0:
            raise InvalidConfigError("cg extra_damping must be >= 0")

    def resolved_max_iter(self, dim: int) -> int:
        return self.max_iter if self.max_iter is not None else 10 * dim


@dataclass
class CgResult:
    x: np.ndarray
    iterations: int
    residual: float  # relative: ||Ax - b|| / ||b||
    converged: bool = True


def cg_solve(
    apply_a: Callable[[np.ndarray], np.ndarray],
    b: np.ndarray,
    cfg: CgConfig | None = None,
) -> CgResult:
    """Solve A x = b for symmetric A given as a matvec.

    Raises NegativeCurvatureError when a search direction has p'Ap <= 0
    (the operator is not positive definite at the damping in use) and
    NoConvergenceError when the iteration budget runs out. The returned
    residual is verified against the true residual, not the recursive one.
    """
    cfg = cfg or CgConfig()
    b = require_finite(b, "rhs")
    dim = b.shape[0]
    max_iter = cfg.resolved_max_iter(dim)

    if cfg.extra_damping > 0:
        inner = apply_a
        damping = cfg.extra_damping

        def apply_a(v, _inner=inner, _d=damping):  # noqa: ANN001
            return _inner(v) + _d * v

    b_norm = float(np.linalg.norm(b))
    if b_norm == 0.0:
        return CgResult(np.zeros(dim), 0, 0.0)

    x = np.zeros(dim)
    r = b.copy()
    p = r.copy()
    rr = float(r @ r)
    target = cfg.tol * b_norm
    iterations = 0
    while iterations < max_iter:
        iterations += 1
        ap = require_finite(apply_a(p), "operator output")
        pap = float(p @ ap)
        if pap <= 0.0:
            raise NegativeCurvatureError(
                f"p'Ap = {pap:.3e} <= 0 at iteration {iterations}; "
                "increase the damping"
            )
        alpha = rr / pap
        x += alpha * p
        r -= alpha * ap
        rr_new = float(r @ r)
        if np.sqrt(rr_new) <= target:
            true_res = float(np.linalg.norm(apply_a(x) - b))
            if true_res <= target:
                return CgResult(x, iterations, true_res / b_norm)
            # recursive residual drifted; restart from the true one
            r = b - apply_a(x)
            rr_new = float(r @ r)
            p = r.copy()
            rr = rr_new
            continue
        p = r + (rr_new / rr) * p
        rr = rr_new

    true_res = float(np.linalg.norm(apply_a(x) - b)) / b_norm
    raise NoConvergenceError(
        f"cg: no convergence in {max_iter} iterations "
        f"(relative residual {true_res:.3e})",
        payload=CgResult(x, iterations, true_res, converged=False),
    )


def default_fd_step(theta: np.ndarray) -> float:
    scale = float(np.max(np.abs(theta))) if theta.size else 0.0
    return FD_STEP * (1.0 + scale)


def finite_diff_grad(
    f: Callable[[np.ndarray], float],
    theta: np.ndarray,
    h: float | None = None,
) -> np.ndarray:
    """Central-difference gradient, one coordinate at a time.

    Test oracle only: O(dim) function evaluations per call. Exact (up to
    roundoff) on polynomials of degree <= 2.
    """
    theta = require_finite(theta, "theta")
    if h is None:
        h = default_fd_step(theta)
    if not h > 0:
        raise InvalidConfigError("finite difference step must be > 0")
    grad = np.zeros_like(theta)
    probe = theta.copy()
    for i in range(theta.shape[0]):
        probe[i] = theta[i] + h
        up = float(f(probe))
        probe[i] = theta[i] - h
        down = float(f(probe))
        probe[i] = theta[i]
        if not (np.isfinite(up) and np.isfinite(down)):
            raise NonFiniteEvaluationError(
                f"non-finite probe at coordinate {i}: f+={up!r} f-={down!r}"
            )
        grad[i] = (up - down) / (2.0 * h)
    return grad


def smallest_eigenvalue(
    apply_a: Callable[[np.ndarray], np.ndarray],
    dim: int,
    dense_limit: int = DENSE_EIG_LIMIT,
) -> float:
    """Smallest eigenvalue of a symmetric operator.

    Dense eigendecomposition for dim <= dense_limit (the operator is
    materialized column by column); Lanczos (ARPACK, shift to the smallest
    algebraic end) above.
    """
    if dim < 1:
        raise InvalidConfigError("dim must be >= 1")
    if dim <= dense_limit:
        mat = materialize(apply_a, dim)
        mat = 0.5 * (mat + mat.T)
        return float(np.linalg.eigvalsh(mat)[0])
    op = scipy.sparse.linalg.LinearOperator((dim, dim), matvec=apply_a)
    try:
        vals = scipy.sparse.linalg.eigsh(
            op, k=1, which="SA", maxiter=50 * dim, return_eigenvectors=False
        )
    except scipy.sparse.linalg.ArpackNoConvergence as exc:
        raise NoConvergenceError(f"lanczos did not converge: {exc}") from exc
    return float(vals[0])


def materialize(apply_a: Callable[[np.ndarray], np.ndarray], dim: int) -> np.ndarray:
    """Apply an operator to the identity, column by column."""
    mat = np.empty((dim, dim))
    e = np.zeros(dim)
    for i in range(dim):
        e[i] = 1.0
        mat[:, i] = apply_a(e)
        e[i] = 0.0
    return mat
