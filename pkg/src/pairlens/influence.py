"""Damped-Hessian machinery, positive/negative influence vectors, model
editing, and the Kronecker-factored gradient projection.

The damped curvature operator is H = (d^2/d theta^2) sum-of-batch-losses
+ delta * I at a reference parameter vector. The ridge block delta * I is
always added analytically; only the data term is ever differenced. Two
realizations ship:

* ``dense``: column-wise central differences of the analytic gradient,
  symmetrized, factorized once and reused across solves (p <= 200);
* ``hvp-cg``: matrix-free Hessian-vector products inside conjugate
  gradient, for larger parameter counts.

Influence vectors for a located subset are
pos = -H^{-1} grad(positive_term) and neg = -H^{-1} grad(negative_term);
``edit_params`` applies theta + eps * pos + (zeta - 1) * neg, so full
removal is (eps, zeta) = (-1, 0).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg

from . import jsonio
from .data import BatchSegmentation, PairedDataset, Seg
from .errors import (
    DimensionMismatchError,
    DimensionTooLargeError,
    InvalidConfigError,
    NonFiniteEvaluationError,
)
from .losses import NegVariant, model_gradient, negative_gradient, positive_gradient
from .model import ModelParams
from .numerics import FD_STEP, CgConfig, cg_solve, require_finite

DENSE_LIMIT = 200

HESSIAN_MODES = ("dense", "hvp-cg")


def resolve_mode(mode: str | None, p: int) -> str:
    if mode is None or mode == "auto":
        return "dense" if p <= DENSE_LIMIT else "hvp-cg"
    if mode not in HESSIAN_MODES:
        raise InvalidConfigError(f"unknown hessian mode {mode!r}")
    return mode


@dataclass
class DampedHessianSpec:
    """Reference point plus the way H^{-1} g products are realized."""

    params: ModelParams
    ds: PairedDataset
    seg: BatchSegmentation
    delta: float
    mode: str = "auto"
    hvp_step: float = FD_STEP
    cg: CgConfig = field(default_factory=CgConfig)
    _dense: np.ndarray | None = field(default=None, repr=False)
    _factor: tuple | None = field(default=None, repr=False)

    def __post_init__(self):
        if not self.delta > 0:
            raise InvalidConfigError("influence computations require delta > 0")
        if not self.hvp_step > 0:
            raise InvalidConfigError("hvp_step must be > 0")
        self.mode = resolve_mode(self.mode, self.params.size)

    @property
    def p(self) -> int:
        return self.params.size


@dataclass
class SolveResult:
    x: np.ndarray
    residual: float
    iterations: int
    method: str


@dataclass
class InfluenceVectors:
    pos_if: np.ndarray
    neg_if: np.ndarray
    variant: NegVariant
    residual_pos: float
    residual_neg: float
    delta: float
    iterations_pos: int = 0
    iterations_neg: int = 0

    def combined(self) -> np.ndarray:
        return self.pos_if + self.neg_if

    def to_dict(self) -> dict:
        return {
            "pos_if": self.pos_if,
            "neg_if": self.neg_if,
            "variant": self.variant.value,
            "residual_pos": self.residual_pos,
            "residual_neg": self.residual_neg,
            "delta": self.delta,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "InfluenceVectors":
        return cls(
            pos_if=np.asarray(data["pos_if"], dtype=np.float64),
            neg_if=np.asarray(data["neg_if"], dtype=np.float64),
            variant=NegVariant.parse(data["variant"]),
            residual_pos=float(data["residual_pos"]),
            residual_neg=float(data["residual_neg"]),
            delta=float(data["delta"]),
        )


def _grad_fn(spec: DampedHessianSpec):
    def grad_at(flat: np.ndarray) -> np.ndarray:
        return model_gradient(spec.params.with_flat(flat), spec.ds, spec.seg)
    return grad_at


def hvp(spec: DampedHessianSpec, v: np.ndarray) -> np.ndarray:
    """Damped Hessian-vector product.

    Central difference of the analytic data gradient along v, with step
    h = hvp_step * (1 + |theta|_inf) / |v|_inf, plus delta * v added exactly.
    """
    v = require_finite(np.asarray(v, dtype=np.float64), "direction")
    if v.shape != (spec.p,):
        raise DimensionMismatchError(f"direction has shape {v.shape}, expected ({spec.p},)")
    v_inf = float(np.max(np.abs(v)))
    if v_inf == 0.0:
        raise InvalidConfigError("hvp direction must be nonzero")
    theta = spec.params.flat
    h = spec.hvp_step * (1.0 + float(np.max(np.abs(theta)))) / v_inf
    grad_at = _grad_fn(spec)
    up = grad_at(theta + h * v)
    down = grad_at(theta - h * v)
    if not (np.all(np.isfinite(up)) and np.all(np.isfinite(down))):
        raise NonFiniteEvaluationError("gradient probe returned NaN/Inf")
    return (up - down) / (2.0 * h) + spec.delta * v


def dense_hessian(spec: DampedHessianSpec) -> np.ndarray:
    """Exact-ish dense H: FD of the analytic gradient columnwise, symmetrized
    as (H + H') / 2, plus delta * I added analytically. p <= 200 only."""
    if spec.p > DENSE_LIMIT:
        raise DimensionTooLargeError(
            f"dense Hessian limited to p <= {DENSE_LIMIT}, got {spec.p}")
    if spec._dense is None:
        theta = spec.params.flat
        h = spec.hvp_step * (1.0 + float(np.max(np.abs(theta))))
        grad_at = _grad_fn(spec)
        cols = np.empty((spec.p, spec.p))
        probe = theta.copy()
        for i in range(spec.p):
            probe[i] = theta[i] + h
            up = grad_at(probe)
            probe[i] = theta[i] - h
            down = grad_at(probe)
            probe[i] = theta[i]
            cols[:, i] = (up - down) / (2.0 * h)
        if not np.all(np.isfinite(cols)):
            raise NonFiniteEvaluationError("dense Hessian columns contain NaN/Inf")
        spec._dense = 0.5 * (cols + cols.T) + spec.delta * np.eye(spec.p)
    return spec._dense


def apply_inverse(spec: DampedHessianSpec, rhs: np.ndarray) -> SolveResult:
    """Solve H x = rhs using the spec's realization; residual is verified."""
    rhs = require_finite(np.asarray(rhs, dtype=np.float64), "rhs")
    if rhs.shape != (spec.p,):
        raise DimensionMismatchError(f"rhs has shape {rhs.shape}, expected ({spec.p},)")
    rhs_norm = float(np.linalg.norm(rhs))
    if rhs_norm == 0.0:
        return SolveResult(np.zeros(spec.p), 0.0, 0, spec.mode)
    if spec.mode == "dense":
        hess = dense_hessian(spec)
        if spec._factor is None:
            spec._factor = scipy.linalg.lu_factor(hess)
        x = scipy.linalg.lu_solve(spec._factor, rhs)
        residual = float(np.linalg.norm(hess @ x - rhs)) / rhs_norm
        return SolveResult(x, residual, 1, "dense")
    result = cg_solve(lambda v: hvp(spec, v), rhs, spec.cg)
    return SolveResult(result.x, result.residual, result.iterations, "hvp-cg")


def positive_influence(spec: DampedHessianSpec, subset: Seg) -> tuple[np.ndarray, SolveResult]:
    """-H^{-1} grad(positive_term)."""
    _, grad = positive_gradient(spec.params, spec.ds, spec.seg, subset)
    solve = apply_inverse(spec, grad)
    return -solve.x, solve


def negative_influence(spec: DampedHessianSpec, subset: Seg,
                       variant: NegVariant | str = NegVariant.FIRST_ORDER
                       ) -> tuple[np.ndarray, SolveResult]:
    """-H^{-1} grad(negative_term)."""
    variant = NegVariant.parse(variant)
    _, grad = negative_gradient(spec.params, spec.ds, spec.seg, subset, variant)
    solve = apply_inverse(spec, grad)
    return -solve.x, solve


def influence_vectors(spec: DampedHessianSpec, subset: Seg,
                      variant: NegVariant | str = NegVariant.FIRST_ORDER
                      ) -> InfluenceVectors:
    """Both influence vectors of a located subset, with solver diagnostics."""
    variant = NegVariant.parse(variant)
    pos, pos_solve = positive_influence(spec, subset)
    neg, neg_solve = negative_influence(spec, subset, variant)
    return InfluenceVectors(
        pos_if=pos, neg_if=neg, variant=variant,
        residual_pos=pos_solve.residual, residual_neg=neg_solve.residual,
        delta=spec.delta,
        iterations_pos=pos_solve.iterations, iterations_neg=neg_solve.iterations,
    )


def edit_params(params: ModelParams, iv: InfluenceVectors,
                eps: float, zeta: float) -> ModelParams:
    """theta + eps * pos_if + (zeta - 1) * neg_if.

    (eps, zeta) = (-1, 0) removes the subset's influence; (0, 1) is the
    identity and returns the parameters bit-exactly.
    """
    if eps == 0.0 and zeta == 1.0:
        return params.with_flat(params.flat)
    flat = params.flat + eps * iv.pos_if + (zeta - 1.0) * iv.neg_if
    return params.with_flat(require_finite(flat, "edited parameters"))


# --- Kronecker-factored gradient projection ------------------------------------


@dataclass(frozen=True)
class ProjectionPair:
    """Input-side and output-side projection matrices (rows = target rank)."""

    p_in: np.ndarray
    p_out: np.ndarray

    def __post_init__(self):
        p_in = np.asarray(self.p_in, dtype=np.float64)
        p_out = np.asarray(self.p_out, dtype=np.float64)
        if p_in.ndim != 2 or p_out.ndim != 2:
            raise DimensionMismatchError("projections must be matrices")
        if p_in.shape[0] > p_in.shape[1] or p_out.shape[0] > p_out.shape[1]:
            raise InvalidConfigError("projection rank must not exceed input dim")
        object.__setattr__(self, "p_in", p_in)
        object.__setattr__(self, "p_out", p_out)


def kron_project(inputs, out_grads, proj: ProjectionPair) -> np.ndarray:
    """Project a layer gradient without materializing it.

    A linear layer's loss gradient is sum_t x_t (x) g_t (a sum of Kronecker
    products of forward inputs x_t and backward signals g_t). Applying the
    Kronecker-structured projection P_in (x) P_out to that sum factors as
    sum_t (P_in x_t) (x) (P_out g_t), which never forms the d_in * d_out
    vector.
    """
    inputs = [np.asarray(x, dtype=np.float64).ravel() for x in inputs]
    out_grads = [np.asarray(g, dtype=np.float64).ravel() for g in out_grads]
    if len(inputs) != len(out_grads):
        raise DimensionMismatchError("inputs and out_grads must have equal length")
    if not inputs:
        raise DimensionMismatchError("need at least one (input, grad) pair")
    d_in = proj.p_in.shape[1]
    d_out = proj.p_out.shape[1]
    out = np.zeros(proj.p_in.shape[0] * proj.p_out.shape[0])
    for x, g in zip(inputs, out_grads):
        if x.shape[0] != d_in:
            raise DimensionMismatchError(f"input dim {x.shape[0]} != {d_in}")
        if g.shape[0] != d_out:
            raise DimensionMismatchError(f"grad dim {g.shape[0]} != {d_out}")
        out += np.kron(proj.p_in @ x, proj.p_out @ g)
    return out


# --- serialization ---------------------------------------------------------------


def save_influence(iv: InfluenceVectors, path) -> None:
    jsonio.dump_file(iv.to_dict(), path)


def load_influence(path) -> InfluenceVectors:
    return InfluenceVectors.from_dict(jsonio.load_file(path))
