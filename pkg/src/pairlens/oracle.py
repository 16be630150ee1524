"""Deterministic training, ground-truth retraining, the one-step Newton
baseline, and the approximation-error machinery.

Convergence and the scale gauge
-------------------------------

With linear encoders and cosine similarity, rescaling all text-side (or all
image-side) tensors by c > 0 leaves every similarity, hence the whole data
loss, unchanged. The ridge then has no stationary point at positive scale:
the raw gradient keeps a radial component delta * |block| that only vanishes
as the weights collapse to zero, where the cosine model degenerates. The
scale is therefore treated as a gauge freedom: training fixes each
scale-invariant block on its starting sphere (gradient projected onto the
tangent space, iterates renormalized after every step) and convergence is
declared on the projected gradient norm. The ridge is constant on that
slice, so it influences the curvature operator (delta * I damping) exactly
as elsewhere, without dragging the scale. Architectures without the gauge
(tanh encoders) train unconstrained and use the plain gradient norm.

The descent direction defaults to a limited-memory quasi-Newton two-loop
("lbfgs") with Armijo backtracking; plain steepest descent ("gd") is
available but needs vastly more iterations on these ill-conditioned
landscapes (embedding-norm spreads put the data-curvature span at 1e4 or
more). The line search additionally accepts steps whose loss change is
below float64 resolution when they strictly shrink the gradient, which is
what allows gradient norms near 1e-7 on losses of order 1e2.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import BatchSegmentation, PairedDataset, Seg, locate
from .errors import (
    DimensionMismatchError,
    DimensionTooLargeError,
    InvalidConfigError,
    NoConvergenceError,
    NonFiniteEvaluationError,
    PairlensError,
    SingularDenominatorError,
)
from .influence import DENSE_LIMIT, DampedHessianSpec, apply_inverse
from .losses import (
    NegVariant,
    model_gradient,
    negative_gradient,
    positive_gradient,
    total_loss_and_gradient,
)
from .model import EncoderConfig, ModelParams, init_params, layout_for, scale_gauge_blocks
from .numerics import FD_STEP, Rng, materialize, smallest_eigenvalue

OPT_METHODS = ("lbfgs", "gd")
GAUGE_MODES = ("auto", "fix", "off")


@dataclass(frozen=True)
class TrainConfig:
    """Full-batch deterministic optimization settings."""

    delta: float = 1.0
    grad_tol: float = 1e-7
    max_iters: int = 4000
    seed: int = 0
    init_scale: float = 0.1
    method: str = "lbfgs"
    memory: int = 20
    backtrack: float = 0.5
    sufficient_decrease: float = 1e-4
    max_line_search: int = 30
    gauge: str = "auto"

    def __post_init__(self):
        if not self.delta > 0:
            raise InvalidConfigError("delta must be > 0")
        if not self.grad_tol > 0:
            raise InvalidConfigError("grad_tol must be > 0")
        if self.max_iters < 1:
            raise InvalidConfigError("max_iters must be >= 1")
        if self.method not in OPT_METHODS:
            raise InvalidConfigError(f"unknown method {self.method!r}")
        if not 0 < self.backtrack < 1:
            raise InvalidConfigError("backtrack factor must be in (0, 1)")
        if not 0 < self.sufficient_decrease < 1:
            raise InvalidConfigError("sufficient_decrease must be in (0, 1)")
        if self.gauge not in GAUGE_MODES:
            raise InvalidConfigError(f"unknown gauge mode {self.gauge!r}")

    def to_dict(self) -> dict:
        return {
            "delta": self.delta, "grad_tol": self.grad_tol,
            "max_iters": self.max_iters, "seed": self.seed,
            "init_scale": self.init_scale, "method": self.method,
            "memory": self.memory, "backtrack": self.backtrack,
            "sufficient_decrease": self.sufficient_decrease,
            "max_line_search": self.max_line_search, "gauge": self.gauge,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        return cls(**{k: data[k] for k in cls().to_dict() if k in data})


@dataclass
class TrainResult:
    params: ModelParams
    iterations: int
    grad_norm: float
    loss: float
    converged: bool
    evaluations: int
    gauge_fixed: bool


class _GaugeSlice:
    """Index spans of the scale-invariant blocks, with their target norms."""

    def __init__(self, cfg: EncoderConfig, reference: np.ndarray, enabled: bool):
        layout = layout_for(cfg)
        self.blocks: list[np.ndarray] = []
        self.norms: list[float] = []
        if enabled:
            for names in scale_gauge_blocks(cfg):
                idx = np.concatenate([
                    np.arange(*layout.slot(name)[1:]) for name in names
                ])
                norm = float(np.linalg.norm(reference[idx]))
                if norm <= 0.0:
                    raise InvalidConfigError(
                        "gauge-fixed training needs nonzero starting blocks")
                self.blocks.append(idx)
                self.norms.append(norm)

    @property
    def active(self) -> bool:
        return bool(self.blocks)

    def project(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if not self.blocks:
            return grad
        out = grad.copy()
        for idx in self.blocks:
            w = theta[idx]
            out[idx] -= (out[idx] @ w) / (w @ w) * w
        return out

    def retract(self, theta: np.ndarray) -> np.ndarray:
        if not self.blocks:
            return theta
        out = theta.copy()
        for idx, norm in zip(self.blocks, self.norms):
            current = float(np.linalg.norm(out[idx]))
            if current <= 0.0:
                raise NonFiniteEvaluationError("gauge block collapsed to zero")
            out[idx] *= norm / current
        return out


def _minimize(value_and_grad, theta0: np.ndarray, cfg: TrainConfig,
              gauge: _GaugeSlice) -> tuple[np.ndarray, int, float, float, bool, int]:
    """Shared descent loop; returns (theta, iters, grad_norm, loss, ok, evals)."""

    def guarded(flat: np.ndarray):
        try:
            value, grad = value_and_grad(flat)
        except (PairlensError, FloatingPointError):
            return math.inf, None
        if not (np.isfinite(value) and np.all(np.isfinite(grad))):
            return math.inf, None
        return float(value), grad

    theta = gauge.retract(theta0.copy())
    loss, grad = guarded(theta)
    evals = 1
    if grad is None:
        raise InvalidConfigError("objective not evaluable at the starting point")
    grad_proj = gauge.project(theta, grad)
    mem_s: list[np.ndarray] = []
    mem_y: list[np.ndarray] = []
    gd_step = 1.0
    consecutive_failures = 0

    for iteration in range(cfg.max_iters):
        grad_norm = float(np.linalg.norm(grad_proj))
        if grad_norm <= cfg.grad_tol:
            return theta, iteration, grad_norm, loss, True, evals

        if cfg.method == "lbfgs":
            q = grad_proj.copy()
            alphas = []
            for s, y in zip(reversed(mem_s), reversed(mem_y)):
                a = (s @ q) / (y @ s)
                q -= a * y
                alphas.append(a)
            if mem_y:
                q *= (mem_s[-1] @ mem_y[-1]) / (mem_y[-1] @ mem_y[-1])
            for (s, y), a in zip(zip(mem_s, mem_y), reversed(alphas)):
                q += (a - (y @ q) / (y @ s)) * s
            direction = -q
            slope = float(direction @ grad_proj)
            if slope >= 0.0:
                mem_s.clear()
                mem_y.clear()
                direction = -grad_proj
                slope = -grad_norm * grad_norm
            step = 1.0
        else:
            direction = -grad_proj
            slope = -grad_norm * grad_norm
            step = gd_step

        accepted = False
        flat_tol = 8.0 * np.finfo(np.float64).eps * (1.0 + abs(loss))
        for _ in range(cfg.max_line_search):
            trial = gauge.retract(theta + step * direction)
            trial_loss, trial_grad = guarded(trial)
            evals += 1
            if trial_grad is not None:
                if trial_loss <= loss + cfg.sufficient_decrease * step * slope:
                    accepted = True
                    break
                # loss change below float64 resolution: accept on strict
                # gradient decrease so the iteration can grind to the floor
                if abs(trial_loss - loss) <= flat_tol:
                    trial_proj = gauge.project(trial, trial_grad)
                    if float(np.linalg.norm(trial_proj)) <= 0.99 * grad_norm:
                        accepted = True
                        break
            step *= cfg.backtrack

        if not accepted:
            consecutive_failures += 1
            mem_s.clear()
            mem_y.clear()
            if consecutive_failures >= 2:
                return theta, iteration, grad_norm, loss, grad_norm <= cfg.grad_tol, evals
            continue
        consecutive_failures = 0
        if cfg.method == "gd":
            gd_step = min(step * 2.0, 1e6)

        trial_proj = gauge.project(trial, trial_grad)
        s_vec = trial - theta
        y_vec = trial_proj - grad_proj
        sy = float(s_vec @ y_vec)
        if sy > 1e-10 * float(np.linalg.norm(s_vec)) * float(np.linalg.norm(y_vec)):
            mem_s.append(s_vec)
            mem_y.append(y_vec)
            if len(mem_s) > cfg.memory:
                mem_s.pop(0)
                mem_y.pop(0)
        theta, loss, grad, grad_proj = trial, trial_loss, trial_grad, trial_proj

    grad_norm = float(np.linalg.norm(grad_proj))
    return theta, cfg.max_iters, grad_norm, loss, grad_norm <= cfg.grad_tol, evals


def _resolve_gauge(cfg: TrainConfig, model_cfg: EncoderConfig,
                   seg: BatchSegmentation) -> bool:
    if cfg.gauge == "off":
        return False
    has_blocks = bool(scale_gauge_blocks(model_cfg))
    if cfg.gauge == "fix":
        if not has_blocks:
            raise InvalidConfigError("gauge=fix needs a scale-invariant architecture")
        return True
    return has_blocks and len(seg.batches) > 0


def train(ds: PairedDataset, seg: BatchSegmentation, model_cfg: EncoderConfig,
          cfg: TrainConfig, warm_start: ModelParams | None = None) -> TrainResult:
    """Minimize the ridged contrastive loss; deterministic in (seed, config).

    Raises NoConvergenceError with the best iterate as payload when the
    iteration budget runs out (or no further descent step exists) above
    grad_tol.
    """
    if warm_start is not None:
        theta0 = warm_start.flat.copy()
        reference = init_params(model_cfg, cfg.seed, cfg.init_scale)
        if theta0.shape != reference.flat.shape:
            raise DimensionMismatchError("warm start does not match the layout")
    else:
        theta0 = init_params(model_cfg, cfg.seed, cfg.init_scale).flat.copy()
    template = init_params(model_cfg, cfg.seed, cfg.init_scale)

    def objective(flat: np.ndarray):
        return total_loss_and_gradient(template.with_flat(flat), ds, seg, cfg.delta)

    gauge = _GaugeSlice(model_cfg, theta0, _resolve_gauge(cfg, model_cfg, seg))
    theta, iters, grad_norm, loss, ok, evals = _minimize(objective, theta0, cfg, gauge)
    result = TrainResult(params=template.with_flat(theta), iterations=iters,
                         grad_norm=grad_norm, loss=loss, converged=ok,
                         evaluations=evals, gauge_fixed=gauge.active)
    if not ok:
        raise NoConvergenceError(
            f"training stopped at gradient norm {grad_norm:.3e} "
            f"(tol {cfg.grad_tol:g}) after {iters} iterations",
            payload=result)
    return result


RETRAIN_MODES = ("exact_removal", "surrogate")


def retrain_removed(ds: PairedDataset, removed_ids, seg: BatchSegmentation,
                    model_cfg: EncoderConfig, cfg: TrainConfig,
                    mode: str = "exact_removal",
                    variant: NegVariant | str = NegVariant.FIRST_ORDER,
                    warm_start: ModelParams | None = None) -> TrainResult:
    """Ground-truth retraining after removing a subset.

    exact_removal deletes the pairs from their batches (batches shrink in
    place, a batch left with < 2 pairs merges into its neighbor) and trains
    the plain objective. surrogate keeps the batches and trains the
    linearized removal objective: total loss minus the subset's pairing
    share minus its negative-role coefficient.
    """
    removed = sorted(int(i) for i in removed_ids)
    if mode not in RETRAIN_MODES:
        raise InvalidConfigError(f"unknown retrain mode {mode!r}")
    if mode == "exact_removal":
        shrunk = seg.drop_ids(removed)
        return train(ds, shrunk, model_cfg, cfg, warm_start=warm_start)

    subset = locate(ds, seg, removed)
    variant = NegVariant.parse(variant)
    template = init_params(model_cfg, cfg.seed, cfg.init_scale)

    def objective(flat: np.ndarray):
        params = template.with_flat(flat)
        value, grad = total_loss_and_gradient(params, ds, seg, cfg.delta)
        if removed:
            pos_value, pos_grad = positive_gradient(params, ds, seg, subset)
            neg_value, neg_grad = negative_gradient(params, ds, seg, subset, variant)
            value -= pos_value + neg_value
            grad -= pos_grad + neg_grad
        return value, grad

    theta0 = (warm_start.flat.copy() if warm_start is not None
              else template.flat.copy())
    gauge = _GaugeSlice(model_cfg, theta0, _resolve_gauge(cfg, model_cfg, seg))
    theta, iters, grad_norm, loss, ok, evals = _minimize(objective, theta0, cfg, gauge)
    result = TrainResult(params=template.with_flat(theta), iterations=iters,
                         grad_norm=grad_norm, loss=loss, converged=ok,
                         evaluations=evals, gauge_fixed=gauge.active)
    if not ok:
        raise NoConvergenceError(
            f"surrogate retraining stopped at gradient norm {grad_norm:.3e}",
            payload=result)
    return result


# --- one-step Newton ---------------------------------------------------------


def newton_step(params: ModelParams, ds: PairedDataset, seg: BatchSegmentation,
                subset: Seg, delta: float,
                variant: NegVariant | str = NegVariant.FIRST_ORDER,
                hvp_step: float = FD_STEP) -> ModelParams:
    """Single damped-Newton update toward the removed-subset optimum.

    Solves (H_minus + delta I) step = grad(L') where L' is the removed
    share (pairing + negative-role terms) and H_minus is the data curvature
    of the loss with that share subtracted; returns theta + step. With the
    removed share's gradient zero this is exactly the identity.
    """
    if not delta > 0:
        raise InvalidConfigError("newton step requires delta > 0")
    variant = NegVariant.parse(variant)
    p = params.size
    if p > DENSE_LIMIT:
        raise DimensionTooLargeError(f"newton_step dense path needs p <= {DENSE_LIMIT}")
    _, pos_grad = positive_gradient(params, ds, seg, subset)
    _, neg_grad = negative_gradient(params, ds, seg, subset, variant)
    removed_grad = pos_grad + neg_grad
    if float(np.linalg.norm(removed_grad)) == 0.0:
        return params.with_flat(params.flat)

    def minus_gradient(flat: np.ndarray) -> np.ndarray:
        probe = params.with_flat(flat)
        grad = model_gradient(probe, ds, seg)
        _, pg = positive_gradient(probe, ds, seg, subset)
        _, ng = negative_gradient(probe, ds, seg, subset, variant)
        return grad - pg - ng

    theta = params.flat
    h = hvp_step * (1.0 + float(np.max(np.abs(theta))))
    cols = np.empty((p, p))
    probe = theta.copy()
    for i in range(p):
        probe[i] = theta[i] + h
        up = minus_gradient(probe)
        probe[i] = theta[i] - h
        down = minus_gradient(probe)
        probe[i] = theta[i]
        cols[:, i] = (up - down) / (2.0 * h)
    hess = 0.5 * (cols + cols.T) + delta * np.eye(p)
    step = np.linalg.solve(hess, removed_grad)
    return params.with_flat(theta + step)


# --- error reporting -----------------------------------------------------------


def _cosine_between(a: np.ndarray, b: np.ndarray) -> float:
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 and nb == 0.0:
        return 1.0  # identical (zero) deltas by convention
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(a @ b) / (na * nb)


@dataclass
class ErrorReport:
    """Distances and alignments between predicted and actual edits."""

    headline_exact: float       # |theta_if - theta_retrain_exact|
    headline_surrogate: float   # |theta_if - theta_retrain_surrogate|
    err_newton_actual_exact: float
    err_newton_actual_surrogate: float
    err_newton_if: float        # |theta_if - theta_newton|
    delta_if_norm: float
    delta_retrain_exact_norm: float
    delta_retrain_surrogate_norm: float
    delta_newton_norm: float
    cos_if_exact: float
    cos_if_surrogate: float
    cos_newton_exact: float
    cos_newton_surrogate: float
    relative_exact: float       # headline_exact / |retrain_exact - theta_hat|
    relative_surrogate: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def error_report(theta_hat: np.ndarray, theta_if: np.ndarray,
                 theta_retrain_exact: np.ndarray,
                 theta_retrain_surrogate: np.ndarray,
                 theta_newton: np.ndarray) -> ErrorReport:
    arrays = [np.asarray(a, dtype=np.float64) for a in (
        theta_hat, theta_if, theta_retrain_exact, theta_retrain_surrogate,
        theta_newton)]
    shapes = {a.shape for a in arrays}
    if len(shapes) != 1:
        raise DimensionMismatchError(f"parameter vectors differ in shape: {shapes}")
    hat, t_if, t_exact, t_surr, t_newton = arrays
    d_if = t_if - hat
    d_exact = t_exact - hat
    d_surr = t_surr - hat
    d_newton = t_newton - hat

    def safe_ratio(num: float, den: float) -> float:
        return num / den if den > 0.0 else (0.0 if num == 0.0 else math.inf)

    return ErrorReport(
        headline_exact=float(np.linalg.norm(t_if - t_exact)),
        headline_surrogate=float(np.linalg.norm(t_if - t_surr)),
        err_newton_actual_exact=float(np.linalg.norm(t_newton - t_exact)),
        err_newton_actual_surrogate=float(np.linalg.norm(t_newton - t_surr)),
        err_newton_if=float(np.linalg.norm(t_if - t_newton)),
        delta_if_norm=float(np.linalg.norm(d_if)),
        delta_retrain_exact_norm=float(np.linalg.norm(d_exact)),
        delta_retrain_surrogate_norm=float(np.linalg.norm(d_surr)),
        delta_newton_norm=float(np.linalg.norm(d_newton)),
        cos_if_exact=_cosine_between(d_if, d_exact),
        cos_if_surrogate=_cosine_between(d_if, d_surr),
        cos_newton_exact=_cosine_between(d_newton, d_exact),
        cos_newton_surrogate=_cosine_between(d_newton, d_surr),
        relative_exact=safe_ratio(float(np.linalg.norm(t_if - t_exact)),
                                  float(np.linalg.norm(d_exact))),
        relative_surrogate=safe_ratio(float(np.linalg.norm(t_if - t_surr)),
                                      float(np.linalg.norm(d_surr))),
    )


# --- error-bound constants ---------------------------------------------------------


@dataclass
class BoundConstants:
    """Empirical constants feeding the removal-error bound.

    The curvature-Lipschitz constants are sampled lower estimates, not
    certified bounds; the sigma values are the smallest eigenvalues of the
    (un-damped) data curvature and may be negative on a nonconvex instance.
    """

    c_l_prime: float
    c_h: float
    c_h_prime: float
    sigma_min: float
    sigma_min_prime: float
    delta: float
    n_removed: int
    n_batches: int

    @property
    def c_h_minus(self) -> float:
        return self.n_batches * self.c_h + self.n_removed * self.c_h_prime

    def to_dict(self) -> dict:
        data = dict(self.__dict__)
        data["c_h_minus"] = self.c_h_minus
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "BoundConstants":
        return cls(
            c_l_prime=float(data["c_l_prime"]), c_h=float(data["c_h"]),
            c_h_prime=float(data["c_h_prime"]), sigma_min=float(data["sigma_min"]),
            sigma_min_prime=float(data["sigma_min_prime"]),
            delta=float(data["delta"]), n_removed=int(data["n_removed"]),
            n_batches=int(data["n_batches"]),
        )


def bound_eval(bc: BoundConstants) -> float:
    """Evaluate the removal-error upper-bound formula at the given constants.

    bound = C'_H C_H^- n^2 C'_L^2 / (2 (sigma' + delta)^3)
          + |(2 delta + sigma + sigma') / ((delta + sigma')(delta + sigma))|
            * C'_L n
    """
    den_prime = bc.delta + bc.sigma_min_prime
    den = bc.delta + bc.sigma_min
    if den_prime <= 0.0 or den <= 0.0:
        raise SingularDenominatorError(
            f"delta + sigma terms must be positive, got {den:.3e}, {den_prime:.3e}")
    n = float(bc.n_removed)
    first = (bc.c_h_prime * bc.c_h_minus * n * n * bc.c_l_prime ** 2
             / (2.0 * den_prime ** 3))
    second = abs((2.0 * bc.delta + bc.sigma_min + bc.sigma_min_prime)
                 / (den_prime * den)) * bc.c_l_prime * n
    return first + second


def _dense_sym_from_grad(grad_fn, theta: np.ndarray, h: float) -> np.ndarray:
    p = theta.shape[0]
    cols = np.empty((p, p))
    probe = theta.copy()
    for i in range(p):
        probe[i] = theta[i] + h
        up = grad_fn(probe)
        probe[i] = theta[i] - h
        down = grad_fn(probe)
        probe[i] = theta[i]
        cols[:, i] = (up - down) / (2.0 * h)
    return 0.5 * (cols + cols.T)


def hessian_lipschitz_estimate(grad_fn, theta: np.ndarray, probes: int,
                               radius: float, rng: np.random.Generator,
                               fd_step: float = FD_STEP) -> float:
    """max over sampled probe pairs of |H(t1) - H(t2)|_2 / |t1 - t2|.

    A lower estimate of the true Lipschitz constant (a max over a sample,
    never certified). Probes are drawn sequentially, so growing the probe
    count only adds candidates and the estimate is monotone in it.
    """
    if probes < 2:
        raise InvalidConfigError("need at least 2 probes")
    if radius <= 0:
        raise InvalidConfigError("radius must be > 0")
    h = fd_step * (1.0 + float(np.max(np.abs(theta))))
    points = []
    for _ in range(probes):
        z = rng.standard_normal(theta.shape[0])
        points.append(theta + radius * z / float(np.linalg.norm(z)))
    hessians = [_dense_sym_from_grad(grad_fn, point, h) for point in points]
    best = 0.0
    for i in range(probes):
        for j in range(i + 1, probes):
            gap = float(np.linalg.norm(points[i] - points[j]))
            if gap == 0.0:
                continue
            diff = float(np.linalg.norm(hessians[i] - hessians[j], 2))
            best = max(best, diff / gap)
    return best


def estimate_constants(params: ModelParams, ds: PairedDataset, removed_ids,
                       seg: BatchSegmentation, delta: float, probes: int = 3,
                       radius: float = 1e-2, seed: int = 0,
                       variant: NegVariant | str = NegVariant.FIRST_ORDER,
                       fd_step: float = FD_STEP) -> BoundConstants:
    """Sample-based constants for bound_eval at the given reference point.

    C'_L is the exact max over removed pairs of their removed-share gradient
    norm; the sigma values come from dense eigendecompositions (p <= 200);
    the Lipschitz constants are sampled estimates per batch / per removed
    pair within `radius` of the reference.
    """
    variant = NegVariant.parse(variant)
    removed = sorted(int(i) for i in removed_ids)
    p = params.size
    if p > DENSE_LIMIT:
        raise DimensionTooLargeError(f"estimate_constants needs p <= {DENSE_LIMIT}")
    rng = Rng(seed).generator(4)
    theta = params.flat

    # exact max of the per-pair removed-share gradient norm
    c_l_prime = 0.0
    for pair_id in removed:
        single = locate(ds, seg, [pair_id])
        _, pg = positive_gradient(params, ds, seg, single)
        _, ng = negative_gradient(params, ds, seg, single, variant)
        c_l_prime = max(c_l_prime, float(np.linalg.norm(pg + ng)))

    subset = locate(ds, seg, removed) if removed else Seg(entries=())

    def data_grad(flat: np.ndarray) -> np.ndarray:
        return model_gradient(params.with_flat(flat), ds, seg)

    def minus_grad(flat: np.ndarray) -> np.ndarray:
        probe = params.with_flat(flat)
        grad = model_gradient(probe, ds, seg)
        if removed:
            _, pg = positive_gradient(probe, ds, seg, subset)
            _, ng = negative_gradient(probe, ds, seg, subset, variant)
            grad = grad - pg - ng
        return grad

    h = fd_step * (1.0 + float(np.max(np.abs(theta))))
    sigma_min = float(np.linalg.eigvalsh(_dense_sym_from_grad(data_grad, theta, h))[0])
    sigma_min_prime = float(np.linalg.eigvalsh(_dense_sym_from_grad(minus_grad, theta, h))[0])

    # per-batch and per-removed-pair curvature-Lipschitz estimates
    c_h = 0.0
    for m in range(len(seg.batches)):
        single_seg = BatchSegmentation(batches=(seg.batches[m],))

        def batch_grad(flat: np.ndarray, _seg=single_seg) -> np.ndarray:
            return model_gradient(params.with_flat(flat), ds, _seg)

        c_h = max(c_h, hessian_lipschitz_estimate(
            batch_grad, theta, probes, radius, rng, fd_step))

    c_h_prime = 0.0
    for pair_id in removed:
        single = locate(ds, seg, [pair_id])

        def pair_grad(flat: np.ndarray, _sub=single) -> np.ndarray:
            probe = params.with_flat(flat)
            _, pg = positive_gradient(probe, ds, seg, _sub)
            _, ng = negative_gradient(probe, ds, seg, _sub, variant)
            return pg + ng

        c_h_prime = max(c_h_prime, hessian_lipschitz_estimate(
            pair_grad, theta, probes, radius, rng, fd_step))

    return BoundConstants(
        c_l_prime=c_l_prime, c_h=c_h, c_h_prime=c_h_prime,
        sigma_min=sigma_min, sigma_min_prime=sigma_min_prime,
        delta=float(delta), n_removed=len(removed), n_batches=len(seg.batches),
    )
