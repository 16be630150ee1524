"""Contrastive batch loss, its per-pair decomposition, and analytic gradients.

The batch loss is a symmetric cross-entropy over a similarity matrix S:
row i is scored text-to-image, column i image-to-text. A subset of pairs
located inside the batches (a :class:`~pairlens.data.Seg`) splits the loss
into two roles:

* the subset's own pairing rows/columns (``positive_term``), and
* its appearances inside other rows' softmax denominators. Down-weighting
  those appearances by a factor zeta (``zeta_weighted_loss``) interpolates
  between the original loss (zeta = 1) and the loss with the subset deleted
  from every denominator (zeta = 0, ``removed_negative_loss``).

``negative_term`` is the per-batch coefficient of that interpolation. Two
orientations ship:

* ``first_order``: the exact d/d(zeta) of the reweighted loss at zeta = 1
  (the softmax probability mass the subset occupies in each outside row and
  column); this is the default, and the only variant consistent with the
  zeta-derivative identity.
* ``ratio``: the reciprocal sum ratio (full denominator over subset share),
  kept for comparison; it is the per-term reciprocal of ``first_order``.

All softmax arithmetic subtracts the row/column max before exponentiating.
Gradients are hand-derived backprop; finite differences are a test oracle
only (O(p) evaluations per probe is unusable inside Hessian work).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .data import BatchSegmentation, PairedDataset, Seg
from .errors import (
    DimensionMismatchError,
    InvalidConfigError,
    InvalidSegError,
    NonPositiveDenominatorError,
)
from .model import ModelParams, batch_backward, batch_forward


class NegVariant(str, enum.Enum):
    FIRST_ORDER = "first_order"
    RATIO = "ratio"

    @classmethod
    def parse(cls, value) -> "NegVariant":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).replace("-", "_"))
        except ValueError:
            raise InvalidConfigError(
                f"unknown negative-term variant {value!r}; "
                f"expected one of {[v.value for v in cls]}") from None


@dataclass
class TermGradient:
    term: str
    value: float
    grad: np.ndarray


# --- similarity-matrix level -----------------------------------------------------


def _as_matrix(s) -> np.ndarray:
    values = getattr(s, "values", s)
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2 or values.shape[0] != values.shape[1]:
        raise DimensionMismatchError("similarity matrix must be square")
    return values


def _lse_reweighted(values: np.ndarray, subset_mask: np.ndarray | None,
                    zeta: float) -> float:
    """log of (sum_j e^{values_j} + (zeta - 1) * sum_{j in subset} e^{values_j}).

    zeta = 1 is the plain log-sum-exp. zeta = 0 is evaluated directly on the
    complement (same bits as a log-sum-exp over the kept entries) instead of
    by subtraction, which would cancel catastrophically.
    """
    if zeta == 0.0 and subset_mask is not None:
        kept = values[~subset_mask]
        m = float(np.max(kept))
        return float(np.log(np.sum(np.exp(kept - m))) + m)
    m = float(np.max(values))
    shifted = np.exp(values - m)
    total = float(np.sum(shifted))
    if zeta != 1.0 and subset_mask is not None:
        total = total + (zeta - 1.0) * float(np.sum(shifted[subset_mask]))
    if not total > 0.0:
        raise NonPositiveDenominatorError(
            f"reweighted denominator {total:.3e} <= 0 at zeta={zeta}")
    return float(np.log(total) + m)


def t2i_row(s, i: int) -> float:
    """Text-to-image loss of row i: -log softmax(S[i, :])_i."""
    values = _as_matrix(s)
    if not 0 <= i < values.shape[0]:
        raise IndexError(f"row {i} out of range for size {values.shape[0]}")
    return -float(values[i, i]) + _lse_reweighted(values[i, :], None, 1.0)


def i2t_col(s, i: int) -> float:
    """Image-to-text loss of column i: -log softmax(S[:, i])_i."""
    values = _as_matrix(s)
    if not 0 <= i < values.shape[0]:
        raise IndexError(f"column {i} out of range for size {values.shape[0]}")
    return -float(values[i, i]) + _lse_reweighted(values[:, i], None, 1.0)


def batch_loss(s) -> float:
    """Symmetric contrastive loss of one batch; equals the sum of
    t2i_row(S, i) + i2t_col(S, i) over all i by construction."""
    values = _as_matrix(s)
    total = 0.0
    for i in range(values.shape[0]):
        total += t2i_row(values, i) + i2t_col(values, i)
    return total


def _softmax_rows(values: np.ndarray) -> np.ndarray:
    shifted = values - values.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _softmax_cols(values: np.ndarray) -> np.ndarray:
    shifted = values - values.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=0, keepdims=True)


def _grad_s_batch(values: np.ndarray) -> np.ndarray:
    """d batch_loss / dS = P_rows + P_cols - 2 I."""
    m = values.shape[0]
    return _softmax_rows(values) + _softmax_cols(values) - 2.0 * np.eye(m)


def _grad_s_positive(values: np.ndarray, positions: np.ndarray) -> np.ndarray:
    g = np.zeros_like(values)
    p_rows = _softmax_rows(values)
    p_cols = _softmax_cols(values)
    for n in positions:
        g[n, :] += p_rows[n, :]
        g[:, n] += p_cols[:, n]
        g[n, n] -= 2.0
    return g


def _neg_masses(values: np.ndarray, subset_mask: np.ndarray):
    """Row/column softmax mass of the subset, for every outside row/column."""
    p_rows = _softmax_rows(values)
    p_cols = _softmax_cols(values)
    row_mass = p_rows[:, subset_mask].sum(axis=1)   # R_k
    col_mass = p_cols[subset_mask, :].sum(axis=0)   # C_k
    return p_rows, p_cols, row_mass, col_mass


def _neg_value(values: np.ndarray, subset_mask: np.ndarray,
               variant: NegVariant) -> float:
    outside = ~subset_mask
    if not np.any(outside):
        return 0.0
    _, _, row_mass, col_mass = _neg_masses(values, subset_mask)
    if variant is NegVariant.FIRST_ORDER:
        return float(row_mass[outside].sum() + col_mass[outside].sum())
    if np.any(row_mass[outside] <= 0.0) or np.any(col_mass[outside] <= 0.0):
        raise NonPositiveDenominatorError("subset softmax mass underflowed to 0")
    return float((1.0 / row_mass[outside]).sum() + (1.0 / col_mass[outside]).sum())


def _grad_s_negative(values: np.ndarray, subset_mask: np.ndarray,
                     variant: NegVariant) -> np.ndarray:
    """dS-gradient of the negative-role coefficient.

    With R_k the subset row mass in row k (outside the subset):
      first_order: d R_k / dS_kj = P[k,j] ([j in subset] - R_k)
      ratio (1/R_k): d/dS_kj = P[k,j] (R_k - [j in subset]) / R_k^2
    and symmetrically for columns.
    """
    g = np.zeros_like(values)
    outside = ~subset_mask
    if not np.any(outside):
        return g
    p_rows, p_cols, row_mass, col_mass = _neg_masses(values, subset_mask)
    ind = subset_mask.astype(np.float64)
    if variant is NegVariant.FIRST_ORDER:
        g[outside, :] += p_rows[outside, :] * (ind[None, :] - row_mass[outside, None])
        g[:, outside] += p_cols[:, outside] * (ind[:, None] - col_mass[None, outside])
    else:
        row_scale = (row_mass[outside, None] - ind[None, :]) / row_mass[outside, None] ** 2
        g[outside, :] += p_rows[outside, :] * row_scale
        col_scale = (col_mass[None, outside] - ind[:, None]) / col_mass[None, outside] ** 2
        g[:, outside] += p_cols[:, outside] * col_scale
    return g


# --- dataset level -----------------------------------------------------------------


def _batch_features(ds: PairedDataset, seg: BatchSegmentation, m: int):
    return ds.features(seg.batches[m])


def _seg_masks(seg: BatchSegmentation, subset: Seg) -> list[tuple[int, np.ndarray]]:
    subset.validate(seg)
    out = []
    for m, positions in subset.entries:
        mask = np.zeros(len(seg.batches[m]), dtype=bool)
        mask[list(positions)] = True
        out.append((m, mask))
    return out


def total_loss(params: ModelParams, ds: PairedDataset, seg: BatchSegmentation,
               delta: float) -> float:
    """Sum of batch losses plus the ridge (delta / 2) |theta|^2.

    The ridge covers every coordinate of theta, including a trainable
    log-temperature.
    """
    if delta < 0:
        raise InvalidConfigError("delta must be >= 0")
    total = 0.5 * delta * float(params.flat @ params.flat)
    for m in range(len(seg.batches)):
        x_t, x_i = _batch_features(ds, seg, m)
        values, _ = batch_forward(params, x_t, x_i)
        total += batch_loss(values)
    return total


def positive_term(params: ModelParams, ds: PairedDataset, seg: BatchSegmentation,
                  subset: Seg) -> float:
    """Sum of the subset's own pairing losses (their rows and columns)."""
    total = 0.0
    for m, mask in _seg_masks(seg, subset):
        x_t, x_i = _batch_features(ds, seg, m)
        values, _ = batch_forward(params, x_t, x_i)
        sub = 0.0
        for n in np.where(mask)[0]:
            sub += t2i_row(values, int(n)) + i2t_col(values, int(n))
        total += sub
    return total


def negative_term(params: ModelParams, ds: PairedDataset, seg: BatchSegmentation,
                  subset: Seg, variant: NegVariant | str = NegVariant.FIRST_ORDER) -> float:
    """Negative-role coefficient of the subset across its batches."""
    variant = NegVariant.parse(variant)
    total = 0.0
    for m, mask in _seg_masks(seg, subset):
        if not mask.any():
            if variant is NegVariant.RATIO:
                raise InvalidSegError(f"batch {m}: empty index set for ratio variant")
            continue
        x_t, x_i = _batch_features(ds, seg, m)
        values, _ = batch_forward(params, x_t, x_i)
        total += _neg_value(values, mask, variant)
    return total


def zeta_weighted_loss(params: ModelParams, ds: PairedDataset, seg: BatchSegmentation,
                       subset: Seg, zeta: float) -> float:
    """Touched-batch loss with the subset's negative-sample share scaled by zeta.

    Outside rows/columns get denominators sum_j e^{S} + (zeta - 1) * subset
    share; the subset's own pairing losses are kept unchanged. zeta = 1
    reproduces the plain per-batch losses bit-exactly, zeta = 0 reproduces
    removed_negative_loss bit-exactly. Values of zeta slightly above 1 are
    allowed for derivative probes.
    """
    if zeta < 0:
        raise InvalidConfigError("zeta must be >= 0")
    total = 0.0
    for m, mask in _seg_masks(seg, subset):
        x_t, x_i = _batch_features(ds, seg, m)
        values, _ = batch_forward(params, x_t, x_i)
        total += _reweighted_batch_value(values, mask, zeta)
    return total


def _reweighted_batch_value(values: np.ndarray, mask: np.ndarray, zeta: float) -> float:
    # accumulation mirrors batch_loss term by term so that zeta = 1
    # reproduces it bit-exactly
    sub = 0.0
    for i in range(values.shape[0]):
        if mask[i]:
            sub += t2i_row(values, i) + i2t_col(values, i)
        else:
            row = (-float(values[i, i])) + _lse_reweighted(values[i, :], mask, zeta)
            col = (-float(values[i, i])) + _lse_reweighted(values[:, i], mask, zeta)
            sub += row + col
    return sub


def removed_negative_loss(params: ModelParams, ds: PairedDataset,
                          seg: BatchSegmentation, subset: Seg) -> float:
    """Touched-batch loss with the subset absent from every denominator in
    which it appears as a negative; pairing losses of the subset are kept."""
    total = 0.0
    for m, mask in _seg_masks(seg, subset):
        x_t, x_i = _batch_features(ds, seg, m)
        values, _ = batch_forward(params, x_t, x_i)
        total += _reweighted_batch_value(values, mask, 0.0)
    return total


# --- gradients -------------------------------------------------------------------


def total_loss_and_gradient(params: ModelParams, ds: PairedDataset,
                            seg: BatchSegmentation, delta: float) -> tuple[float, np.ndarray]:
    """One fused forward/backward pass over all batches, ridge included."""
    if delta < 0:
        raise InvalidConfigError("delta must be >= 0")
    value = 0.5 * delta * float(params.flat @ params.flat)
    grad = delta * params.flat.copy()
    for m in range(len(seg.batches)):
        x_t, x_i = _batch_features(ds, seg, m)
        values, cache = batch_forward(params, x_t, x_i)
        value += batch_loss(values)
        batch_backward(params, cache, _grad_s_batch(values), grad)
    return value, grad


def model_gradient(params: ModelParams, ds: PairedDataset,
                   seg: BatchSegmentation) -> np.ndarray:
    """Gradient of the batch-loss sum alone (no ridge)."""
    grad = np.zeros(params.size)
    for m in range(len(seg.batches)):
        x_t, x_i = _batch_features(ds, seg, m)
        values, cache = batch_forward(params, x_t, x_i)
        batch_backward(params, cache, _grad_s_batch(values), grad)
    return grad


def positive_gradient(params: ModelParams, ds: PairedDataset, seg: BatchSegmentation,
                      subset: Seg) -> tuple[float, np.ndarray]:
    value = 0.0
    grad = np.zeros(params.size)
    for m, mask in _seg_masks(seg, subset):
        x_t, x_i = _batch_features(ds, seg, m)
        values, cache = batch_forward(params, x_t, x_i)
        positions = np.where(mask)[0]
        for n in positions:
            value += t2i_row(values, int(n)) + i2t_col(values, int(n))
        batch_backward(params, cache, _grad_s_positive(values, positions), grad)
    return value, grad


def negative_gradient(params: ModelParams, ds: PairedDataset, seg: BatchSegmentation,
                      subset: Seg, variant: NegVariant | str = NegVariant.FIRST_ORDER
                      ) -> tuple[float, np.ndarray]:
    variant = NegVariant.parse(variant)
    value = 0.0
    grad = np.zeros(params.size)
    for m, mask in _seg_masks(seg, subset):
        if not mask.any():
            if variant is NegVariant.RATIO:
                raise InvalidSegError(f"batch {m}: empty index set for ratio variant")
            continue
        x_t, x_i = _batch_features(ds, seg, m)
        values, cache = batch_forward(params, x_t, x_i)
        value += _neg_value(values, mask, variant)
        batch_backward(params, cache, _grad_s_negative(values, mask, variant), grad)
    return value, grad


def term_gradient(params: ModelParams, ds: PairedDataset, seg: BatchSegmentation,
                  term: str, subset: Seg | None = None, delta: float = 0.0,
                  variant: NegVariant | str = NegVariant.FIRST_ORDER) -> TermGradient:
    """Analytic gradient of one loss term.

    term is "total" (needs delta), "positive" or "negative" (need subset).
    """
    if term == "total":
        value, grad = total_loss_and_gradient(params, ds, seg, delta)
        return TermGradient(term="total", value=value, grad=grad)
    if subset is None:
        raise InvalidSegError(f"term {term!r} needs a located subset")
    if term == "positive":
        value, grad = positive_gradient(params, ds, seg, subset)
        return TermGradient(term="positive", value=value, grad=grad)
    if term == "negative":
        variant = NegVariant.parse(variant)
        value, grad = negative_gradient(params, ds, seg, subset, variant)
        return TermGradient(term=f"negative({variant.value})", value=value, grad=grad)
    raise InvalidConfigError(f"unknown term {term!r}")
