"""Influence scores built on the positive/negative influence vectors.

Three scores per evaluated subset (usually a single training pair):

* task-related: first-order prediction of how a held-out set's contrastive
  loss changes if the subset is removed. The sign convention is fixed as
  score = -C' (pos_if + neg_if), where C is the held-out loss gradient, so
  positive means removal raises the held-out loss (the data was valuable)
  and negative means removal lowers it (the data was harmful).
* self: the same contraction where C is the averaged gradient of the pair's
  own negative log-cosine alignment.
* relative: norm-constrained magnitude used for trace-back, the projection
  of C onto span{pos_if, neg_if} (see relative_is for the degenerate cases).
"""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass

import numpy as np

from . import jsonio
from .data import BatchSegmentation, PairedDataset
from .errors import (
    DimensionMismatchError,
    MixedKindsError,
    NonPositiveCosineError,
    SingletonTestBatchError,
    ZeroTestGradientError,
)
from .losses import NegVariant, _grad_s_batch, batch_loss
from .model import ModelParams, batch_backward, batch_forward

TASK_SIGN_CONVENTION = "positive=removal_raises_test_loss"
RELATIVE_SIGN_CONVENTION = "nonnegative_magnitude"

SCORE_KINDS = ("task_is", "self_is", "relative_is")


@dataclass(frozen=True)
class ScoreRecord:
    pair_id: int
    score: float
    kind: str
    sign_convention: str
    variant: str
    test_set: str = ""

    def __post_init__(self):
        if self.kind not in SCORE_KINDS:
            raise MixedKindsError(f"unknown score kind {self.kind!r}")
        if self.kind == "relative_is" and self.score < 0:
            raise ValueError("relative score must be nonnegative")


def test_gradient_batch(params: ModelParams, test_ds: PairedDataset,
                        seg: BatchSegmentation | None = None) -> np.ndarray:
    """Gradient of the summed contrastive loss of the test batches.

    Without an explicit segmentation the whole test set forms one batch.
    Batches of one pair are rejected: a singleton batch has identically zero
    loss and gradient, so it would silently contribute nothing.
    """
    if len(test_ds) == 0:
        return np.zeros(params.size)
    if seg is None:
        seg = BatchSegmentation(batches=(tuple(test_ds.ids),))
    grad = np.zeros(params.size)
    for batch in seg.batches:
        if len(batch) < 2:
            raise SingletonTestBatchError(
                f"test batch {list(batch)} has fewer than 2 pairs")
        x_t, x_i = test_ds.features(batch)
        values, cache = batch_forward(params, x_t, x_i)
        batch_backward(params, cache, _grad_s_batch(values), grad)
    return grad


def test_loss_batch(params: ModelParams, test_ds: PairedDataset,
                    seg: BatchSegmentation | None = None) -> float:
    """Summed contrastive loss of the test batches (no ridge)."""
    if len(test_ds) == 0:
        return 0.0
    if seg is None:
        seg = BatchSegmentation(batches=(tuple(test_ds.ids),))
    total = 0.0
    for batch in seg.batches:
        x_t, x_i = test_ds.features(batch)
        values, _ = batch_forward(params, x_t, x_i)
        total += batch_loss(values)
    return total


def test_gradient_self(params: ModelParams, test_ds: PairedDataset,
                       ids=None) -> np.ndarray:
    """Averaged gradient of -log cos(u, v) over the chosen pairs.

    The log is undefined for anti-aligned pairs; those raise
    NonPositiveCosineError carrying the offending id.
    """
    ids = list(test_ds.ids if ids is None else ids)
    if not ids:
        return np.zeros(params.size)
    grad = np.zeros(params.size)
    for pair_id in ids:
        x_t, x_i = test_ds.features([pair_id])
        values, cache = batch_forward(params, x_t, x_i)
        cosine = float(cache.cosines[0, 0])
        if cosine <= 0.0:
            raise NonPositiveCosineError(
                f"pair {pair_id}: cosine {cosine:.4f} <= 0, log-alignment undefined",
                pair_id=pair_id)
        # d(-log cos)/dS = -1 / (cos / tau) on the single entry
        d_s = np.array([[-1.0 / float(values[0, 0])]])
        batch_backward(params, cache, d_s, grad)
    return grad / float(len(ids))


def task_related_is(c: np.ndarray, pos_if: np.ndarray, neg_if: np.ndarray) -> float:
    """-C' (pos_if + neg_if): predicted test-loss change caused by removal."""
    c = np.asarray(c, dtype=np.float64)
    if c.shape != pos_if.shape or c.shape != neg_if.shape:
        raise DimensionMismatchError("test gradient and influence dims differ")
    return -float(c @ (pos_if + neg_if))


def relative_is(c: np.ndarray, pos_if: np.ndarray, neg_if: np.ndarray,
                parallel_tol: float = 1e-10) -> float:
    """Norm-constrained influence magnitude.

    Generic case: |C' P C| / |C| with P the orthogonal projector onto
    span{pos_if, neg_if}. When the two influence vectors are (numerically)
    parallel, judged by the normalized Gram determinant against
    parallel_tol, the score is |C' neg_if| / |neg_if|; if neg_if vanishes
    while pos_if does not, pos_if takes its place (the two parallel-case
    forms agree whenever both vectors are nonzero), and if both vanish the
    score is 0.
    """
    c = np.asarray(c, dtype=np.float64)
    if c.shape != pos_if.shape or c.shape != neg_if.shape:
        raise DimensionMismatchError("test gradient and influence dims differ")
    c_norm = float(np.linalg.norm(c))
    if c_norm == 0.0:
        raise ZeroTestGradientError("test gradient is zero")
    pp = float(pos_if @ pos_if)
    nn = float(neg_if @ neg_if)
    pn = float(pos_if @ neg_if)
    gram_det = pp * nn - pn * pn
    if gram_det <= parallel_tol * pp * nn:
        anchor = neg_if if nn > 0.0 else pos_if
        anchor_norm = float(np.linalg.norm(anchor))
        if anchor_norm == 0.0:
            return 0.0
        return abs(float(c @ anchor)) / anchor_norm
    basis = np.stack([pos_if, neg_if], axis=1)
    gram = basis.T @ basis
    coefs = np.linalg.solve(gram, basis.T @ c)
    return abs(float(c @ (basis @ coefs))) / c_norm


def rank_pairs(records, order: str = "asc", k: int | None = None) -> list[ScoreRecord]:
    """Stable sort of homogeneous records; ties break by ascending pair id."""
    records = list(records)
    if order not in ("asc", "desc"):
        raise ValueError(f"order must be 'asc' or 'desc', got {order!r}")
    kinds = {record.kind for record in records}
    if len(kinds) > 1:
        raise MixedKindsError(f"mixed score kinds: {sorted(kinds)}")
    sign = 1.0 if order == "asc" else -1.0
    ranked = sorted(records, key=lambda r: (sign * r.score, r.pair_id))
    if k is not None:
        if k < 0:
            raise ValueError("k must be >= 0")
        ranked = ranked[:k]
    return ranked


# --- report I/O -------------------------------------------------------------------

CSV_HEADER = ("pair_id", "kind", "score", "variant", "sign_convention")


def write_score_csv(records, path: str | os.PathLike) -> None:
    """UTF-8, LF line endings, floats at full precision."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for record in records:
        writer.writerow([
            record.pair_id, record.kind, jsonio.fmt_float(record.score),
            record.variant, record.sign_convention,
        ])
    jsonio.atomic_write_text(path, buf.getvalue())


def read_score_csv(path: str | os.PathLike) -> list[ScoreRecord]:
    with open(path, "r", encoding="utf-8", newline="") as handle:
        reader = csv.reader(handle)
        header = tuple(next(reader))
        if header != CSV_HEADER:
            raise DimensionMismatchError(f"unexpected CSV header {header}")
        return [
            ScoreRecord(pair_id=int(row[0]), score=float(row[2]), kind=row[1],
                        variant=row[3], sign_convention=row[4])
            for row in reader
        ]
