"""Training objectives: patch-level cluster prediction and masked
relative-position prediction, plus their anti-collapse regularizers.

The teacher branch (labels, reference features) is pure numpy and never
recorded on a tape; the student side builds differentiable graphs. Both
losses average only over the supervised token set (omega) of each query
and skip queries whose omega is empty.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .correspond import Correspondence
from .errors import DegenerateInputError, ParameterError
from .tensor import Tensor


def assign_teacher_labels(z_ref_proj: np.ndarray, prototypes: np.ndarray, tau: float) -> np.ndarray:
    """Row-stochastic soft assignments of reference tokens to prototypes.

    Both inputs are expected row-normalized, so the logits are cosine
    similarities. Computed without gradient: this is the teacher side.
    """
    if tau <= 0:
        raise ParameterError(f"teacher temperature must be > 0, got {tau}")
    logits = (z_ref_proj @ prototypes.T) / tau
    logits -= logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=1, keepdims=True)


def sinkhorn_normalize(assignments: np.ndarray, n_iters: int = 3) -> np.ndarray:
    """Balance an assignment matrix toward equal cluster usage.

    Alternates column normalization (each column sums to rows/K) with
    row normalization (each row sums to 1), ending on rows so the output
    is row-stochastic. Columns that are identically zero stay zero.
    """
    a = np.asarray(assignments, dtype=np.float64)
    if a.ndim != 2 or a.size == 0:
        raise DegenerateInputError(f"sinkhorn expects a nonempty 2-D matrix, got {a.shape}")
    if (a < 0).any():
        raise DegenerateInputError("sinkhorn input must be nonnegative")
    row_sums = a.sum(axis=1)
    if (row_sums == 0).any():
        raise DegenerateInputError("sinkhorn input has an all-zero row")
    n, k = a.shape
    col_target = n / k
    out = a.copy()
    for _ in range(n_iters):
        cols = out.sum(axis=0)
        out *= np.where(cols > 0, col_target / np.where(cols > 0, cols, 1.0), 1.0)
        out /= out.sum(axis=1, keepdims=True)
    return out.astype(assignments.dtype)


@dataclass(frozen=True)
class MaskPlan:
    """Which reference tokens stay visible to a query's cross-attention."""

    eta: float
    visible: np.ndarray  # sorted token ids
    structured: bool

    @property
    def n_visible(self) -> int:
        return len(self.visible)


def mask_reference(n_ref: int, eta: float, structured: bool, rng: np.random.Generator) -> MaskPlan:
    """Discard floor(eta * n_ref) reference tokens.

    Structured mode keeps a uniformly placed consecutive run in row-major
    token order; unstructured keeps a uniform subset. eta=1 yields an
    empty visible set (handled downstream by the placeholder token).
    """
    if not (0.0 <= eta <= 1.0):
        raise ParameterError(f"masking ratio must be in [0, 1], got {eta}")
    n_drop = int(np.floor(eta * n_ref))
    n_vis = n_ref - n_drop
    if n_vis == 0:
        visible = np.array([], dtype=np.int64)
    elif structured:
        start = int(rng.integers(0, n_ref - n_vis + 1))
        visible = np.arange(start, start + n_vis, dtype=np.int64)
    else:
        visible = np.sort(rng.choice(n_ref, size=n_vis, replace=False)).astype(np.int64)
    return MaskPlan(eta, visible, structured)


def cluster_loss(
    student_logits: Tensor,
    targets: np.ndarray,
    corr: Correspondence,
) -> tuple[Optional[Tensor], Optional[Tensor]]:
    """Soft-target cross-entropy of the query's prototype predictions
    against the teacher labels at the matched reference positions.

    ``student_logits`` has one row per kept query token (already
    temperature-scaled); rows outside omega contribute nothing. Returns
    (loss, softmax rows over omega) or (None, None) when omega is empty.
    """
    rows = corr.omega_rows
    if rows.size == 0:
        return None, None
    picked = T.take_rows(student_logits, rows)
    y = targets[corr.targets]
    loss = T.cross_entropy_from_logits(picked, y)
    probs = T.softmax_rows(picked)
    return loss, probs


def position_loss(logits: Tensor, corr: Correspondence) -> Optional[Tensor]:
    """Hard-target cross-entropy of position predictions over omega."""
    rows = corr.omega_rows
    if rows.size == 0:
        return None
    return T.cross_entropy_from_logits(T.take_rows(logits, rows), corr.targets)


def memax_penalty(mean_prediction: Tensor) -> Tensor:
    """Negative entropy of the mean prediction row; minimizing it pushes
    the batch to use the full prototype set."""
    return T.sum_all(T.mul(mean_prediction, T.log(mean_prediction)))


@dataclass
class QueryTerm:
    """Per-query pieces assembled by the trainer for one batch."""

    cluster: Optional[Tensor]
    position: Optional[Tensor]
    probs: Optional[Tensor]  # student softmax rows over omega
    n_omega: int
    n_correct: int  # argmax position hits, for metrics
    n_tokens: int


@dataclass
class LossBreakdown:
    total: Tensor
    metrics: dict = field(default_factory=dict)


def total_loss(terms: list[QueryTerm], lambda_memax: float) -> Optional[LossBreakdown]:
    """Mean of (cluster + position) over queries with nonempty omega,
    plus the weighted me-max penalty over all supervised predictions.

    Returns None when every omega in the batch is empty (batch skip).
    """
    live = [t for t in terms if t.n_omega > 0]
    if not live:
        return None

    pieces = []
    for t in live:
        pieces.append(T.add(t.cluster, t.position))
    acc = pieces[0]
    for p in pieces[1:]:
        acc = T.add(acc, p)
    objective = T.scale(acc, 1.0 / len(pieces))

    total_rows = sum(t.n_omega for t in live)
    row_sum = None
    for t in live:
        s = T.sum_rows(t.probs)
        row_sum = s if row_sum is None else T.add(row_sum, s)
    mean_pred = T.scale(row_sum, 1.0 / total_rows)
    memax = memax_penalty(mean_pred)

    total = T.add(objective, T.scale(memax, lambda_memax)) if lambda_memax else objective

    cluster_mean = float(np.mean([t.cluster.item() for t in live]))
    position_mean = float(np.mean([t.position.item() for t in live]))
    p = mean_pred.data.astype(np.float64)
    entropy = float(-(p * np.log(np.maximum(p, 1e-300))).sum())
    metrics = {
        "loss": total.item(),
        "loss_cluster": cluster_mean,
        "loss_position": position_mean,
        "loss_memax": memax.item(),
        "entropy": entropy,
        "pos_accuracy": sum(t.n_correct for t in live) / total_rows,
        "omega_mean": total_rows / len(live),
        "n_queries": len(terms),
        "n_queries_supervised": len(live),
    }
    return LossBreakdown(total, metrics)
