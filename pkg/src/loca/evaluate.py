"""Evaluation: position-prediction accuracy, prototype-usage entropy,
and a frozen-feature linear segmentation probe at patch granularity.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import model as M
from . import objective as O
from . import tensor as T
from .augment import (
    AugmentConfig,
    View,
    identity_record,
    render_view,
    sample_view_record,
    token_vectors,
    view_point_to_original,
)
from .correspond import Correspondence, correspondence_nearest
from .datagen import LabeledImage
from .errors import ContractError, DegenerateInputError
from .tensor import Tensor

_EVAL_TAG = 0xE7


@dataclass
class EvalPair:
    query: View
    reference: View
    corr: Correspondence
    plan: O.MaskPlan


def make_eval_pairs(
    images: list[np.ndarray],
    n_pairs: int,
    vit: M.ViTConfig,
    aug: AugmentConfig,
    eta: float,
    structured: bool,
    seed: int,
) -> list[EvalPair]:
    """Held-out (query, reference) pairs, drawn with the training
    augmentation law from a dedicated seed stream."""
    pairs = []
    for i in range(n_pairs):
        rng = np.random.default_rng(np.random.SeedSequence((seed, _EVAL_TAG, i)))
        image = images[i % len(images)]
        ref = render_view(image, sample_view_record("reference", rng, aug), vit.patch_size)
        query = render_view(image, sample_view_record("query", rng, aug), vit.patch_size)
        corr = correspondence_nearest(query, ref)
        plan = O.mask_reference(vit.num_positions, eta, structured, rng)
        pairs.append(EvalPair(query, ref, corr, plan))
    return pairs


def position_eval(params: M.ModelParams, pairs: list[EvalPair]) -> tuple[float, float]:
    """(accuracy, mean loss) of position prediction over all omega tokens.

    Accuracy is the global fraction of argmax hits, so it is invariant
    to how the pairs are batched; argmax ties resolve to the smallest
    index.
    """
    correct = 0
    total = 0
    loss_sum = 0.0
    for pair in pairs:
        rows = pair.corr.omega_rows
        if rows.size == 0:
            continue
        z_ref = M.encode_view(
            params, token_vectors(pair.reference), pair.reference.grid, pair.reference.kept_tokens
        )
        z_q = M.encode_view(
            params, token_vectors(pair.query), pair.query.grid, pair.query.kept_tokens
        )
        if pair.plan.n_visible:
            g = M.cross_attend(
                params, z_q, Tensor(z_ref.data[pair.plan.visible]), pair.plan.visible
            )
        else:
            g = M.cross_attend(params, z_q, None)
        logits = M.position_logits(params, g)
        picked = logits.data[rows]
        correct += int((picked.argmax(axis=1) == pair.corr.targets).sum())
        total += rows.size
        loss_sum += T.cross_entropy_from_logits(Tensor(picked), pair.corr.targets).item() * rows.size
    if total == 0:
        raise DegenerateInputError("position_eval: no supervised tokens in the eval pairs")
    return correct / total, loss_sum / total


def position_accuracy(params: M.ModelParams, pairs: list[EvalPair]) -> float:
    return position_eval(params, pairs)[0]


def mean_prediction_entropy(
    params: M.ModelParams, pairs: list[EvalPair], tau_student: float
) -> float:
    """Entropy (nats) of the mean student prototype prediction over all
    supervised query tokens in the batch."""
    acc: Optional[np.ndarray] = None
    total = 0
    for pair in pairs:
        rows = pair.corr.omega_rows
        if rows.size == 0:
            continue
        z_q = M.encode_view(
            params, token_vectors(pair.query), pair.query.grid, pair.query.kept_tokens
        )
        z_proj = M.project_features(params, z_q)
        logits = M.prototype_logits(params, z_proj, tau_student)
        probs = T.softmax_rows(T.take_rows(logits, rows)).data.astype(np.float64)
        s = probs.sum(axis=0)
        acc = s if acc is None else acc + s
        total += rows.size
    if total == 0:
        raise DegenerateInputError("mean_prediction_entropy: nothing to average")
    p = acc / total
    return float(-(p * np.log(np.maximum(p, 1e-300))).sum())


# ---------------------------------------------------------------------------
# linear segmentation probe


@dataclass
class ProbeResult:
    per_class_iou: list[Optional[float]]  # None for classes excluded (empty union)
    miou: float
    confusion: np.ndarray


def compute_miou(confusion: np.ndarray) -> ProbeResult:
    """IoU_c = TP / (TP + FP + FN); classes with empty union are excluded."""
    confusion = np.asarray(confusion, dtype=np.int64)
    if confusion.size == 0 or confusion.ndim != 2 or confusion.shape[0] != confusion.shape[1]:
        raise ContractError(f"confusion matrix must be square and nonempty, got {confusion.shape}")
    tp = np.diag(confusion)
    fp = confusion.sum(axis=0) - tp
    fn = confusion.sum(axis=1) - tp
    union = tp + fp + fn
    ious: list[Optional[float]] = []
    for c in range(confusion.shape[0]):
        ious.append(float(tp[c] / union[c]) if union[c] > 0 else None)
    present = [x for x in ious if x is not None]
    if not present:
        raise ContractError("every class has an empty union")
    return ProbeResult(ious, float(np.mean(present)), confusion)


def patch_majority_labels(labels: np.ndarray, view: View) -> np.ndarray:
    """Pool a pixel label map to patch level inside a rendered view.

    Each view pixel takes the label of the nearest original pixel, then
    every P x P cell votes by majority (ties to the smaller class id).
    """
    h, w, _ = view.pixels.shape
    p = view.patch_size
    cols_px, rows_px = np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5)
    pts = np.stack([cols_px, rows_px], axis=-1).reshape(-1, 2)
    orig = view_point_to_original(view.record, pts)
    src_h, src_w = labels.shape
    cx = np.clip((orig[:, 0] * src_w).astype(int), 0, src_w - 1)
    cy = np.clip((orig[:, 1] * src_h).astype(int), 0, src_h - 1)
    view_labels = labels[cy, cx].reshape(h, w)

    rows, cols = view.grid
    out = np.empty(rows * cols, dtype=np.int64)
    n_classes = int(labels.max()) + 1
    for i in range(rows):
        for j in range(cols):
            cell = view_labels[i * p : (i + 1) * p, j * p : (j + 1) * p]
            out[i * cols + j] = np.bincount(cell.reshape(-1), minlength=n_classes).argmax()
    return out


@dataclass(frozen=True)
class ProbeConfig:
    epochs: int = 40
    lr: float = 0.05
    weight_decay: float = 1e-4
    seed: int = 0


def default_encode_fn(params: M.ModelParams, vit: M.ViTConfig):
    """Frozen patch features of an image rendered as a full center view."""

    def encode(image: np.ndarray) -> tuple[np.ndarray, View]:
        view = render_view(image, identity_record((vit.patch_size * vit.ref_grid[0],
                                                   vit.patch_size * vit.ref_grid[1])), vit.patch_size)
        z = M.encode_view(params, token_vectors(view), view.grid, view.kept_tokens)
        return z.data, view

    return encode


def linear_probe_segmentation(
    encode_fn: Callable[[np.ndarray], tuple[np.ndarray, View]],
    train_images: list[LabeledImage],
    eval_images: list[LabeledImage],
    cfg: ProbeConfig,
) -> ProbeResult:
    """Train one linear layer from frozen patch features to class logits
    and report patch-level mIoU on the held-out split.

    The encoder stays fixed; only the probe's weight and bias train,
    with AdamW on softmax cross-entropy for a small fixed budget.
    """
    feats_tr, labs_tr = _probe_dataset(encode_fn, train_images)
    feats_ev, labs_ev = _probe_dataset(encode_fn, eval_images)
    n_classes = max(im.class_count for im in train_images + eval_images)

    d = feats_tr.shape[1]
    rng = np.random.default_rng(cfg.seed)
    w = Tensor((rng.standard_normal((d, n_classes)) * 0.01).astype(np.float32), requires_grad=True)
    b = Tensor(np.zeros(n_classes, dtype=np.float32), requires_grad=True)
    x = Tensor(feats_tr)
    m_w = np.zeros_like(w.data)
    v_w = np.zeros_like(w.data)
    m_b = np.zeros_like(b.data)
    v_b = np.zeros_like(b.data)

    for step in range(1, cfg.epochs + 1):
        w.grad = None
        b.grad = None
        with T.Tape() as tape:
            logits = T.add(T.matmul(x, w), b)
            loss = T.cross_entropy_from_logits(logits, labs_tr)
        T.backward(tape, loss)
        for param, m, v, decay in ((w, m_w, v_w, cfg.weight_decay), (b, m_b, v_b, 0.0)):
            g = param.grad
            m *= 0.9
            m += 0.1 * g
            v *= 0.999
            v += 0.001 * g * g
            mh = m / (1 - 0.9**step)
            vh = v / (1 - 0.999**step)
            param.data -= (cfg.lr * (mh / (np.sqrt(vh) + 1e-8) + decay * param.data)).astype(np.float32)

    pred = (feats_ev @ w.data + b.data).argmax(axis=1)
    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(confusion, (labs_ev, pred), 1)
    return compute_miou(confusion)


def _probe_dataset(encode_fn, images: list[LabeledImage]) -> tuple[np.ndarray, np.ndarray]:
    feats = []
    labels = []
    for im in images:
        z, view = encode_fn(im.pixels)
        feats.append(z)
        labels.append(patch_majority_labels(im.labels, view))
    return np.concatenate(feats, axis=0).astype(np.float32), np.concatenate(labels, axis=0)
