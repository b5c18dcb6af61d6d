"""Patch correspondences between a query view and a reference view.

Both views come from the same original image, so back-tracking their
augmentation records identifies, for each query patch, the reference
patch covering the same content. Two implementations are provided:

* ``correspondence_oracle`` exhaustively computes all pairwise overlap
  areas in original-image coordinates and takes the argmax. It is the
  ground truth the fast path is validated against.
* ``correspondence_nearest`` maps each query patch center through the
  augmentation composition and snaps it to the containing reference
  grid cell. It disagrees with the oracle only at boundary-ambiguous
  tokens.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .augment import (
    View,
    original_point_to_view,
    patchify,
    view_box_to_original,
    view_point_to_original,
)

UNDEFINED = -1


@dataclass
class Correspondence:
    """Per-query-token mapping into reference positions.

    ``query_tokens`` lists the query's kept token ids (row order of the
    encoder's token matrix); ``h`` holds the matched reference token id
    or UNDEFINED. Omega is the set of query tokens where h is defined.
    """

    query_tokens: np.ndarray
    h: np.ndarray
    n_ref: int

    def __post_init__(self):
        defined = self.h[self.h != UNDEFINED]
        if defined.size and (defined.min() < 0 or defined.max() >= self.n_ref):
            raise ValueError("correspondence target outside the reference grid")

    @property
    def omega(self) -> np.ndarray:
        """Query token ids with a defined match."""
        return self.query_tokens[self.h != UNDEFINED]

    @property
    def omega_rows(self) -> np.ndarray:
        """Row indices (into kept order) of the tokens in omega."""
        return np.nonzero(self.h != UNDEFINED)[0]

    @property
    def targets(self) -> np.ndarray:
        """Reference token ids for the omega rows."""
        return self.h[self.h != UNDEFINED]

    def __len__(self) -> int:
        return int((self.h != UNDEFINED).sum())


def _kept_boxes_in_original(view: View) -> np.ndarray:
    boxes = patchify(view)[view.kept_tokens]
    return view_box_to_original(view.record, boxes)


def _intersection_areas(qboxes: np.ndarray, rboxes: np.ndarray) -> np.ndarray:
    """Pairwise overlap areas between (Nq,4) and (Nr,4) rects."""
    qx0, qy0, qx1, qy1 = (qboxes[:, None, i] for i in range(4))
    rx0, ry0, rx1, ry1 = (rboxes[None, :, i] for i in range(4))
    iw = np.maximum(0.0, np.minimum(qx1, rx1) - np.maximum(qx0, rx0))
    ih = np.maximum(0.0, np.minimum(qy1, ry1) - np.maximum(qy0, ry0))
    return iw * ih


def correspondence_oracle(query: View, reference: View) -> Correspondence:
    """Exhaustive best-overlap matching in original-image coordinates.

    h[j] is the reference patch with the greatest intersection area,
    defined only when some overlap exists; ties break to the smallest
    reference index. Deterministic by construction.
    """
    qboxes = _kept_boxes_in_original(query)
    rboxes = view_box_to_original(reference.record, patchify(reference))
    areas = _intersection_areas(qboxes, rboxes)
    best = areas.argmax(axis=1)
    h = np.where(areas[np.arange(len(qboxes)), best] > 0.0, best, UNDEFINED)
    return Correspondence(query.kept_tokens.copy(), h.astype(np.int64), reference.n_tokens)


def oracle_overlap_stats(query: View, reference: View) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(h, best overlap fraction of the smaller patch, uniqueness flag).

    Support data for validating the fast path: the fraction is the max
    overlap divided by min(query patch area, reference patch area), and
    uniqueness says the argmax was strictly larger than the runner-up.
    """
    qboxes = _kept_boxes_in_original(query)
    rboxes = view_box_to_original(reference.record, patchify(reference))
    areas = _intersection_areas(qboxes, rboxes)
    best = areas.argmax(axis=1)
    best_area = areas[np.arange(len(qboxes)), best]
    h = np.where(best_area > 0.0, best, UNDEFINED)

    qarea = (qboxes[:, 2] - qboxes[:, 0]) * (qboxes[:, 3] - qboxes[:, 1])
    rarea = (rboxes[:, 2] - rboxes[:, 0]) * (rboxes[:, 3] - rboxes[:, 1])
    smaller = np.minimum(qarea, rarea[np.where(h >= 0, h, 0)])
    frac = np.where(h >= 0, best_area / np.maximum(smaller, 1e-300), 0.0)

    masked = areas.copy()
    masked[np.arange(len(qboxes)), best] = -np.inf
    runner_up = masked.max(axis=1)
    # exact geometric ties reappear as ~1e-17 float differences; treat
    # anything inside the slack as a tie
    unique = best_area > runner_up + 1e-12
    return h.astype(np.int64), frac, unique


def correspondence_nearest(query: View, reference: View) -> Correspondence:
    """Fast path: push each query patch center through the record
    composition into reference view coordinates and snap it to the
    nearest grid cell (centers outside the grid clamp to the edge).

    A token is defined whenever its mapped patch box has positive
    intersection with the reference crop, a single rectangle test per
    token. Matches may disagree with the oracle at boundary-ambiguous
    tokens whose center falls outside the reference crop.
    """
    rows, cols = query.grid
    p = query.patch_size
    ij = np.array([divmod(int(t), cols) for t in query.kept_tokens], dtype=np.float64)
    centers_px = np.stack([(ij[:, 1] + 0.5) * p, (ij[:, 0] + 0.5) * p], axis=-1)

    orig = view_point_to_original(query.record, centers_px)
    ref_px = original_point_to_view(reference.record, orig)

    # overlap test: map the two box corners into reference coordinates
    # (a flip can swap them, so sort) and intersect with the view rect
    boxes = patchify(query)[query.kept_tokens]
    c0 = original_point_to_view(reference.record, view_point_to_original(query.record, boxes[:, 0:2]))
    c1 = original_point_to_view(reference.record, view_point_to_original(query.record, boxes[:, 2:4]))
    lo = np.minimum(c0, c1)
    hi = np.maximum(c0, c1)
    r_rows, r_cols = reference.grid
    rp = reference.patch_size
    ref_w, ref_h = r_cols * rp, r_rows * rp
    overlaps = (
        (np.minimum(hi[:, 0], ref_w) > np.maximum(lo[:, 0], 0.0))
        & (np.minimum(hi[:, 1], ref_h) > np.maximum(lo[:, 1], 0.0))
    )

    col = np.floor(np.clip(ref_px[:, 0] / rp, 0.0, r_cols - 1e-9)).astype(np.int64)
    row = np.floor(np.clip(ref_px[:, 1] / rp, 0.0, r_rows - 1e-9)).astype(np.int64)
    h = np.where(overlaps, row * r_cols + col, UNDEFINED)
    return Correspondence(query.kept_tokens.copy(), h.astype(np.int64), reference.n_tokens)
