"""Static visualization of position predictions.

One panel shows the query view next to the reference view with masked
reference tokens grayed out, the true query location (cells selected by
the correspondence function) outlined in blue and the predicted cells
in red. Cells that are both true and predicted show both outlines
(red inside blue).
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .augment import View
from .correspond import Correspondence
from .objective import MaskPlan

SCALE = 4  # upscale factor so grid outlines stay visible
BLUE = np.array([40, 90, 255], dtype=np.uint8)
RED = np.array([255, 50, 50], dtype=np.uint8)
GRAY_BLEND = 0.75


def _to_uint8(pixels: np.ndarray) -> np.ndarray:
    return (np.clip(pixels, 0.0, 1.0) * 255).astype(np.uint8)


def _upscale(img: np.ndarray) -> np.ndarray:
    return np.repeat(np.repeat(img, SCALE, axis=0), SCALE, axis=1)


def _outline_cell(img: np.ndarray, row: int, col: int, p: int, color: np.ndarray, inset: int) -> None:
    y0, x0 = row * p * SCALE + inset, col * p * SCALE + inset
    y1, x1 = (row + 1) * p * SCALE - inset, (col + 1) * p * SCALE - inset
    img[y0:y1, x0 : x0 + 2] = color
    img[y0:y1, x1 - 2 : x1] = color
    img[y0 : y0 + 2, x0:x1] = color
    img[y1 - 2 : y1, x0:x1] = color


def render_inspection_panel(
    query: View,
    reference: View,
    corr: Correspondence,
    logits: np.ndarray,
    plan: MaskPlan,
) -> tuple[np.ndarray, dict]:
    """Compose the side-by-side panel; returns (rgb array, info dict).

    ``logits`` has one row per kept query token. Predictions are taken
    at the omega rows only, matching the supervised token set.
    """
    rows, cols = reference.grid
    p = reference.patch_size
    ref_img = _upscale(_to_uint8(reference.pixels)).copy()

    masked = np.setdiff1d(np.arange(reference.n_tokens), plan.visible)
    for tok in masked:
        i, j = divmod(int(tok), cols)
        cell = ref_img[i * p * SCALE : (i + 1) * p * SCALE, j * p * SCALE : (j + 1) * p * SCALE]
        gray = cell.mean(axis=2, keepdims=True)
        ref_img[i * p * SCALE : (i + 1) * p * SCALE, j * p * SCALE : (j + 1) * p * SCALE] = (
            GRAY_BLEND * gray + (1 - GRAY_BLEND) * cell
        ).astype(np.uint8)

    omega_rows = corr.omega_rows
    true_cells = sorted(int(t) for t in corr.targets)
    predicted_cells = sorted(int(t) for t in logits[omega_rows].argmax(axis=1)) if omega_rows.size else []

    for tok in true_cells:
        _outline_cell(ref_img, tok // cols, tok % cols, p, BLUE, inset=0)
    for tok in predicted_cells:
        _outline_cell(ref_img, tok // cols, tok % cols, p, RED, inset=3)

    q_img = _upscale(_to_uint8(query.pixels))
    pad = np.full((ref_img.shape[0], 8, 3), 255, dtype=np.uint8)
    if q_img.shape[0] < ref_img.shape[0]:
        extra = np.full((ref_img.shape[0] - q_img.shape[0], q_img.shape[1], 3), 255, dtype=np.uint8)
        q_img = np.concatenate([q_img, extra], axis=0)
    panel = np.concatenate([q_img, pad, ref_img], axis=1)

    info = {
        "n_masked": int(len(masked)),
        "n_visible": int(plan.n_visible),
        "true_cells": true_cells,
        "predicted_cells": predicted_cells,
        "n_correct": int(
            (logits[omega_rows].argmax(axis=1) == corr.targets).sum()
        ) if omega_rows.size else 0,
    }
    return panel, info


def save_panel(path: str | Path, panel: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(panel).save(path)
