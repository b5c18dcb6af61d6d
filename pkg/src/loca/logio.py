"""JSON-lines metrics writing with a stable schema per stream."""

from __future__ import annotations

import json
import math
from typing import IO


def _sanitize(value):
    if isinstance(value, float):
        if math.isnan(value):
            return "NaN"
        if math.isinf(value):
            return "Infinity" if value > 0 else "-Infinity"
    return value


def write_metrics(stream: IO[str], record: dict) -> None:
    """One JSON object per line, flushed immediately.

    JSON has no NaN/Inf, so non-finite floats are serialized as strings
    and the line carries a ``non_finite`` flag (always present to keep
    the key set stable).
    """
    clean = {k: _sanitize(v) for k, v in record.items()}
    clean["non_finite"] = any(isinstance(v, str) and v in ("NaN", "Infinity", "-Infinity")
                              for v in clean.values())
    stream.write(json.dumps(clean, allow_nan=False) + "\n")
    stream.flush()
