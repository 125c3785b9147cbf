"""Small shared helpers: digests, canonical JSON, CSV float formatting."""

from __future__ import annotations

import hashlib
import json

import numpy as np


class ValidationError(ValueError):
    """Bad user input: shapes, files, arguments. Maps to CLI exit code 2."""


def array_digest(arr: np.ndarray) -> str:
    a = np.ascontiguousarray(arr)
    h = hashlib.sha256()
    h.update(str(a.dtype).encode())
    h.update(str(a.shape).encode())
    h.update(a.tobytes())
    return h.hexdigest()


def text_digest(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def canonical_json(obj) -> str:
    """Stable serialization: sorted keys, fixed separators, no NaN."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def fmt_real(x: float) -> str:
    """Reals in delimited output carry 9 significant digits."""
    return format(float(x), ".9g")
