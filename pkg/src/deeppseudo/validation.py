"""Input checks shared by the estimator API and the command line."""

from __future__ import annotations

from typing import Any, Sequence

import numpy as np


def check_lines(lines: Any, name: str = "X", allow_empty_lines: bool = False) -> list[str]:
    """Coerce a 1-d collection of text lines to a list of str.

    Accepts lists, tuples, numpy string/object arrays and pandas Series. A
    bare string is rejected since it would otherwise be iterated by character.
    """
    if isinstance(lines, (str, bytes)):
        raise TypeError(f"{name} must be a sequence of lines, not a single string")
    if hasattr(lines, "to_numpy"):
        lines = lines.to_numpy()
    arr = np.asarray(lines, dtype=object)
    if arr.ndim == 2 and arr.shape[1] == 1:
        arr = arr[:, 0]
    if arr.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional, got shape {arr.shape}")
    if arr.size == 0:
        raise ValueError(f"{name} is empty")
    out = []
    for i, item in enumerate(arr):
        if not isinstance(item, str):
            raise TypeError(f"{name}[{i}] is {type(item).__name__}, expected str")
        if not allow_empty_lines and not item.strip():
            raise ValueError(f"{name}[{i}] is blank")
        out.append(item)
    return out


def check_aligned(x: Sequence, y: Sequence, x_name: str = "X", y_name: str = "y") -> None:
    if len(x) != len(y):
        raise ValueError(f"{x_name} has {len(x)} lines but {y_name} has {len(y)}")


def check_fraction(value: float, name: str, low_open: bool = False) -> float:
    value = float(value)
    if not (0.0 < value < 1.0 if low_open else 0.0 <= value < 1.0):
        raise ValueError(f"{name} must lie in {'(0, 1)' if low_open else '[0, 1)'}, got {value}")
    return value


def check_positive_int(value: Any, name: str) -> int:
    if isinstance(value, bool) or int(value) != value or int(value) < 1:
        raise ValueError(f"{name} must be a positive integer, got {value!r}")
    return int(value)
