"""Small input-validation helpers shared by the config loader and estimators."""

from __future__ import annotations

from typing import Any, Iterable, Mapping

import numpy as np


class ValidationErrors(ValueError):
    """Collects every problem found so callers can report them all at once."""

    def __init__(self, errors: Iterable[str]):
        self.errors = list(errors)
        super().__init__("\n".join(f"- {e}" for e in self.errors) or "invalid input")


class Checker:
    def __init__(self):
        self.errors: list[str] = []

    def fail(self, msg: str) -> None:
        self.errors.append(msg)

    def require(self, cond: bool, msg: str) -> bool:
        if not cond:
            self.errors.append(msg)
        return cond

    def raise_if_any(self) -> None:
        if self.errors:
            raise ValidationErrors(self.errors)


def check_keys(where: str, data: Mapping[str, Any], allowed: Iterable[str], chk: Checker) -> None:
    allowed = set(allowed)
    for k in data:
        if k not in allowed:
            chk.fail(f"{where}: unknown key {k!r} (allowed: {', '.join(sorted(allowed))})")


def check_positive_int(where: str, value, chk: Checker, allow_zero: bool = False) -> None:
    ok = isinstance(value, (int, np.integer)) and not isinstance(value, bool) and (value >= 0 if allow_zero else value > 0)
    chk.require(ok, f"{where}: expected a {'nonnegative' if allow_zero else 'positive'} integer, got {value!r}")


def check_fraction(where: str, value, chk: Checker) -> None:
    ok = isinstance(value, (int, float)) and not isinstance(value, bool) and 0.0 <= float(value) <= 1.0
    chk.require(ok, f"{where}: expected a number in [0, 1], got {value!r}")


def check_language_id(where: str, value, chk: Checker) -> None:
    ok = isinstance(value, str) and value != "" and "@" not in value and "." not in value and "|" not in value
    chk.require(ok, f"{where}: language id must be a nonempty string without '@', '.', '|' (got {value!r})")


def check_choice(where: str, value, choices: Iterable[str], chk: Checker) -> None:
    choices = list(choices)
    chk.require(value in choices, f"{where}: {value!r} is not one of {choices}")


def check_finite_array(name: str, x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_int_array(name: str, x, low: int = 0, high: int | None = None) -> np.ndarray:
    arr = np.asarray(x)
    if arr.size and not np.issubdtype(arr.dtype, np.integer):
        raise TypeError(f"{name} must hold integers, got {arr.dtype}")
    arr = arr.astype(np.int64)
    if arr.size and (arr.min() < low or (high is not None and arr.max() >= high)):
        raise ValueError(f"{name} values must lie in [{low}, {high})")
    return arr
