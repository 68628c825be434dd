"""Small record types used by every verification routine."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np


@dataclass
class Check:
    """Outcome of one verified property.

    ``residual`` is the worst violation observed (nonnegative); ``witness``
    carries whatever identifies the offending input when ``passed`` is false.
    """

    name: str
    passed: bool
    residual: float = 0.0
    witness: Any = None
    detail: str = ""

    def __post_init__(self):
        self.passed = bool(self.passed)
        self.residual = float(abs(self.residual))

    def __bool__(self):
        return self.passed


@dataclass
class CheckSuite:
    """An ordered collection of checks with unique names."""

    checks: list[Check] = field(default_factory=list)

    def add(self, check: Check) -> Check:
        if any(c.name == check.name for c in self.checks):
            raise ValueError(f"duplicate check name {check.name!r}")
        self.checks.append(check)
        return check

    def extend(self, checks):
        for c in checks:
            self.add(c)

    def __getitem__(self, name: str) -> Check:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def __contains__(self, name: str) -> bool:
        return any(c.name == name for c in self.checks)

    def __iter__(self):
        return iter(self.checks)

    def __len__(self):
        return len(self.checks)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def failures(self) -> list[Check]:
        return [c for c in self.checks if not c.passed]

    def __bool__(self):
        return self.passed


def max_abs(x) -> float:
    """Largest entry modulus; 0 for empty input."""
    x = np.asarray(x)
    return float(np.max(np.abs(x))) if x.size else 0.0
