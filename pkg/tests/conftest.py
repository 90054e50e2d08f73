from __future__ import annotations

import numpy as np
import pytest

from occcot.dataset import generate_corpus
from occcot.losses import LogProbTrace


def trace_with_ratio(lr: float, length: int = 3) -> LogProbTrace:
    """A valid trace whose policy-minus-reference log-ratio is ``lr``."""
    base = -abs(lr) - 0.5
    return LogProbTrace(np.full(length, base / length), np.full(length, (base - lr) / length))


@pytest.fixture
def small_corpus():
    return generate_corpus(20, seed=3)
