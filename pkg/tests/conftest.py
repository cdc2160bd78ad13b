import numpy as np
import pytest

from mcqlab.mdp import build_mdp


@pytest.fixture
def two_cycle():
    """Deterministic 2-state cycle with one action; rewards (1, 0)."""
    p = np.zeros((2, 1, 2))
    p[0, 0, 1] = 1.0
    p[1, 0, 0] = 1.0
    return build_mdp(p, [[1.0], [0.0]], gamma=0.5)
