import numpy as np
import pytest

from hodlr.core import HodlrMatrix, add_scaled_identity, densify, frob_norm, random_hodlr
from hodlr.dense import RngStream


def spd_hodlr(partition, ranks, seed, decay=0.6, shift=None):
    """Random SPD HODLR matrix: random symmetric HODLR plus a safe diagonal shift."""
    H = random_hodlr(partition, ranks, RngStream(seed), decay=decay)
    if shift is None:
        shift = frob_norm(H) + 1.0  # ||H||_2 <= ||H||_F
    return add_scaled_identity(H, shift)


def rel2(A, B):
    return np.linalg.norm(A - B, 2) / np.linalg.norm(B, 2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
