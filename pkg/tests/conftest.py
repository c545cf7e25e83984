import math

import numpy as np
import pytest

from exoforge.kinemodel import FourBarLinkage, Transform


def random_transform(rng, scale=50.0):
    return Transform(tuple(rng.uniform(-scale, scale, 3)), tuple(rng.uniform(-math.pi, math.pi, 3)))


def random_linkage(rng, base=True):
    """A four-bar that closes over its whole input range (rejection sampled)."""
    while True:
        g, a, b, c = rng.uniform(5.0, 60.0, 4)
        lo = rng.uniform(-math.pi, math.pi)
        hi = lo + rng.uniform(0.1, 2 * math.pi)
        fb = FourBarLinkage(g, a, b, c,
                            base_pose=random_transform(rng) if base else Transform(),
                            coupler_point=tuple(rng.uniform(-20, 40, 2)),
                            input_limits=(lo, hi), branch=int(rng.choice([-1, 1])))
        if fb.is_closable():
            return fb


def brute_nn_sq(pos_a, dir_a, pos_b, dir_b, lam):
    """For each row of A, min over B of |dp|^2 + lam^2 |dd|^2 by double loop."""
    out = np.empty(len(pos_a))
    for i in range(len(pos_a)):
        best = math.inf
        for j in range(len(pos_b)):
            dp = pos_a[i] - pos_b[j]
            dd = dir_a[i] - dir_b[j]
            v = float(dp @ dp + lam * lam * (dd @ dd))
            best = min(best, v)
        out[i] = best
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
