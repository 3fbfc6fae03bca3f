import numpy as np
import pytest
from hypothesis import strategies as st

from whittle_assoc.chain import ChainParams


@st.composite
def stable_chains(draw, max_cost=50.0):
    """Chains with p/(1-p) < r, costs bounded away from zero."""
    r = draw(st.floats(0.05, 0.95))
    p_max = r / (1 + r)  # p/(1-p) < r
    p = draw(st.floats(0.02, 0.98 * p_max))
    c = draw(st.floats(0.1, max_cost))
    return ChainParams(p, r, c)


@st.composite
def any_chains(draw):
    r = draw(st.floats(0.05, 0.95))
    p = draw(st.floats(0.02, 0.95))
    c = draw(st.floats(0.1, 50.0))
    return ChainParams(p, r, c)


def random_stable_chains(n, seed):
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < n:
        r = rng.uniform(0.05, 0.95)
        p = rng.uniform(0.02, 0.98 * r / (1 + r))
        out.append(ChainParams(round(p, 4), round(r, 4), round(rng.uniform(0.5, 50), 3)))
    return out


@pytest.fixture
def base_chain():
    return ChainParams(0.4, 0.5, 1.0)
