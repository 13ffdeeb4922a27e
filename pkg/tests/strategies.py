"""Shared hypothesis strategies."""

import numpy as np
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False, width=64)


def tensor4(n=(1, 3), c=(1, 8), h=(1, 6), w=(1, 6), dtype=np.float64):
    shape = st.tuples(st.integers(*n), st.integers(*c), st.integers(*h), st.integers(*w))
    return shape.flatmap(lambda s: hnp.arrays(dtype, s, elements=finite))


@st.composite
def divisible_tensor(draw, divisors=(1, 2, 4)):
    s = draw(st.sampled_from(divisors))
    c = s * draw(st.integers(1, 4))
    shape = (draw(st.integers(1, 2)), c, draw(st.integers(1, 5)), draw(st.integers(1, 5)))
    x = draw(hnp.arrays(np.float64, shape, elements=finite))
    return x, s


seeds = st.integers(0, 2**32 - 1)
