import numpy as np
import pytest

from casrf import autodiff as ad


@pytest.fixture(autouse=True)
def _fp64_default():
    # tests run in float64 unless they opt out explicitly
    ad.set_default_dtype(np.float64)
    ad.debug_numerics(False)
    yield
    ad.set_default_dtype(np.float64)
    ad.debug_numerics(False)
