import os

# Pin BLAS pools before numpy loads: the workload is tiny matrices and the
# determinism checks assume single-threaded execution.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import numpy as np
import pytest

from moppa import (
    HeadLayout,
    HeatParams,
    MoppaUnitParams,
    PoissonParams,
    RouterState,
    WaveParams,
)


def random_unit_params(rng, layout, eta=0.001) -> MoppaUnitParams:
    """Random full unit with filter magnitudes near the learned regime.

    Draw ranges keep every per-frequency multiplier O(1) so absolute
    tolerances of 1e-12 are meaningful.
    """
    coeff = (layout.tokens, layout.heads)
    return MoppaUnitParams(
        heat=HeatParams(rng.uniform(-0.05, 0.05, coeff),
                        rng.uniform(0.0, 2.0, layout.channels)),
        wave=WaveParams(rng.uniform(-0.05, 0.05, coeff),
                        rng.uniform(0.0, 2.0, layout.channels)),
        poisson=PoissonParams(rng.normal(0.0, 0.01, coeff),
                              rng.normal(0.0, 0.01, layout.channels_per_head), eta),
        router=RouterState(rng.normal(0.0, 1.0, 3)),
        layout=layout,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
