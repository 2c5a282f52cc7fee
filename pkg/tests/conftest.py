import numpy as np
import pytest

from wallresp import comm


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def spmd():
    """Run a rank program on P thread ranks with a short deadlock timeout."""

    def run(P, program, *args, **kwargs):
        kwargs.setdefault("timeout", 60)
        return comm.spawn(P, program, *args, **kwargs)

    return run
