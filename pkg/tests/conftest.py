import numpy as np
import pytest

import ipslearn as ips


@pytest.fixture(scope="session")
def small_reference_ds():
    """Small labeled zero-gap reference dataset shared by fast tests."""
    cfg = ips.SimConfig(spec=ips.reference_spec(), N=5, M=12, T=0.1, sigma=1.0,
                        dt_fine=1e-2, dt_obs=1e-2, protocol="zerogap", seed=101)
    return ips.simulate(cfg)


@pytest.fixture(scope="session")
def reference_basis():
    return ips.oracle_basis(ips.reference_spec())


@pytest.fixture()
def rng():
    return np.random.default_rng(20240817)
