import numpy as np
import pytest

from defectchain.klfield import (BasisCache, CovarianceSpec, DecaySpec,
                                 GeometrySpec, build_kl_basis)


@pytest.fixture(scope="session")
def geom():
    return GeometrySpec()


@pytest.fixture(scope="session")
def cov(geom):
    return CovarianceSpec(sigma_f=0.1425, corr_length=12.9,
                          length=geom.arc_length, grid_n=256)


@pytest.fixture(scope="session")
def basis(cov):
    return build_kl_basis(cov, n_modes=30)


@pytest.fixture(scope="session")
def decay(geom):
    return DecaySpec.for_geometry(geom)


@pytest.fixture(scope="session")
def cache(cov):
    return BasisCache(cov, n_modes=30)


@pytest.fixture()
def rng():
    return np.random.default_rng(20260823)
