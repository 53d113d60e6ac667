import numpy as np
import pytest

from skillform import dgp, iterative as it
from skillform.numkit import QuadratureConfig


def smoke_fit_config(**overrides):
    base = dict(quad=QuadratureConfig(draws=400, burn=20), fix_intercepts=True,
                restarts=0, init_from_amn=True, seed=5, tol=1e-5, max_iter=100)
    base.update(overrides)
    return it.FitConfig(**base)


@pytest.fixture(scope="session")
def translog_model():
    return dgp.build_preset(dgp.DgpConfig(preset="translog-approx"))


@pytest.fixture(scope="session")
def ces_new_model():
    return dgp.build_preset(dgp.DgpConfig(preset="ces-new-means"))


@pytest.fixture(scope="session")
def ces_orig_model():
    return dgp.build_preset(dgp.DgpConfig(preset="ces-original-means"))


@pytest.fixture(scope="session")
def smoke_dataset(translog_model):
    return dgp.simulate_dataset(translog_model, 500, seed=21)


@pytest.fixture(scope="session")
def smoke_estimates(translog_model, smoke_dataset):
    """One fully converged iterative fit on the trans-log design, shared by the
    estimator, bootstrap, and CLI tests."""
    cfg = smoke_fit_config()
    ests = it.estimate_all(smoke_dataset, translog_model, cfg)
    assert ests.converged
    return ests
