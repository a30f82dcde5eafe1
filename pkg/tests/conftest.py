"""Shared fixtures: expensive synthesis and experiment runs, built once."""

import numpy as np
import pytest

from robustsls import synthesis as syn
from robustsls.config import build_setup, load_config
from robustsls.error_model import ErrorModel
from robustsls.sim_harness import run_experiment

# a gentler perception profile and shorter FIR horizon used by tests that
# only need a feasible synthesis, not the full default experiment
MILD_OVERRIDES = {
    "horizon": 10,
    "perception": {
        "bias_amplitudes": [0.1] * 6,
        "bias_frequencies": [1.0] * 6,
    },
}


def make_problem(setup, model, robust=True, cost=None, T=None):
    if cost is None:
        cost = syn.CostSpec(kind="quadratic_l1", Q=setup.cost_q, R=setup.cost_r)
    return syn.SynthesisProblem(
        sys=setup.system, T=T or setup.horizon, eps_w=setup.eps_w,
        error_model=model, cost=cost, d_max=setup.d_max,
        robustness_enabled=robust, margin=setup.margin, r0=setup.r0)


def explicit_model(eps_e, s_hat, radius=5.0, quantile=0.95, n=6):
    return ErrorModel(epsilon_e=eps_e, s_hat=s_hat, radius_r=radius,
                      quantile=quantile, training_states=np.zeros((1, n)))


@pytest.fixture(scope="session")
def default_setup():
    return build_setup(load_config(None))


@pytest.fixture(scope="session")
def quad_sys(default_setup):
    return default_setup.system


@pytest.fixture(scope="session")
def experiment_result(default_setup):
    """Full default comparison experiment; the slowest fixture (about a minute)."""
    return run_experiment(default_setup)


@pytest.fixture(scope="session")
def mild_setup():
    return build_setup(load_config(MILD_OVERRIDES))


@pytest.fixture(scope="session")
def mild_model(mild_setup):
    """Ground-truth error model of the mild perception profile (S = L)."""
    per = mild_setup.perception
    return explicit_model(per.error_bound(), per.lipschitz_bound(),
                          radius=mild_setup.radius, quantile=1.0)


@pytest.fixture(scope="session")
def mild_nominal(mild_setup, mild_model):
    return syn.synthesize(make_problem(mild_setup, mild_model, robust=False))


@pytest.fixture(scope="session")
def mild_robust(mild_setup, mild_model):
    return syn.synthesize(make_problem(mild_setup, mild_model, robust=True))
