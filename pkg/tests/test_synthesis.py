import json

import numpy as np
import pytest

from robustsls import synthesis as syn
from robustsls.error_model import ErrorModel
from robustsls.lti_model import DiscreteLtiSystem
from robustsls.sls_ops import FirOperator, SystemResponses, inf_induced_norm

from conftest import explicit_model, make_problem


def scalar_system(a=0.0):
    return DiscreteLtiSystem(A=[[a]], B=[[1.0]], C=[[1.0]], H=[[1.0]], dt=1.0)


def scalar_problem(T=2, eps_w=1.0, eps_e=1.0, s=0.0, r=1.0, a=0.0,
                   robust=False, R=1.0):
    model = ErrorModel(epsilon_e=eps_e, s_hat=s, radius_r=r, quantile=1.0,
                       training_states=np.zeros((1, 1)))
    cost = syn.CostSpec(kind="quadratic_l1", Q=[1.0], R=[R])
    return syn.SynthesisProblem(sys=scalar_system(a), T=T, eps_w=eps_w,
                                error_model=model, cost=cost,
                                robustness_enabled=robust)


def test_deadbeat_unique_point():
    prob = scalar_problem()
    resp, report = syn.synthesize(prob)
    np.testing.assert_allclose(resp.phi_xw.taps.ravel(), [1.0, 0.0], atol=1e-8)
    np.testing.assert_allclose(resp.phi_xe.taps.ravel(), [0.0, 0.0], atol=1e-8)
    np.testing.assert_allclose(resp.phi_uw.taps.ravel(), [0.0, 0.0], atol=1e-8)
    np.testing.assert_allclose(resp.phi_ue.taps.ravel(), [0.0, 0.0], atol=1e-8)
    assert syn.cost_value(prob, resp) == pytest.approx(1.0, abs=1e-8)


def test_quadratic_cost_homogeneous_in_error_levels():
    base = scalar_problem()
    resp, _ = syn.synthesize(base)
    for alpha in (0.5, 2.5):
        scaled = scalar_problem(eps_w=alpha, eps_e=alpha)
        assert syn.cost_value(scaled, resp) == \
            pytest.approx(alpha * syn.cost_value(base, resp), rel=1e-12)


def test_quadratic_cost_matches_stacked_norm_oracle():
    rng = np.random.default_rng(2)
    prob = scalar_problem(T=3, eps_w=0.3, eps_e=0.7, R=4.0)
    sys = prob.sys
    resp = SystemResponses(
        phi_xw=FirOperator(rng.normal(size=(3, 1, 1))),
        phi_xe=FirOperator(rng.normal(size=(3, 1, 1))),
        phi_uw=FirOperator(rng.normal(size=(3, 1, 1))),
        phi_ue=FirOperator(rng.normal(size=(3, 1, 1))), horizon=3)
    # stacked weighted operator [sqrt(Q) phi_xw H eps_w, sqrt(Q) phi_xe eps_e;
    #                            sqrt(R) phi_uw H eps_w, sqrt(R) phi_ue eps_e]
    row_x = (0.3 * np.abs(resp.phi_xw.taps * sys.H).sum()
             + 0.7 * np.abs(resp.phi_xe.taps).sum())
    row_u = 2.0 * (0.3 * np.abs(resp.phi_uw.taps * sys.H).sum()
                   + 0.7 * np.abs(resp.phi_ue.taps).sum())
    assert syn.quadratic_l1_cost(prob, resp) == \
        pytest.approx(max(row_x, row_u), rel=1e-12)


def test_imitation_cost_zero_at_nominal(mild_setup, mild_model, mild_nominal):
    nom, _ = mild_nominal
    cost = syn.CostSpec(kind="imitation", Q=mild_setup.cost_q,
                        R=mild_setup.cost_r, nominal=nom)
    prob = make_problem(mild_setup, mild_model, robust=False, cost=cost)
    assert syn.imitation_cost(prob, nom) == 0.0


def test_robustness_constraint_arithmetic():
    # r = 1, S = 1, eps_e = 0.5: the constraint (1 + 0.5)|phi_xe| <= ~1
    # caps |phi_xe| at 2/3 when eps_w = 0
    prob = scalar_problem(eps_w=0.0, eps_e=0.5, s=1.0, r=1.0, robust=True)
    c_xe, c_xw, rhs = syn.robustness_constraint(prob)
    assert c_xe == pytest.approx(1.5)
    assert c_xw == pytest.approx(0.0)
    assert rhs == pytest.approx(1.0 - prob.margin)
    assert rhs / c_xe == pytest.approx(2.0 / 3.0, abs=1e-3)


def test_structural_infeasibility():
    prob = scalar_problem(robust=True)
    prob.d_max = 2.0  # exceeds the radius r = 1
    with pytest.raises(syn.StructuralInfeasibilityError):
        syn.robustness_constraint(prob)


def test_guarantee_gamma_and_void():
    assert syn.guarantee_gamma(2.0, 0.25, 0.1) == pytest.approx(0.2)
    with pytest.raises(syn.GuaranteeVoidError):
        syn.guarantee_gamma(2.0, 0.5, 0.1)


def test_guarantee_report_json_round_trip():
    rep = syn.GuaranteeReport(phi_xe_norm=2.5, gamma=0.55, s_used=0.2,
                              r0=0.22, feasibility_margin=0.1)
    r2 = syn.GuaranteeReport.from_json(rep.to_json())
    assert r2 == rep
    void = syn.GuaranteeReport(phi_xe_norm=5.0, gamma=None, s_used=0.5,
                               r0=0.22, feasibility_margin=0.0,
                               guarantee_void=True)
    assert json.loads(void.to_json())["gamma"] is None


def test_achievability_residual_small_at_solution(mild_setup, mild_robust):
    resp, _ = mild_robust
    ach = syn.achievability_constraints(mild_setup.system, mild_setup.horizon,
                                        include_implied=True)
    assert ach.residual(resp) <= 1e-8


def test_z_domain_residuals_detect_perturbation(mild_setup, mild_robust):
    resp, _ = mild_robust
    zs = np.exp(1j * np.linspace(0.1, 6.0, 7))
    res = syn.z_domain_residuals(mild_setup.system, resp, zs)
    assert res["left"] <= 1e-7 and res["right"] <= 1e-7
    taps = resp.phi_uw.taps.copy()
    taps[2, 0, 0] += 1e-3
    bad = SystemResponses(phi_xw=resp.phi_xw, phi_xe=resp.phi_xe,
                          phi_uw=FirOperator(taps), phi_ue=resp.phi_ue,
                          horizon=resp.horizon)
    res_bad = syn.z_domain_residuals(mild_setup.system, bad, zs)
    assert max(res_bad.values()) > 1e-5


def test_robust_cost_dominates_unconstrained(mild_setup, mild_model,
                                             mild_nominal, mild_robust):
    nom_resp, _ = mild_nominal
    rob_resp, _ = mild_robust
    prob = make_problem(mild_setup, mild_model, robust=False)
    assert syn.cost_value(prob, rob_resp) >= \
        syn.cost_value(prob, nom_resp) - 1e-9


def test_imitation_repairs_violating_nominal(mild_setup, mild_nominal):
    # with an inflated slope the unconstrained optimum violates robustness;
    # imitating it under the constraint must end at a feasible point with a
    # strictly positive distance
    nom, _ = mild_nominal
    model = explicit_model(0.108, 0.16, radius=mild_setup.radius)
    quad_prob = make_problem(mild_setup, model, robust=True)
    assert syn.robustness_margin(quad_prob, nom) < -1e-3
    cost = syn.CostSpec(kind="imitation", Q=mild_setup.cost_q,
                        R=mild_setup.cost_r, nominal=nom)
    prob = make_problem(mild_setup, model, robust=True, cost=cost)
    resp, report = syn.synthesize(prob)
    assert syn.imitation_cost(prob, resp) > 1e-3
    assert report.feasibility_margin >= -1e-7


def test_cost_spec_validation():
    with pytest.raises(ValueError):
        syn.CostSpec(kind="bogus", Q=[1.0], R=[1.0])
    with pytest.raises(ValueError):
        syn.CostSpec(kind="imitation", Q=[1.0], R=[1.0])
    with pytest.raises(ValueError):
        syn.CostSpec(kind="quadratic_l1", Q=[-1.0], R=[1.0]).weights(1, 1)


def test_problem_validation():
    model = ErrorModel(epsilon_e=0.1, s_hat=0.1, radius_r=1.0, quantile=1.0,
                       training_states=np.zeros((1, 1)))
    cost = syn.CostSpec(kind="quadratic_l1", Q=[1.0], R=[1.0])
    with pytest.raises(ValueError):
        syn.SynthesisProblem(sys=scalar_system(), T=1, eps_w=0.0,
                             error_model=model, cost=cost)
    with pytest.raises(ValueError):
        syn.SynthesisProblem(sys=scalar_system(), T=2, eps_w=-0.1,
                             error_model=model, cost=cost)
    prob = syn.SynthesisProblem(sys=scalar_system(), T=2, eps_w=0.0,
                                error_model=model, cost=cost)
    assert prob.r0 == model.epsilon_e
