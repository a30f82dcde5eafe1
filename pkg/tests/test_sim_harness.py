import math

import numpy as np
import pytest

from robustsls.lti_model import QuadrotorParams
from robustsls.sim_harness import (CircleReference, FirTrackingController,
                                   MixedController, PdController, SimLog,
                                   SimulationDivergedError,
                                   SyntheticPerceptionModel, metrics,
                                   perceive, reference_signal, simulate,
                                   smooth)
from robustsls.sls_ops import FirController


def default_perception(**over):
    kw = dict(
        bias_amplitudes=[0.24] * 6,
        bias_frequencies=[1.2] * 6,
        bias_directions=np.vstack([np.eye(6)[3:], np.eye(6)[3:]]),
        bias_phases=[math.pi] * 6,
        noise_amplitude=0.008,
        seed=1234)
    kw.update(over)
    return SyntheticPerceptionModel(**kw)


def test_circle_reference_quarter_period():
    ref = CircleReference(radius=1.0, period=10.0, height=1.0, dt=0.1, laps=1)
    assert ref.steps == 100
    x, u_ff = reference_signal(ref, 25)
    w = 2.0 * math.pi / 10.0
    np.testing.assert_allclose(x[:3], [0.0, 1.0, 1.0], atol=1e-12)
    np.testing.assert_allclose(x[3:], [-w, 0.0, 0.0], atol=1e-12)
    assert np.hypot(x[3], x[4]) == pytest.approx(w)


def test_reference_feedforward_trim_thrust():
    ref = CircleReference(radius=1.0, period=10.0, height=1.0, dt=0.1)
    _, u_ff = reference_signal(ref, 0)
    # flat circle: no vertical acceleration, thrust stays at hover trim
    assert u_ff[2] == pytest.approx(2.51136, abs=1e-12)


def test_feedforward_one_step_consistency(quad_sys):
    # starting on the reference with zero feedback, one step stays within
    # O(dt^2) of the reference
    ref = CircleReference(radius=1.0, period=10.0, height=1.0, dt=0.1, laps=1)
    zero = PdController(kp=[0.0] * 3, kd=[0.0] * 3)
    log = simulate(quad_sys, zero, ref, None, steps=2)
    err = np.abs(log.states[1] - log.references[1]).max()
    assert err <= 2.0 * quad_sys.dt ** 2


def test_perception_error_bound_over_random_states():
    model = default_perception()
    rng = np.random.default_rng(0)
    states = rng.uniform(-10, 10, size=(100_000, 6))
    C = np.eye(6)
    # vectorized: |bias(x)| + noise bound covers |y - Cx| for every draw
    arg = (model.bias_frequencies * (states @ model.bias_directions.T)
           + model.bias_phases)
    bias_norms = np.abs(model.bias_amplitudes * np.sin(arg)).max(axis=1)
    assert bias_norms.max() + model.noise_bound <= model.error_bound() + 1e-12
    # spot-check the full perceive() path
    worst = max(np.abs(perceive(model, states[k], k % 50, C)
                       - C @ states[k]).max()
                for k in range(0, 100_000, 5_000))
    assert worst <= model.error_bound() + 1e-12


def test_perception_lipschitz_closed_form():
    model = default_perception()
    assert model.lipschitz_bound() == pytest.approx(0.288)
    # empirical slopes never exceed the closed-form constant
    rng = np.random.default_rng(1)
    x = rng.uniform(-2, 2, size=(400, 6))
    b = np.array([model.bias(xi) for xi in x])
    dx = np.abs(x[:200, None] - x[None, 200:]).max(axis=-1)
    db = np.abs(b[:200, None] - b[None, 200:]).max(axis=-1)
    mask = dx > 0
    assert (db[mask] / dx[mask]).max() <= model.lipschitz_bound() + 1e-12


def test_noise_sequence_deterministic_prefix():
    model = default_perception()
    np.testing.assert_array_equal(model.noise_sequence(10),
                                  model.noise_sequence(25)[:10])
    y1 = perceive(model, np.ones(6), 4)
    y2 = perceive(model, np.ones(6), 4)
    np.testing.assert_array_equal(y1, y2)


def test_with_degradation_scales_noise_only():
    model = default_perception()
    worse = model.with_degradation(4.0)
    assert worse.noise_bound == pytest.approx(4.0 * model.noise_bound)
    assert worse.lipschitz_bound() == model.lipschitz_bound()
    np.testing.assert_array_equal(worse.bias_amplitudes, model.bias_amplitudes)


def test_pd_controller_input_map():
    pd = PdController(kp=[4.0, 4.0, 4.0], kd=[3.0, 3.0, 3.0])
    y_tilde = np.array([0.1, -0.2, 0.3, 0.0, 0.0, 0.0])
    u = pd.step(y_tilde)
    a = 4.0 * -y_tilde[:3]
    assert u[0] == pytest.approx(-a[0] / 9.81)
    assert u[1] == pytest.approx(a[1] / 9.81)
    assert u[2] == pytest.approx(0.256 * a[2])


def test_mixed_controller_overrides_axes():
    fir = FirTrackingController(FirController(np.zeros((2, 3, 6))))
    pd = PdController(kp=[4.0] * 3, kd=[3.0] * 3)
    mixed = MixedController(fir, pd, pd_axes=(2,))
    y_tilde = np.array([0.0, 0.0, 0.5, 0.0, 0.0, 0.0])
    u = mixed.step(y_tilde)
    assert u[0] == 0.0 and u[1] == 0.0
    assert u[2] == pytest.approx(pd.step(y_tilde)[2])


def test_simulate_deterministic_per_seed(quad_sys):
    ref = CircleReference(radius=1.0, period=10.0, height=1.0, dt=0.1, laps=1)
    pd = PdController(kp=[4.0] * 3, kd=[3.0] * 3)
    model = default_perception()
    a = simulate(quad_sys, pd, ref, model, eps_w=0.05, seed=5)
    b = simulate(quad_sys, pd, ref, model, eps_w=0.05, seed=5)
    c = simulate(quad_sys, pd, ref, model, eps_w=0.05, seed=6)
    np.testing.assert_array_equal(a.states, b.states)
    np.testing.assert_array_equal(a.inputs, b.inputs)
    assert np.abs(a.states - c.states).max() > 0


def test_simulate_tracks_reference(quad_sys):
    ref = CircleReference(radius=1.0, period=10.0, height=1.0, dt=0.1, laps=2)
    pd = PdController(kp=[4.0] * 3, kd=[3.0] * 3)
    log = simulate(quad_sys, pd, ref, None)
    pos_err = np.abs(log.states[:, :3] - log.references[:, :3]).max()
    assert pos_err < 0.2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_simulate_diverges_with_positive_feedback(quad_sys):
    ref = CircleReference(radius=1.0, period=10.0, height=1.0, dt=0.1, laps=3)

    class Exploder:
        def reset(self):
            self.u = 1.0

        def step(self, y):
            self.u *= 100.0
            return np.array([0.0, 0.0, self.u])

    with pytest.raises(SimulationDivergedError) as exc:
        simulate(quad_sys, Exploder(), ref, None)
    assert exc.value.step > 0
    assert exc.value.log is not None
    assert len(exc.value.log) == exc.value.step


def test_simlog_csv_round_trip(tmp_path, quad_sys):
    ref = CircleReference(radius=1.0, period=10.0, height=1.0, dt=0.1, laps=1)
    pd = PdController(kp=[4.0] * 3, kd=[3.0] * 3)
    log = simulate(quad_sys, pd, ref, default_perception(), eps_w=0.05, seed=2)
    path = tmp_path / "log.csv"
    log.write_csv(path)
    back = SimLog.read_csv(path)
    np.testing.assert_array_equal(back.states, log.states)
    np.testing.assert_array_equal(back.errors, log.errors)
    np.testing.assert_array_equal(back.inputs, log.inputs)


def test_metrics_against_direct_oracle(quad_sys):
    ref = CircleReference(radius=1.0, period=10.0, height=1.0, dt=0.1, laps=1)
    pd = PdController(kp=[4.0] * 3, kd=[3.0] * 3)
    log = simulate(quad_sys, pd, ref, default_perception(), seed=3)
    summary = metrics(log)
    diffs = log.states[:, :3] - log.references[:, :3]
    rmse = math.sqrt(float(np.mean(np.sum(diffs ** 2, axis=1))))
    assert abs(summary.tracking_rmse - rmse) <= 1e-12
    assert summary.max_error_norm == np.abs(log.errors).max(axis=1).max()
    assert summary.bound_satisfied is None


def test_smooth_impulse_plateau():
    series = np.zeros(50)
    series[20] = 1.0
    out = smooth(series, 1.0, 0.1)  # 10-sample window
    np.testing.assert_allclose(out[20:30], 0.1)
    np.testing.assert_allclose(out[:20], 0.0)
    np.testing.assert_allclose(out[30:], 0.0)


def test_smooth_preserves_constants():
    out = smooth(np.full(30, 2.5), 1.0, 0.1)
    np.testing.assert_allclose(out, 2.5)
