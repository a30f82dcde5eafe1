"""Closed-loop quadrotor simulation with synthetic perception.

The perception stand-in is a sinusoidal bias field plus bounded uniform
noise, so its Lipschitz constant and error bound are known in closed form
and the synthesized guarantee can actually be checked. All simulations are
seeded and deterministic.

Input conventions: the plant's LTI input is the deviation from hover trim,
controllers return deviation corrections, and the logged input u is the
physical command u_ff + correction (thrust column includes m*g).
"""

from __future__ import annotations

import csv
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .error_model import TrajectoryDataset, fit as fit_error_model
from .lti_model import DimensionError, DiscreteLtiSystem, QuadrotorParams
from .sls_ops import FirController, MeasurementBuffer, controller_step


class SimulationDivergedError(RuntimeError):
    """The state left the representable range; carries the abort step."""

    def __init__(self, step, log=None):
        super().__init__(f"simulation diverged (non-finite state) at step {step}")
        self.step = step
        self.log = log


# ---------------------------------------------------------------------------
# reference trajectory


@dataclass(frozen=True)
class CircleReference:
    """Constant-height circle, parameterized by time; radius 0 means hover."""

    radius: float = 1.0
    period: float = 10.0
    height: float = 1.0
    dt: float = 0.1
    laps: int = 3

    def __post_init__(self):
        if self.radius < 0:
            raise ValueError("radius must be non-negative")
        if self.period <= 0 or self.dt <= 0:
            raise ValueError("period and dt must be positive")
        if self.laps < 1:
            raise ValueError("laps must be at least 1")

    @property
    def steps(self) -> int:
        return int(round(self.laps * self.period / self.dt))


def reference_signal(ref: CircleReference, k: int,
                     params: QuadrotorParams = QuadrotorParams()):
    """Reference state and physical feedforward input at step k.

    The feedforward supplies the centripetal acceleration through the hover
    linearization's input map plus the trim thrust (0, 0, m*g).
    """
    if k < 0:
        raise ValueError("step index must be non-negative")
    w = 2.0 * math.pi / ref.period
    ang = w * k * ref.dt
    R = ref.radius
    c, s = math.cos(ang), math.sin(ang)
    x_ref = np.array([R * c, R * s, ref.height,
                      -R * w * s, R * w * c, 0.0])
    acc = np.array([-R * w * w * c, -R * w * w * s, 0.0])
    u_ff = np.array([-acc[0] / params.g, acc[1] / params.g,
                     params.mass * acc[2] + params.hover_thrust])
    return x_ref, u_ff


# ---------------------------------------------------------------------------
# synthetic perception


@dataclass(frozen=True)
class SyntheticPerceptionModel:
    """Sinusoidal state-dependent bias plus bounded uniform noise.

    Component i of the bias field is
        amplitude_i * sin(frequency_i * <direction_i, x> + phase_i),
    so its infinity-norm Lipschitz constant is available in closed form.
    The noise is uniform in [-a, a] per coordinate with
    a = noise_amplitude * degradation_factor, deterministic given (seed, k).
    """

    bias_amplitudes: np.ndarray      # (p,)
    bias_frequencies: np.ndarray     # (p,)
    bias_directions: np.ndarray      # (p, n)
    bias_phases: np.ndarray          # (p,)
    noise_amplitude: float = 0.0
    degradation_factor: float = 1.0
    seed: int = 0

    def __post_init__(self):
        amp = np.atleast_1d(np.asarray(self.bias_amplitudes, dtype=float))
        freq = np.atleast_1d(np.asarray(self.bias_frequencies, dtype=float))
        dirs = np.atleast_2d(np.asarray(self.bias_directions, dtype=float))
        ph = np.atleast_1d(np.asarray(self.bias_phases, dtype=float))
        p = amp.shape[0]
        if freq.shape != (p,) or ph.shape != (p,) or dirs.shape[0] != p:
            raise DimensionError("bias field parameter shapes inconsistent")
        if np.any(amp < 0) or np.any(freq < 0):
            raise ValueError("amplitudes and frequencies must be non-negative")
        if self.noise_amplitude < 0 or self.degradation_factor < 0:
            raise ValueError("noise amplitude and degradation must be non-negative")
        object.__setattr__(self, "bias_amplitudes", amp)
        object.__setattr__(self, "bias_frequencies", freq)
        object.__setattr__(self, "bias_directions", dirs)
        object.__setattr__(self, "bias_phases", ph)

    @property
    def p(self) -> int:
        return self.bias_amplitudes.shape[0]

    @property
    def noise_bound(self) -> float:
        return float(self.noise_amplitude * self.degradation_factor)

    def bias(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        arg = self.bias_frequencies * (self.bias_directions @ x) + self.bias_phases
        return self.bias_amplitudes * np.sin(arg)

    def lipschitz_bound(self) -> float:
        """Closed-form bias Lipschitz constant in the infinity norm."""
        rows = (self.bias_amplitudes * self.bias_frequencies
                * np.abs(self.bias_directions).sum(axis=1))
        return float(rows.max(initial=0.0))

    def error_bound(self) -> float:
        """Hard upper bound on the per-step perception error norm."""
        return float(self.bias_amplitudes.max(initial=0.0) + self.noise_bound)

    def noise_sequence(self, steps: int) -> np.ndarray:
        """First `steps` noise draws; perceive(x, k) uses row k of this."""
        rng = np.random.default_rng(self.seed)
        a = self.noise_bound
        return rng.uniform(-a, a, size=(steps, self.p))

    def with_degradation(self, factor: float) -> "SyntheticPerceptionModel":
        return SyntheticPerceptionModel(
            bias_amplitudes=self.bias_amplitudes,
            bias_frequencies=self.bias_frequencies,
            bias_directions=self.bias_directions,
            bias_phases=self.bias_phases,
            noise_amplitude=self.noise_amplitude,
            degradation_factor=factor,
            seed=self.seed)


def perceive(model: SyntheticPerceptionModel, x, k: int, C=None) -> np.ndarray:
    """y = C x + bias(x) + noise_k, deterministic given (seed, k)."""
    x = np.asarray(x, dtype=float)
    Cx = x if C is None else np.asarray(C, dtype=float) @ x
    return Cx + model.bias(x) + model.noise_sequence(k + 1)[k]


# ---------------------------------------------------------------------------
# controllers (tracking-error in, deviation-from-trim correction out)


@dataclass
class PdController:
    """Proportional-derivative law through the inverted hover input map.

    With tracking error ytilde (measured minus reference), the commanded
    acceleration is a = kp*(pos error) + kd*(vel error) where errors are
    -ytilde; the standalone physical command is theta = -a_x/g,
    phi = a_y/g, thrust = m*(g + a_z). step() returns the correction with
    the trim removed, so the simulator adds trim exactly once via u_ff.
    """

    kp: np.ndarray
    kd: np.ndarray
    params: QuadrotorParams = QuadrotorParams()

    def __post_init__(self):
        self.kp = np.atleast_1d(np.asarray(self.kp, dtype=float))
        self.kd = np.atleast_1d(np.asarray(self.kd, dtype=float))
        if self.kp.shape != (3,) or self.kd.shape != (3,):
            raise DimensionError("kp and kd must be 3-vectors")
        if not (np.all(np.isfinite(self.kp)) and np.all(np.isfinite(self.kd))):
            raise ValueError("gains must be finite")

    def reset(self):
        pass

    def step(self, y_tilde) -> np.ndarray:
        err = -np.asarray(y_tilde, dtype=float)
        a = self.kp * err[:3] + self.kd * err[3:6]
        return np.array([-a[0] / self.params.g, a[1] / self.params.g,
                         self.params.mass * a[2]])


class FirTrackingController:
    """Strictly proper FIR law on tracking-error measurements."""

    def __init__(self, ctrl: FirController):
        self.ctrl = ctrl
        self.buffer = MeasurementBuffer(ctrl.horizon, ctrl.p)

    def reset(self):
        self.buffer.reset()

    def step(self, y_tilde) -> np.ndarray:
        u = controller_step(self.ctrl, self.buffer)
        self.buffer.push(np.asarray(y_tilde, dtype=float))
        return u


class MixedController:
    """Primary controller with selected axes overridden by a PD law."""

    def __init__(self, primary, pd: PdController, pd_axes=(2,)):
        self.primary = primary
        self.pd = pd
        self.pd_axes = tuple(pd_axes)

    def reset(self):
        self.primary.reset()
        self.pd.reset()

    def step(self, y_tilde) -> np.ndarray:
        u = np.array(self.primary.step(y_tilde), dtype=float)
        u_pd = self.pd.step(y_tilde)
        for ax in self.pd_axes:
            u[ax] = u_pd[ax]
        return u


# ---------------------------------------------------------------------------
# simulation log


@dataclass(frozen=True)
class SimLog:
    times: np.ndarray         # (N,)
    states: np.ndarray        # (N, n) true state
    references: np.ndarray    # (N, n)
    measurements: np.ndarray  # (N, p)
    inputs: np.ndarray        # (N, m) physical inputs
    errors: np.ndarray        # (N, p) perception errors y - Cx

    def __post_init__(self):
        arrays = [np.asarray(getattr(self, f), dtype=float)
                  for f in ("times", "states", "references", "measurements",
                            "inputs", "errors")]
        N = arrays[0].shape[0]
        if any(a.shape[0] != N for a in arrays):
            raise DimensionError("log columns must have equal length")
        if N == 0:
            raise ValueError("log must be non-empty")
        for f, a in zip(("times", "states", "references", "measurements",
                         "inputs", "errors"), arrays):
            object.__setattr__(self, f, a)

    def __len__(self):
        return self.times.shape[0]

    @property
    def error_norms(self) -> np.ndarray:
        return np.max(np.abs(self.errors), axis=1)

    def to_dataset(self) -> TrajectoryDataset:
        return TrajectoryDataset(times=self.times, states=self.states,
                                 measurements=self.measurements)

    def write_csv(self, path):
        n = self.states.shape[1]
        p = self.measurements.shape[1]
        m = self.inputs.shape[1]
        header = (["t"] + [f"x{i}" for i in range(n)]
                  + [f"xr{i}" for i in range(n)]
                  + [f"y{i}" for i in range(p)]
                  + [f"u{i}" for i in range(m)]
                  + [f"e{i}" for i in range(p)] + ["enorm"])
        norms = self.error_norms
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for k in range(len(self)):
                row = ([repr(float(self.times[k]))]
                       + [repr(float(v)) for v in self.states[k]]
                       + [repr(float(v)) for v in self.references[k]]
                       + [repr(float(v)) for v in self.measurements[k]]
                       + [repr(float(v)) for v in self.inputs[k]]
                       + [repr(float(v)) for v in self.errors[k]]
                       + [repr(float(norms[k]))])
                w.writerow(row)

    @classmethod
    def read_csv(cls, path) -> "SimLog":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            try:
                header = [h.strip() for h in next(reader)]
            except StopIteration:
                raise ValueError(f"{path}: empty CSV")
            groups = {"x": [], "xr": [], "y": [], "u": [], "e": []}
            for i, h in enumerate(header):
                for prefix in ("xr", "x", "y", "u", "e"):
                    if h.startswith(prefix) and h[len(prefix):].isdigit():
                        groups[prefix].append(i)
                        break
            if header[0] != "t" or not groups["x"] or not groups["xr"]:
                raise ValueError(f"{path}: header does not match the SimLog schema")
            rows = []
            for lineno, row in enumerate(reader, start=2):
                if not row:
                    continue
                try:
                    rows.append([float(v) for v in row])
                except ValueError as exc:
                    raise ValueError(f"{path}: line {lineno}: {exc}") from None
                if len(rows[-1]) != len(header):
                    raise ValueError(f"{path}: line {lineno}: wrong field count")
        data = np.asarray(rows, dtype=float)
        return cls(times=data[:, 0],
                   states=data[:, groups["x"]],
                   references=data[:, groups["xr"]],
                   measurements=data[:, groups["y"]],
                   inputs=data[:, groups["u"]],
                   errors=data[:, groups["e"]])


# ---------------------------------------------------------------------------
# simulation


def simulate(sys: DiscreteLtiSystem, controller, ref: CircleReference,
             perception: SyntheticPerceptionModel = None, eps_w: float = 0.0,
             steps: int = None, seed: int = 0,
             params: QuadrotorParams = QuadrotorParams(),
             x0=None) -> SimLog:
    """Run the tracking loop and log everything.

    Per step: y = C x + perception error; tracking measurement
    ytilde = y - C x_ref; physical input u = u_ff + controller(ytilde);
    state update x+ = A x + B (u - trim) + H w with seeded uniform w,
    |w|_inf <= eps_w.
    """
    if steps is None:
        steps = ref.steps
    if steps < 1:
        raise ValueError("steps must be positive")
    n, p, m, d = sys.n, sys.p, sys.m, sys.d
    if perception is not None and perception.p != p:
        raise DimensionError("perception output dimension mismatch")

    trim = np.array([0.0, 0.0, params.hover_thrust])
    w_seq = np.random.default_rng(seed).uniform(-eps_w, eps_w, size=(steps, d)) \
        if eps_w > 0 else np.zeros((steps, d))
    noise = (perception.noise_sequence(steps) if perception is not None
             else np.zeros((steps, p)))

    refs = np.empty((steps, n))
    ffs = np.empty((steps, m))
    for k in range(steps):
        refs[k], ffs[k] = reference_signal(ref, k, params)

    x = refs[0].copy() if x0 is None else np.asarray(x0, dtype=float).copy()
    controller.reset()

    T = np.empty(steps)
    X = np.empty((steps, n))
    Y = np.empty((steps, p))
    U = np.empty((steps, m))
    E = np.empty((steps, p))
    A, B, C, H = sys.A, sys.B, sys.C, sys.H
    for k in range(steps):
        if not np.all(np.isfinite(x)):
            partial = SimLog(times=T[:k], states=X[:k], references=refs[:k],
                             measurements=Y[:k], inputs=U[:k],
                             errors=E[:k]) if k else None
            raise SimulationDivergedError(k, log=partial)
        Cx = C @ x
        e = (perception.bias(x) + noise[k]) if perception is not None else noise[k]
        y = Cx + e
        y_tilde = y - C @ refs[k]
        u = ffs[k] + controller.step(y_tilde)
        T[k] = k * sys.dt
        X[k] = x
        Y[k] = y
        U[k] = u
        E[k] = e
        x = A @ x + B @ (u - trim) + H @ w_seq[k]

    return SimLog(times=T, states=X, references=refs, measurements=Y,
                  inputs=U, errors=E)


def impulse_response(sys: DiscreteLtiSystem, controller, channel: str,
                     index: int, steps: int):
    """Closed-loop response to a unit impulse in the disturbance or the
    perception error, with everything else zero.

    channel "w" injects a unit vector directly into the state update at
    k=0 (the disturbance as seen by the closed loop); channel "e" adds a
    unit vector to the measurement at k=0. Returns (X, U) with X[k], U[k]
    the state and input at step k; X matches the w/e-to-state response taps
    and U the w/e-to-input taps for k >= 1.
    """
    if channel not in ("w", "e"):
        raise ValueError("channel must be 'w' or 'e'")
    n, p, m = sys.n, sys.p, sys.m
    dim = n if channel == "w" else p
    if not (0 <= index < dim):
        raise ValueError(f"impulse index out of range [0, {dim})")
    controller.reset()
    x = np.zeros(n)
    X = np.zeros((steps, n))
    U = np.zeros((steps, m))
    for k in range(steps):
        X[k] = x
        y = sys.C @ x
        if channel == "e" and k == 0:
            y = y + np.eye(p)[index]
        u = controller.step(y)
        U[k] = u
        x = sys.A @ x + sys.B @ u
        if channel == "w" and k == 0:
            x = x + np.eye(n)[index]
    return X, U


# ---------------------------------------------------------------------------
# metrics and smoothing


@dataclass
class MetricsSummary:
    tracking_rmse: float
    max_error_norm: float
    mean_error_norm: float
    gamma: float = None
    bound_satisfied: bool = None

    def to_json(self) -> str:
        return json.dumps({
            "tracking_rmse": self.tracking_rmse,
            "max_error_norm": self.max_error_norm,
            "mean_error_norm": self.mean_error_norm,
            "gamma": self.gamma,
            "bound_satisfied": self.bound_satisfied,
        }, indent=2)


def metrics(log: SimLog, report=None) -> MetricsSummary:
    """Tracking RMSE (position), perception error stats, and the bound check."""
    pos_err = log.states[:, :3] - log.references[:, :3]
    rmse = float(np.sqrt(np.mean(np.sum(pos_err ** 2, axis=1))))
    norms = log.error_norms
    max_e = float(norms.max())
    mean_e = float(norms.mean())
    gamma = None if report is None else report.gamma
    satisfied = None if gamma is None else bool(max_e <= gamma)
    return MetricsSummary(tracking_rmse=rmse, max_error_norm=max_e,
                          mean_error_norm=mean_e, gamma=gamma,
                          bound_satisfied=satisfied)


def smooth(series, time_constant: float, dt: float) -> np.ndarray:
    """Causal moving average over ceil(time_constant/dt) samples.

    Partial windows at the start are averaged over the available samples,
    so a constant series is preserved exactly.
    """
    if time_constant < dt:
        raise ValueError("time constant must be at least dt")
    series = np.asarray(series, dtype=float)
    window = math.ceil(time_constant / dt)
    csum = np.concatenate([[0.0], np.cumsum(series)])
    out = np.empty_like(series, dtype=float)
    N = series.shape[0]
    for k in range(N):
        lo = max(0, k + 1 - window)
        out[k] = (csum[k + 1] - csum[lo]) / (k + 1 - lo)
    return out


# ---------------------------------------------------------------------------
# the controller-comparison experiment

CONTROLLER_NAMES = ("pd", "l1_nominal", "l1_robust", "l1_robust_imitation")
CONDITIONS = ("nominal", "degraded")


def _thread_count() -> int:
    raw = os.environ.get("SLS_ROBUST_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def run_experiment(setup) -> dict:
    """Run the 4-controller x {nominal, degraded} comparison matrix.

    `setup` is an ExperimentSetup (see the config module). Synthesis
    failures are recorded per controller; the remaining controllers still
    run. Returns a report dict plus representative logs for figure output.
    """
    # imports deferred: synthesis pulls in the LP machinery
    from . import synthesis as syn

    sys = setup.system
    ref = setup.reference
    params = setup.params
    perception = setup.perception
    degraded = perception.with_degradation(
        perception.degradation_factor * setup.degraded_factor)

    # training data: PD flying the reference under the baseline sensor
    pd = PdController(kp=setup.pd_kp, kd=setup.pd_kd, params=params)
    train_log = simulate(sys, pd, ref, perception, eps_w=setup.eps_w,
                         steps=setup.training_steps, seed=setup.training_seed,
                         params=params)
    if setup.error_model is not None:
        model = setup.error_model
    else:
        model = fit_error_model(train_log.to_dataset(), sys.C, setup.radius,
                                q_eps=setup.q_eps, q_slope=setup.q_slope)

    def problem(cost, robust):
        return syn.SynthesisProblem(
            sys=sys, T=setup.horizon, eps_w=setup.eps_w, error_model=model,
            cost=cost, d_max=setup.d_max, robustness_enabled=robust,
            margin=setup.margin, r0=setup.r0)

    Q, R = setup.cost_q, setup.cost_r
    controllers = {}
    reports = {}
    responses = {}
    failures = {}

    def build(name, cost, robust):
        try:
            resp, rep = syn.synthesize(problem(cost, robust))
        except (syn.SynthesisInfeasibleError, syn.SynthesisSolverError) as exc:
            failures[name] = {"error": type(exc).__name__, "message": str(exc),
                              "diagnostics": getattr(exc, "diagnostics", {})}
            return None
        from .sls_ops import realize_controller
        fir = realize_controller(resp, setup.controller_horizon)
        controllers[name] = fir
        reports[name] = rep
        responses[name] = resp
        return resp

    quad = syn.CostSpec(kind="quadratic_l1", Q=Q, R=R)
    nominal_resp = build("l1_nominal", quad, robust=False)
    build("l1_robust", quad, robust=True)
    if nominal_resp is not None:
        imit = syn.CostSpec(kind="imitation", Q=Q, R=R, nominal=nominal_resp)
        build("l1_robust_imitation", imit, robust=True)
    else:
        failures["l1_robust_imitation"] = {
            "error": "SkippedError",
            "message": "nominal synthesis failed, no imitation target",
            "diagnostics": {}}

    def make_controller(name):
        if name == "pd":
            return PdController(kp=setup.pd_kp, kd=setup.pd_kd, params=params)
        fir = FirTrackingController(controllers[name])
        if setup.use_pd_z:
            return MixedController(fir, PdController(
                kp=setup.pd_kp, kd=setup.pd_kd, params=params))
        return fir

    seeds = [setup.base_seed + i for i in range(setup.num_seeds)]
    jobs = []
    for name in CONTROLLER_NAMES:
        if name != "pd" and name not in controllers:
            continue
        for condition in CONDITIONS:
            for seed in seeds:
                jobs.append((name, condition, seed))

    def run_one(job):
        name, condition, seed = job
        model_sim = perception if condition == "nominal" else degraded
        log = simulate(sys, make_controller(name), ref, model_sim,
                       eps_w=setup.eps_w, steps=setup.steps, seed=seed,
                       params=params)
        return job, log

    workers = _thread_count()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = dict(pool.map(run_one, jobs))
    else:
        results = dict(run_one(j) for j in jobs)

    cells = {}
    example_logs = {}
    for name in CONTROLLER_NAMES:
        if name != "pd" and name not in controllers:
            continue
        rep = reports.get(name)
        cells[name] = {}
        for condition in CONDITIONS:
            per_seed = []
            for seed in seeds:
                log = results[(name, condition, seed)]
                met = metrics(log, rep)
                per_seed.append({
                    "seed": seed,
                    "tracking_rmse": met.tracking_rmse,
                    "max_error_norm": met.max_error_norm,
                    "mean_error_norm": met.mean_error_norm,
                    "bound_satisfied": met.bound_satisfied,
                })
            example_logs[(name, condition)] = results[(name, condition, seeds[0])]
            maxes = [r["max_error_norm"] for r in per_seed]
            cells[name][condition] = {
                "runs": per_seed,
                "mean_max_error_norm": float(np.mean(maxes)),
                "worst_max_error_norm": float(np.max(maxes)),
                "mean_tracking_rmse": float(np.mean(
                    [r["tracking_rmse"] for r in per_seed])),
                "all_bounds_satisfied": (
                    None if rep is None or rep.gamma is None else
                    all(r["bound_satisfied"] for r in per_seed)),
            }

    report = {
        "error_model": {
            "epsilon_e": model.epsilon_e,
            "s_hat": model.s_hat,
            "radius_r": model.radius_r,
            "quantile": model.quantile,
        },
        "guarantees": {name: {
            "gamma": rep.gamma,
            "phi_xe_norm": rep.phi_xe_norm,
            "s_used": rep.s_used,
            "r0": rep.r0,
            "feasibility_margin": rep.feasibility_margin,
            "guarantee_void": rep.guarantee_void,
        } for name, rep in reports.items()},
        "failures": failures,
        "cells": cells,
        "seeds": seeds,
        "conditions": list(CONDITIONS),
    }
    return {"report": report, "example_logs": example_logs,
            "responses": responses, "controllers": controllers,
            "error_model": model}
