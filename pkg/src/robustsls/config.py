"""Experiment configuration: JSON schema, defaults, and run manifests.

A config is one JSON document. Every field has a default; user files are
deep-merged over the defaults and then schema-validated, so a partial
config is always valid. The manifest records a hash of the effective
config plus every artifact a command wrote.
"""

from __future__ import annotations

import copy
import datetime
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np
import jsonschema

from . import __version__
from .error_model import ErrorModel
from .lti_model import (DiscreteLtiSystem, QuadrotorParams, discretize,
                        quadrotor_hover_model)
from .sim_harness import CircleReference, SyntheticPerceptionModel


class ConfigError(ValueError):
    """Malformed or schema-violating configuration."""


_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}
_NONNEG = {"type": "number", "minimum": 0}
_VEC = {"type": "array", "items": _NUM, "minItems": 1}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "system": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"mass": _POS, "g": _POS, "dt": _POS},
        },
        "horizon": {"type": "integer", "minimum": 2},
        "controller_horizon": {"type": ["integer", "null"], "minimum": 1},
        "error_model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "radius": _POS,
                "q_eps": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "q_slope": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "s_explicit": {"type": ["number", "null"], "minimum": 0},
                "eps_e_explicit": {"type": ["number", "null"], "minimum": 0},
            },
        },
        "robustness": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "enabled": {"type": "boolean"},
                "eps_w": _NONNEG,
                "d_max": _NONNEG,
                "margin": _POS,
                "r0": {"type": ["number", "null"], "exclusiveMinimum": 0},
            },
        },
        "cost": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": ["quadratic_l1", "imitation"]},
                "q": _VEC,
                "r": _VEC,
            },
        },
        "perception": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "bias_amplitudes": _VEC,
                "bias_frequencies": _VEC,
                "bias_directions": {"type": "array", "items": _VEC},
                "bias_phases": _VEC,
                "noise_amplitude": _NONNEG,
                "degradation_factor": _NONNEG,
                "seed": {"type": "integer", "minimum": 0},
            },
        },
        "reference": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "radius": _NONNEG,
                "period": _POS,
                "height": _NUM,
                "laps": {"type": "integer", "minimum": 1},
            },
        },
        "pd": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"kp": _VEC, "kd": _VEC},
        },
        "experiment": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "num_seeds": {"type": "integer", "minimum": 1},
                "base_seed": {"type": "integer", "minimum": 0},
                "training_seed": {"type": "integer", "minimum": 0},
                "training_steps": {"type": ["integer", "null"], "minimum": 2},
                "steps": {"type": ["integer", "null"], "minimum": 1},
                "degraded_factor": _POS,
                "smoothing_time_constant": _POS,
                "use_pd_z": {"type": "boolean"},
                "render_figures": {"type": "boolean"},
            },
        },
        "simulate": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "seed": {"type": "integer", "minimum": 0},
                "steps": {"type": ["integer", "null"], "minimum": 1},
                "controller": {"enum": ["pd", "fir"]},
                "impulse_channel": {"enum": [None, "w", "e"]},
                "impulse_index": {"type": "integer", "minimum": 0},
            },
        },
    },
}

DEFAULT_CONFIG = {
    "system": {"mass": 0.256, "g": 9.81, "dt": 0.1},
    "horizon": 20,
    "controller_horizon": None,
    "error_model": {
        "radius": 5.0,
        "q_eps": 1.0,
        "q_slope": 0.95,
        "s_explicit": None,
        "eps_e_explicit": None,
    },
    "robustness": {
        "enabled": True,
        "eps_w": 0.05,
        "d_max": 0.0,
        "margin": 1e-3,
        "r0": None,
    },
    "cost": {
        "kind": "quadratic_l1",
        # weighting velocity deviations keeps the synthesized loop from
        # chasing velocity-measurement errors, which is what the bias field
        # below punishes
        "q": [1.0, 1.0, 1.0, 4.0, 4.0, 4.0],
        "r": [1.0, 1.0, 1.0],
    },
    "perception": {
        "bias_amplitudes": [0.24, 0.24, 0.24, 0.24, 0.24, 0.24],
        "bias_frequencies": [1.2, 1.2, 1.2, 1.2, 1.2, 1.2],
        # each bias component reads one velocity coordinate, so imperfect
        # velocity regulation moves the error along the bias field; the
        # half-turn phase makes the field punish controllers that chase the
        # corrupted measurement
        "bias_directions": [
            [0, 0, 0, 1, 0, 0], [0, 0, 0, 0, 1, 0], [0, 0, 0, 0, 0, 1],
            [0, 0, 0, 1, 0, 0], [0, 0, 0, 0, 1, 0], [0, 0, 0, 0, 0, 1],
        ],
        "bias_phases": [3.141592653589793, 3.141592653589793,
                        3.141592653589793, 3.141592653589793,
                        3.141592653589793, 3.141592653589793],
        "noise_amplitude": 0.008,
        "degradation_factor": 1.0,
        "seed": 1234,
    },
    "reference": {"radius": 1.0, "period": 10.0, "height": 1.0, "laps": 3},
    "pd": {"kp": [4.0, 4.0, 4.0], "kd": [3.0, 3.0, 3.0]},
    "experiment": {
        "num_seeds": 20,
        "base_seed": 100,
        "training_seed": 7,
        "training_steps": None,
        "steps": None,
        "degraded_factor": 4.0,
        "smoothing_time_constant": 1.0,
        "use_pd_z": False,
        "render_figures": False,
    },
    "simulate": {
        "seed": 0,
        "steps": None,
        "controller": "pd",
        "impulse_channel": None,
        "impulse_index": 0,
    },
}


def _deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


def load_config(source=None) -> dict:
    """Merge a user config (path or dict) over the defaults and validate."""
    if source is None:
        doc = {}
    elif isinstance(source, dict):
        doc = source
    else:
        try:
            with open(source) as fh:
                doc = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a JSON object")
    merged = _deep_merge(DEFAULT_CONFIG, doc)
    try:
        jsonschema.validate(merged, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        path = "/".join(str(p) for p in exc.absolute_path) or "(root)"
        raise ConfigError(f"config field {path}: {exc.message}") from exc
    return merged


def config_hash(cfg: dict) -> str:
    canonical = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


# ---------------------------------------------------------------------------
# typed view used by the experiment pipeline


@dataclass
class ExperimentSetup:
    system: DiscreteLtiSystem
    params: QuadrotorParams
    reference: CircleReference
    perception: SyntheticPerceptionModel
    horizon: int
    controller_horizon: int
    eps_w: float
    d_max: float
    margin: float
    r0: float
    radius: float
    q_eps: float
    q_slope: float
    error_model: ErrorModel
    cost_q: np.ndarray
    cost_r: np.ndarray
    pd_kp: np.ndarray
    pd_kd: np.ndarray
    num_seeds: int
    base_seed: int
    training_seed: int
    training_steps: int
    steps: int
    degraded_factor: float
    smoothing_time_constant: float
    use_pd_z: bool
    render_figures: bool


def build_setup(cfg: dict) -> ExperimentSetup:
    """Construct the typed objects the pipeline needs from a validated config."""
    params = QuadrotorParams(mass=cfg["system"]["mass"], g=cfg["system"]["g"])
    sys = discretize(quadrotor_hover_model(params), cfg["system"]["dt"])
    ref_cfg = cfg["reference"]
    ref = CircleReference(radius=ref_cfg["radius"], period=ref_cfg["period"],
                          height=ref_cfg["height"], dt=cfg["system"]["dt"],
                          laps=ref_cfg["laps"])
    per = cfg["perception"]
    perception = SyntheticPerceptionModel(
        bias_amplitudes=per["bias_amplitudes"],
        bias_frequencies=per["bias_frequencies"],
        bias_directions=per["bias_directions"],
        bias_phases=per["bias_phases"],
        noise_amplitude=per["noise_amplitude"],
        degradation_factor=per["degradation_factor"],
        seed=per["seed"])
    if perception.p != sys.p or perception.bias_directions.shape[1] != sys.n:
        raise ConfigError("perception model dimensions must match the system")

    em_cfg = cfg["error_model"]
    explicit = None
    if em_cfg["s_explicit"] is not None or em_cfg["eps_e_explicit"] is not None:
        if em_cfg["s_explicit"] is None or em_cfg["eps_e_explicit"] is None:
            raise ConfigError(
                "s_explicit and eps_e_explicit must be given together")
        explicit = ErrorModel(epsilon_e=em_cfg["eps_e_explicit"],
                              s_hat=em_cfg["s_explicit"],
                              radius_r=em_cfg["radius"],
                              quantile=em_cfg["q_slope"],
                              training_states=np.zeros((1, sys.n)))

    exp = cfg["experiment"]
    horizon = cfg["horizon"]
    # the deconvolved controller's taps decay slowly for the quadrotor, so
    # the default keeps enough of them for a negligible truncation tail
    t_k = cfg["controller_horizon"] or max(160, 2 * horizon)
    return ExperimentSetup(
        system=sys,
        params=params,
        reference=ref,
        perception=perception,
        horizon=horizon,
        controller_horizon=t_k,
        eps_w=cfg["robustness"]["eps_w"],
        d_max=cfg["robustness"]["d_max"],
        margin=cfg["robustness"]["margin"],
        r0=cfg["robustness"]["r0"],
        radius=em_cfg["radius"],
        q_eps=em_cfg["q_eps"],
        q_slope=em_cfg["q_slope"],
        error_model=explicit,
        cost_q=np.asarray(cfg["cost"]["q"], dtype=float),
        cost_r=np.asarray(cfg["cost"]["r"], dtype=float),
        pd_kp=np.asarray(cfg["pd"]["kp"], dtype=float),
        pd_kd=np.asarray(cfg["pd"]["kd"], dtype=float),
        num_seeds=exp["num_seeds"],
        base_seed=exp["base_seed"],
        training_seed=exp["training_seed"],
        training_steps=exp["training_steps"] or ref.steps,
        steps=exp["steps"] or ref.steps,
        degraded_factor=exp["degraded_factor"],
        smoothing_time_constant=exp["smoothing_time_constant"],
        use_pd_z=exp["use_pd_z"],
        render_figures=exp["render_figures"],
    )


@dataclass
class RunManifest:
    config_hash: str
    artifacts: list = field(default_factory=list)
    version: str = __version__
    timestamp: str = ""

    def add(self, path):
        self.artifacts.append(str(path))

    def to_json(self) -> str:
        stamp = self.timestamp or datetime.datetime.now(
            datetime.timezone.utc).isoformat()
        return json.dumps({
            "config_hash": self.config_hash,
            "artifacts": sorted(self.artifacts),
            "version": self.version,
            "timestamp": stamp,
        }, indent=2)

    def write(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_json())
            fh.write("\n")
