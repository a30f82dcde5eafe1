"""Linear time-invariant plant models and the quadrotor near-hover instance.

State convention for the quadrotor: x = [x, y, z, vx, vy, vz], inputs
u = [pitch, roll, thrust] expressed as deviations from the hover trim
(0, 0, m*g). Yaw is held at zero and excluded.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg


class DimensionError(ValueError):
    """Raised when matrix/vector dimensions are inconsistent."""


def _as_matrix(M, name: str) -> np.ndarray:
    M = np.asarray(M, dtype=float)
    if M.ndim != 2:
        raise DimensionError(f"{name} must be a 2-D matrix, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise ValueError(f"{name} contains non-finite entries")
    return M


@dataclass(frozen=True)
class QuadrotorParams:
    mass: float = 0.256  # kg
    g: float = 9.81      # m/s^2

    def __post_init__(self):
        if self.mass <= 0:
            raise ValueError(f"mass must be positive, got {self.mass}")
        if self.g <= 0:
            raise ValueError(f"g must be positive, got {self.g}")

    @property
    def hover_thrust(self) -> float:
        return self.mass * self.g


@dataclass(frozen=True)
class ContinuousLtiSystem:
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    H: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "A", _as_matrix(self.A, "A"))
        object.__setattr__(self, "B", _as_matrix(self.B, "B"))
        object.__setattr__(self, "C", _as_matrix(self.C, "C"))
        object.__setattr__(self, "H", _as_matrix(self.H, "H"))
        n = self.A.shape[0]
        if self.A.shape != (n, n):
            raise DimensionError("A must be square")
        if self.B.shape[0] != n or self.C.shape[1] != n or self.H.shape[0] != n:
            raise DimensionError("B, C, H dimensions inconsistent with A")

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def p(self) -> int:
        return self.C.shape[0]

    @property
    def d(self) -> int:
        return self.H.shape[1]


@dataclass(frozen=True)
class DiscreteLtiSystem:
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    H: np.ndarray
    dt: float

    def __post_init__(self):
        object.__setattr__(self, "A", _as_matrix(self.A, "A"))
        object.__setattr__(self, "B", _as_matrix(self.B, "B"))
        object.__setattr__(self, "C", _as_matrix(self.C, "C"))
        object.__setattr__(self, "H", _as_matrix(self.H, "H"))
        if self.dt <= 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        n = self.A.shape[0]
        if self.A.shape != (n, n):
            raise DimensionError("A must be square")
        if self.B.shape[0] != n or self.C.shape[1] != n or self.H.shape[0] != n:
            raise DimensionError("B, C, H dimensions inconsistent with A")

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def p(self) -> int:
        return self.C.shape[0]

    @property
    def d(self) -> int:
        return self.H.shape[1]

    def to_json(self) -> str:
        doc = {
            "A": self.A.tolist(),
            "B": self.B.tolist(),
            "C": self.C.tolist(),
            "H": self.H.tolist(),
            "dt": self.dt,
        }
        return json.dumps(doc, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "DiscreteLtiSystem":
        doc = json.loads(text)
        return cls(A=doc["A"], B=doc["B"], C=doc["C"], H=doc["H"], dt=doc["dt"])


def quadrotor_hover_model(params: QuadrotorParams = QuadrotorParams()) -> ContinuousLtiSystem:
    """Continuous near-hover quadrotor model (position/velocity states).

    The velocity rows couple pitch/roll through gravity and thrust through
    the mass: vx' = -g*theta, vy' = g*phi, vz' = f/m.
    """
    g, m = params.g, params.mass
    A = np.zeros((6, 6))
    A[0:3, 3:6] = np.eye(3)
    B = np.zeros((6, 3))
    B[3, 0] = -g
    B[4, 1] = g
    B[5, 2] = 1.0 / m
    C = np.eye(6)
    H = np.eye(6)
    return ContinuousLtiSystem(A=A, B=B, C=C, H=H)


def discretize(sys: ContinuousLtiSystem, dt: float) -> DiscreteLtiSystem:
    """Exact zero-order-hold discretization via the augmented matrix exponential.

    Both the input coupling B and the disturbance coupling H are discretized
    with the same ZOH rule.
    """
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    n, m, d = sys.n, sys.m, sys.d
    aug = np.zeros((n + m + d, n + m + d))
    aug[:n, :n] = sys.A
    aug[:n, n:n + m] = sys.B
    aug[:n, n + m:] = sys.H
    E = scipy.linalg.expm(aug * dt)
    A_d = E[:n, :n]
    B_d = E[:n, n:n + m]
    H_d = E[:n, n + m:]
    return DiscreteLtiSystem(A=A_d, B=B_d, C=sys.C.copy(), H=H_d, dt=dt)


def step(sys: DiscreteLtiSystem, x, u, w) -> np.ndarray:
    """One discrete-time update: A x + B u + H w."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    w = np.asarray(w, dtype=float)
    if x.shape != (sys.n,):
        raise DimensionError(f"state must have shape ({sys.n},), got {x.shape}")
    if u.shape != (sys.m,):
        raise DimensionError(f"input must have shape ({sys.m},), got {u.shape}")
    if w.shape != (sys.d,):
        raise DimensionError(f"disturbance must have shape ({sys.d},), got {w.shape}")
    return sys.A @ x + sys.B @ u + sys.H @ w
