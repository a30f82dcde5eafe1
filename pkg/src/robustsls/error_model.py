"""Data-driven perception error model: residuals, norm bound and slope estimate.

The slope statistic measures how fast the perception error changes between
nearby training states (infinity norm throughout). A nearest-rank quantile
over the pairwise slopes replaces the raw maximum so that a handful of noisy
pairs cannot blow up the estimate.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .lti_model import DimensionError

# above this many samples the pairwise scan switches to a deterministic subsample
PAIRWISE_SCAN_LIMIT = 5000


class NoNeighborsError(ValueError):
    """No pair of training states lies within the requested radius."""


@dataclass(frozen=True)
class TrajectoryDataset:
    times: np.ndarray        # (N,)
    states: np.ndarray       # (N, n) ground truth
    measurements: np.ndarray  # (N, p) perception output

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        x = np.asarray(self.states, dtype=float)
        y = np.asarray(self.measurements, dtype=float)
        if t.ndim != 1 or x.ndim != 2 or y.ndim != 2:
            raise DimensionError("times must be 1-D; states/measurements 2-D")
        if not (len(t) == len(x) == len(y)):
            raise DimensionError("times, states, measurements must have equal length")
        if len(t) < 2:
            raise ValueError("dataset needs at least 2 samples")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "states", x)
        object.__setattr__(self, "measurements", y)

    def __len__(self):
        return len(self.times)

    def write_csv(self, path):
        n = self.states.shape[1]
        p = self.measurements.shape[1]
        header = ["t"] + [f"x{i}" for i in range(n)] + [f"y{i}" for i in range(p)]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for k in range(len(self)):
                w.writerow([repr(float(self.times[k]))]
                           + [repr(float(v)) for v in self.states[k]]
                           + [repr(float(v)) for v in self.measurements[k]])

    @classmethod
    def read_csv(cls, path) -> "TrajectoryDataset":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                raise ValueError(f"{path}: empty CSV")
            header = [h.strip() for h in header]
            if header[0] != "t":
                raise ValueError(f"{path}: first column must be 't', got {header[0]!r}")
            x_cols = [i for i, h in enumerate(header) if h.startswith("x") and h[1:].isdigit()]
            y_cols = [i for i, h in enumerate(header) if h.startswith("y") and h[1:].isdigit()]
            if not x_cols or not y_cols:
                raise ValueError(f"{path}: header must contain x0.. and y0.. columns")
            times, states, meas = [], [], []
            for lineno, row in enumerate(reader, start=2):
                if not row:
                    continue
                try:
                    vals = [float(v) for v in row]
                except ValueError as exc:
                    raise ValueError(f"{path}: line {lineno}: {exc}") from None
                if len(vals) != len(header):
                    raise ValueError(
                        f"{path}: line {lineno}: expected {len(header)} fields, got {len(vals)}")
                if any(math.isnan(v) or math.isinf(v) for v in vals):
                    raise ValueError(f"{path}: line {lineno}: non-finite value")
                times.append(vals[0])
                states.append([vals[i] for i in x_cols])
                meas.append([vals[i] for i in y_cols])
        return cls(times=np.array(times), states=np.array(states),
                   measurements=np.array(meas))


@dataclass(frozen=True)
class ErrorModel:
    epsilon_e: float
    s_hat: float
    radius_r: float
    quantile: float
    training_states: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.epsilon_e < 0 or self.s_hat < 0:
            raise ValueError("epsilon_e and s_hat must be non-negative")
        if self.radius_r <= 0:
            raise ValueError("radius_r must be positive")
        if not (0 < self.quantile <= 1):
            raise ValueError("quantile must be in (0, 1]")
        object.__setattr__(self, "training_states",
                           np.asarray(self.training_states, dtype=float))

    def to_json(self) -> str:
        return json.dumps({
            "epsilon_e": self.epsilon_e,
            "s_hat": self.s_hat,
            "radius_r": self.radius_r,
            "quantile": self.quantile,
            "training_states": self.training_states.tolist(),
        }, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ErrorModel":
        doc = json.loads(text)
        return cls(epsilon_e=doc["epsilon_e"], s_hat=doc["s_hat"],
                   radius_r=doc["radius_r"], quantile=doc["quantile"],
                   training_states=np.asarray(doc["training_states"]))


def nearest_rank_quantile(values, q: float) -> float:
    """Nearest-rank quantile: the ceil(q*N)-th smallest value."""
    values = np.sort(np.asarray(values, dtype=float))
    if values.size == 0:
        raise ValueError("empty value list")
    if not (0 < q <= 1):
        raise ValueError(f"quantile must be in (0, 1], got {q}")
    rank = max(1, math.ceil(q * values.size))
    return float(values[rank - 1])


def residuals(data: TrajectoryDataset, C) -> np.ndarray:
    """Perception errors e_k = y_k - C x_k for every sample."""
    C = np.asarray(C, dtype=float)
    if C.shape != (data.measurements.shape[1], data.states.shape[1]):
        raise DimensionError(
            f"C must have shape ({data.measurements.shape[1]}, {data.states.shape[1]})")
    return data.measurements - data.states @ C.T


def epsilon_bound(errors, quantile: float = 1.0) -> float:
    """Quantile of the per-sample infinity norms of the residuals."""
    errors = np.asarray(errors, dtype=float)
    if errors.size == 0:
        raise ValueError("empty residual list")
    norms = np.max(np.abs(errors), axis=-1) if errors.ndim > 1 else np.abs(errors)
    return nearest_rank_quantile(np.atleast_1d(norms), quantile)


def _pairwise_slopes(states: np.ndarray, errs: np.ndarray, r: float) -> np.ndarray:
    N = len(states)
    if N > PAIRWISE_SCAN_LIMIT:
        keep = np.linspace(0, N - 1, PAIRWISE_SCAN_LIMIT).astype(int)
        states, errs = states[keep], errs[keep]
        N = len(states)
    slopes = []
    # chunked scan over the upper triangle keeps memory bounded
    chunk = max(1, int(2e7) // max(N, 1))
    for start in range(0, N - 1, chunk):
        stop = min(start + chunk, N - 1)
        dx = np.max(np.abs(states[start:stop, None, :] - states[None, start + 1:, :]),
                    axis=-1)
        de = np.max(np.abs(errs[start:stop, None, :] - errs[None, start + 1:, :]),
                    axis=-1)
        rows = np.arange(start, stop)[:, None]
        cols = np.arange(start + 1, N)[None, :]
        mask = (cols > rows) & (dx < r) & (dx > 0)
        if np.any(mask):
            slopes.append(de[mask] / dx[mask])
    if not slopes:
        return np.empty(0)
    return np.concatenate(slopes)


def s_slope(data: TrajectoryDataset, C, r: float, quantile: float = 1.0) -> float:
    """Quantile of |e(x_i)-e(x_j)| / |x_i-x_j| over state pairs closer than r.

    Identical states (zero denominator) are excluded. Raises NoNeighborsError
    when no pair falls inside the radius, so the caller cannot mistake the
    outcome for a measured slope of zero.
    """
    if r <= 0:
        raise ValueError(f"radius must be positive, got {r}")
    errs = residuals(data, C)
    slopes = _pairwise_slopes(data.states, errs, r)
    if slopes.size == 0:
        raise NoNeighborsError(
            f"no pair of training states within radius {r}")
    return nearest_rank_quantile(slopes, quantile)


def fit(data: TrajectoryDataset, C, r: float,
        q_eps: float = 1.0, q_slope: float = 0.95) -> ErrorModel:
    """Bundle the norm bound and slope estimate into an ErrorModel."""
    errs = residuals(data, C)
    eps = epsilon_bound(errs, q_eps)
    s_hat = s_slope(data, C, r, q_slope)
    return ErrorModel(epsilon_e=eps, s_hat=s_hat, radius_r=r,
                      quantile=q_slope, training_states=data.states.copy())
