"""Finite-impulse-response convolution operators and controller realization.

An FirOperator is an ordered list of matrix taps together with a delay: the
operator maps a signal s to y_k = sum_t taps[t] @ s_{k - delay - t}. Closed
loop system responses are strictly proper (delay 1); the deconvolution
helper produces a delay-0 operator.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .lti_model import DimensionError


class FirOperator:
    """A dense FIR convolution operator: taps[t] applies at lag delay + t."""

    __slots__ = ("taps", "delay")

    def __init__(self, taps, delay: int = 1):
        taps = np.asarray(taps, dtype=float)
        if taps.ndim != 3:
            raise DimensionError(
                f"taps must have shape (T, rows, cols), got {taps.shape}")
        if taps.shape[0] < 1:
            raise DimensionError("operator needs at least one tap")
        if delay < 0:
            raise ValueError("delay must be non-negative")
        self.taps = taps
        self.delay = int(delay)

    @classmethod
    def zeros(cls, horizon: int, rows: int, cols: int, delay: int = 1):
        return cls(np.zeros((horizon, rows, cols)), delay=delay)

    @property
    def horizon(self) -> int:
        return self.taps.shape[0]

    @property
    def rows(self) -> int:
        return self.taps.shape[1]

    @property
    def cols(self) -> int:
        return self.taps.shape[2]

    def tap(self, index: int) -> np.ndarray:
        """Tap at absolute lag `index`; zero outside the stored range."""
        t = index - self.delay
        if 0 <= t < self.horizon:
            return self.taps[t]
        return np.zeros((self.rows, self.cols))

    def __eq__(self, other):
        if not isinstance(other, FirOperator):
            return NotImplemented
        return (self.delay == other.delay
                and self.taps.shape == other.taps.shape
                and np.array_equal(self.taps, other.taps))

    def __repr__(self):
        return (f"FirOperator(horizon={self.horizon}, rows={self.rows}, "
                f"cols={self.cols}, delay={self.delay})")

    def to_json(self) -> str:
        return json.dumps({
            "taps": self.taps.tolist(),
            "rows": self.rows,
            "cols": self.cols,
            "delay": self.delay,
        })

    @classmethod
    def from_json(cls, text: str) -> "FirOperator":
        doc = json.loads(text)
        return cls(np.asarray(doc["taps"]), delay=doc.get("delay", 1))


def inf_induced_norm(op: FirOperator) -> float:
    """l-infinity to l-infinity induced norm: max absolute row sum over taps."""
    return float(np.abs(op.taps).sum(axis=(0, 2)).max())


def convolve(a: FirOperator, b: FirOperator, horizon: int | None = None) -> FirOperator:
    """Composition a*b; taps follow polynomial multiplication in the lag variable.

    `horizon` truncates the number of output taps (counted from the combined
    delay); default keeps all of them.
    """
    if a.cols != b.rows:
        raise DimensionError(
            f"cannot compose ({a.rows}x{a.cols}) with ({b.rows}x{b.cols})")
    full = a.horizon + b.horizon - 1
    if horizon is None:
        horizon = full
    out = np.zeros((horizon, a.rows, b.cols))
    for i in range(a.horizon):
        hi = min(b.horizon, horizon - i)
        if hi <= 0:
            break
        out[i:i + hi] += np.einsum("rk,tkc->trc", a.taps[i], b.taps[:hi])
    return FirOperator(out, delay=a.delay + b.delay)


def signal_apply(op: FirOperator, signal) -> np.ndarray:
    """Apply the operator to a finite signal (shape (N, cols)); output (N, rows)."""
    signal = np.asarray(signal, dtype=float)
    squeeze = False
    if signal.ndim == 1:
        signal = signal[:, None] if op.cols == 1 else signal[None, :]
        squeeze = op.cols == 1
    if signal.ndim != 2 or signal.shape[1] != op.cols:
        raise DimensionError(
            f"signal entries must have dimension {op.cols}, got shape {signal.shape}")
    N = signal.shape[0]
    out = np.zeros((N, op.rows))
    for t in range(op.horizon):
        lag = op.delay + t
        if lag >= N:
            break
        out[lag:] += signal[:N - lag] @ op.taps[t].T
    return out[:, 0] if squeeze else out


def solve_deconvolution(phi_xw: FirOperator, phi_xe: FirOperator,
                        t_out: int) -> FirOperator:
    """Forward-substitution solve of phi_xw * G = phi_xe for the leading taps.

    Requires phi_xw square, delay 1, with identity first tap. The result G
    has delay 0 and `t_out` taps.
    """
    n = phi_xw.rows
    if phi_xw.cols != n:
        raise DimensionError("phi_xw must be square")
    if phi_xw.delay != 1 or phi_xe.delay != 1:
        raise DimensionError("responses must be strictly proper (delay 1)")
    if phi_xe.rows != n:
        raise DimensionError("phi_xe row dimension must match phi_xw")
    first = phi_xw.taps[0]
    if np.max(np.abs(first - np.eye(n))) > 1e-9:
        raise ValueError("first tap of phi_xw must be the identity")
    G = np.zeros((t_out, n, phi_xe.cols))
    for k in range(t_out):
        acc = phi_xe.tap(k + 1).copy()
        jmax = min(k, phi_xw.horizon - 1)
        for j in range(1, jmax + 1):
            acc -= phi_xw.taps[j] @ G[k - j]
        G[k] = acc
    return FirOperator(G, delay=0)


@dataclass(frozen=True)
class SystemResponses:
    """The four closed-loop response operators, all strictly proper."""

    phi_xw: FirOperator
    phi_xe: FirOperator
    phi_uw: FirOperator
    phi_ue: FirOperator
    horizon: int

    def __post_init__(self):
        for name in ("phi_xw", "phi_xe", "phi_uw", "phi_ue"):
            op = getattr(self, name)
            if op.delay != 1:
                raise DimensionError(f"{name} must be strictly proper (delay 1)")
            if op.horizon != self.horizon:
                raise DimensionError(f"{name} horizon {op.horizon} != {self.horizon}")
        n = self.phi_xw.rows
        m = self.phi_uw.rows
        p = self.phi_xe.cols
        if self.phi_xw.cols != n or self.phi_xe.rows != n:
            raise DimensionError("state-block dimensions inconsistent")
        if self.phi_uw.cols != n or self.phi_ue.rows != m or self.phi_ue.cols != p:
            raise DimensionError("input-block dimensions inconsistent")

    @property
    def n(self) -> int:
        return self.phi_xw.rows

    @property
    def m(self) -> int:
        return self.phi_uw.rows

    @property
    def p(self) -> int:
        return self.phi_xe.cols

    def to_json(self) -> str:
        return json.dumps({
            "horizon": self.horizon,
            "phi_xw": self.phi_xw.taps.tolist(),
            "phi_xe": self.phi_xe.taps.tolist(),
            "phi_uw": self.phi_uw.taps.tolist(),
            "phi_ue": self.phi_ue.taps.tolist(),
        })

    @classmethod
    def from_json(cls, text: str) -> "SystemResponses":
        doc = json.loads(text)
        return cls(
            phi_xw=FirOperator(np.asarray(doc["phi_xw"])),
            phi_xe=FirOperator(np.asarray(doc["phi_xe"])),
            phi_uw=FirOperator(np.asarray(doc["phi_uw"])),
            phi_ue=FirOperator(np.asarray(doc["phi_ue"])),
            horizon=doc["horizon"],
        )


class FirController:
    """Strictly proper FIR feedback law: u_k = sum_t taps[t] y_{k-1-t}."""

    __slots__ = ("taps", "truncation_tail_norm")

    def __init__(self, taps, truncation_tail_norm: float = 0.0):
        taps = np.asarray(taps, dtype=float)
        if taps.ndim != 3:
            raise DimensionError(f"taps must have shape (T_K, m, p), got {taps.shape}")
        self.taps = taps
        self.truncation_tail_norm = float(truncation_tail_norm)

    @property
    def horizon(self) -> int:
        return self.taps.shape[0]

    @property
    def m(self) -> int:
        return self.taps.shape[1]

    @property
    def p(self) -> int:
        return self.taps.shape[2]

    def as_operator(self) -> FirOperator:
        return FirOperator(self.taps, delay=1)

    def to_json(self) -> str:
        return json.dumps({
            "taps": self.taps.tolist(),
            "truncation_tail_norm": self.truncation_tail_norm,
        })

    @classmethod
    def from_json(cls, text: str) -> "FirController":
        doc = json.loads(text)
        return cls(np.asarray(doc["taps"]),
                   truncation_tail_norm=doc.get("truncation_tail_norm", 0.0))


def realize_controller(resp: SystemResponses, t_k: int | None = None) -> FirController:
    """Extract the feedback law from feasible responses by deconvolution.

    K = phi_ue - phi_uw * inv(phi_xw) * phi_xe, truncated to t_k taps. The
    norm of the next t_k discarded taps is reported as a diagnostic.
    """
    if t_k is None:
        t_k = 2 * resp.horizon
    # compute an extended tail so the truncation diagnostic is meaningful
    t_ext = 2 * t_k
    G = solve_deconvolution(resp.phi_xw, resp.phi_xe, t_ext)
    prod = convolve(resp.phi_uw, G, horizon=t_ext)  # delay 1
    K_ext = np.zeros((t_ext, resp.m, resp.p))
    K_ext[:resp.horizon] = resp.phi_ue.taps
    K_ext[:prod.horizon] -= prod.taps
    tail = float(np.abs(K_ext[t_k:]).sum(axis=(0, 2)).max()) if t_ext > t_k else 0.0
    return FirController(K_ext[:t_k], truncation_tail_norm=tail)


class MeasurementBuffer:
    """Ring buffer of the most recent measurements, zero-padded before start."""

    def __init__(self, depth: int, dim: int):
        self.data = np.zeros((depth, dim))
        self.depth = depth
        self.dim = dim
        self._head = 0

    def push(self, y):
        y = np.asarray(y, dtype=float)
        if y.shape != (self.dim,):
            raise DimensionError(f"measurement must have shape ({self.dim},)")
        self.data[self._head] = y
        self._head = (self._head + 1) % self.depth

    def stacked(self) -> np.ndarray:
        """Rows ordered most-recent first: [y_{k-1}, y_{k-2}, ...]."""
        idx = (self._head - 1 - np.arange(self.depth)) % self.depth
        return self.data[idx]

    def reset(self):
        self.data[:] = 0.0
        self._head = 0


def controller_step(ctrl: FirController, history: MeasurementBuffer) -> np.ndarray:
    """Evaluate u_k from the last T_K measurements (y_k itself excluded)."""
    if history.dim != ctrl.p:
        raise DimensionError(
            f"history dimension {history.dim} != controller input {ctrl.p}")
    if history.depth < ctrl.horizon:
        raise DimensionError("history shallower than the controller horizon")
    stacked = history.stacked()[:ctrl.horizon]
    return np.einsum("tmp,tp->m", ctrl.taps, stacked)
