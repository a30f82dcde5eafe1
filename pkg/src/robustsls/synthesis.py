"""Robust controller synthesis over FIR closed-loop responses.

The decision variables are the taps of the four response operators. The
achievability equalities pin down which responses any causal output-feedback
law can realize; the robustness inequality caps how hard the loop may react
to perception error; the cost is an l-infinity induced norm epigraph, so the
whole program is a dense LP solved by the in-package interior-point solver.

Absolute values are modeled by nonnegative splits (v = vp - vm, |v| <= vp + vm)
with a tiny tie-break weight pulling each pair onto the minimal decomposition.

Equality redundancy note: of the two achievability families, the state row of
the right family is implied by the left family (an FIR solution of
(zI - A) X = 0 vanishes identically), so the LP carries only the left family
plus the input row of the right family. Verification checks both families.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sps

from . import lp_solver as lpmod
from .error_model import ErrorModel
from .sls_ops import FirOperator, SystemResponses, inf_induced_norm
from .lti_model import DiscreteLtiSystem, DimensionError

_TIE_BREAK = 1e-9  # objective weight keeping split pairs minimal


class SynthesisInfeasibleError(RuntimeError):
    """The synthesis LP is infeasible; diagnostics say which term binds."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class StructuralInfeasibilityError(SynthesisInfeasibleError):
    """The robustness right-hand side is non-positive before any taps exist."""


class SynthesisSolverError(RuntimeError):
    """The LP solver failed to reach a conclusive status."""


class GuaranteeVoidError(ValueError):
    """S * |phi_xe| >= 1: the bounded-error guarantee does not apply."""


def _as_diag(W, size, name):
    W = np.asarray(W, dtype=float)
    if W.ndim == 2:
        if W.shape != (size, size):
            raise DimensionError(f"{name} must be {size}x{size}")
        if np.any(W != np.diag(np.diag(W))):
            raise ValueError(f"{name} must be diagonal")
        W = np.diag(W)
    if W.shape != (size,):
        raise DimensionError(f"{name} must have {size} diagonal entries")
    if np.any(W < 0):
        raise ValueError(f"{name} must be positive semidefinite")
    return W


@dataclass
class CostSpec:
    kind: str                      # "quadratic_l1" | "imitation"
    Q: np.ndarray                  # state weights, diagonal
    R: np.ndarray                  # input weights, diagonal
    nominal: SystemResponses = None

    def __post_init__(self):
        if self.kind not in ("quadratic_l1", "imitation"):
            raise ValueError(f"unknown cost kind {self.kind!r}")
        if (self.nominal is not None) != (self.kind == "imitation"):
            raise ValueError("nominal responses required iff kind is 'imitation'")

    def weights(self, n, m):
        return _as_diag(self.Q, n, "Q"), _as_diag(self.R, m, "R")


@dataclass
class SynthesisProblem:
    sys: DiscreteLtiSystem
    T: int
    eps_w: float
    error_model: ErrorModel
    cost: CostSpec
    d_max: float = 0.0
    robustness_enabled: bool = True
    margin: float = 1e-3
    r0: float = None  # defaults to the fitted epsilon_e

    def __post_init__(self):
        if self.T < 2:
            raise ValueError("FIR horizon must be at least 2")
        if self.eps_w < 0 or self.d_max < 0:
            raise ValueError("eps_w and d_max must be non-negative")
        if self.margin <= 0:
            raise ValueError("margin must be positive")
        if self.r0 is None:
            self.r0 = self.error_model.epsilon_e

    @property
    def s_used(self) -> float:
        return self.error_model.s_hat

    @property
    def eps_e(self) -> float:
        return self.error_model.epsilon_e

    @property
    def radius(self) -> float:
        return self.error_model.radius_r


@dataclass
class GuaranteeReport:
    phi_xe_norm: float
    gamma: float          # None when the guarantee is void
    s_used: float
    r0: float
    feasibility_margin: float
    guarantee_void: bool = False

    def to_json(self) -> str:
        return json.dumps({
            "phi_xe_norm": self.phi_xe_norm,
            "gamma": self.gamma,
            "s_used": self.s_used,
            "r0": self.r0,
            "feasibility_margin": self.feasibility_margin,
            "guarantee_void": self.guarantee_void,
        }, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "GuaranteeReport":
        return cls(**json.loads(text))


def guarantee_gamma(phi_xe_norm: float, S: float, R0: float) -> float:
    """Closed-loop perception error ceiling R0 / (1 - S*|phi_xe|)."""
    if S * phi_xe_norm >= 1:
        raise GuaranteeVoidError(
            f"S*|phi_xe| = {S * phi_xe_norm:.6g} >= 1, bound undefined")
    return R0 / (1.0 - S * phi_xe_norm)


# ---------------------------------------------------------------------------
# tap vector layout and achievability constraints


class TapLayout:
    """Flat indexing of the four tap blocks: (block, t, i, j) -> column."""

    BLOCKS = ("xw", "xe", "uw", "ue")

    def __init__(self, n, m, p, T):
        self.n, self.m, self.p, self.T = n, m, p, T
        self.shapes = {"xw": (n, n), "xe": (n, p), "uw": (m, n), "ue": (m, p)}
        self.offsets = {}
        off = 0
        for b in self.BLOCKS:
            r, c = self.shapes[b]
            self.offsets[b] = off
            off += T * r * c
        self.total = off

    def index(self, block, t, i, j):
        r, c = self.shapes[block]
        return self.offsets[block] + (t * r + i) * c + j

    def block_slice(self, block):
        r, c = self.shapes[block]
        off = self.offsets[block]
        return slice(off, off + self.T * r * c)

    def pack(self, resp: SystemResponses) -> np.ndarray:
        vec = np.empty(self.total)
        for b, op in (("xw", resp.phi_xw), ("xe", resp.phi_xe),
                      ("uw", resp.phi_uw), ("ue", resp.phi_ue)):
            vec[self.block_slice(b)] = op.taps.ravel()
        return vec

    def unpack(self, vec: np.ndarray) -> SystemResponses:
        ops = {}
        for b in self.BLOCKS:
            r, c = self.shapes[b]
            ops[b] = FirOperator(
                vec[self.block_slice(b)].reshape(self.T, r, c), delay=1)
        return SystemResponses(phi_xw=ops["xw"], phi_xe=ops["xe"],
                               phi_uw=ops["uw"], phi_ue=ops["ue"],
                               horizon=self.T)


class _RowBuilder:
    def __init__(self, n_cols):
        self.n_cols = n_cols
        self.rows, self.cols, self.data, self.rhs = [], [], [], []
        self.count = 0

    def add(self, entries, rhs):
        """entries: iterable of (col, coeff) for one scalar equation."""
        for col, coeff in entries:
            if coeff != 0.0:
                self.rows.append(self.count)
                self.cols.append(col)
                self.data.append(coeff)
        self.rhs.append(rhs)
        self.count += 1

    def matrix(self):
        return sps.csr_matrix(
            (self.data, (self.rows, self.cols)),
            shape=(self.count, self.n_cols))

    def rhs_vec(self):
        return np.asarray(self.rhs, dtype=float)


@dataclass
class AffineTapConstraints:
    """Affine achievability constraints over the flat tap vector."""

    matrix: object           # csr, shape (rows, layout.total)
    rhs: np.ndarray
    layout: TapLayout

    def residual(self, resp: SystemResponses) -> float:
        vec = self.layout.pack(resp)
        return float(np.max(np.abs(self.matrix @ vec - self.rhs), initial=0.0))


def achievability_constraints(sys: DiscreteLtiSystem, T: int,
                              include_implied: bool = True) -> AffineTapConstraints:
    """Tap recursions equivalent to the two z-domain achievability families.

    include_implied=False drops the state row of the right family, which is
    implied by the left family; the reduced set is what the LP carries.
    """
    if T < 2:
        raise ValueError("horizon must be at least 2")
    n, m, p = sys.n, sys.m, sys.p
    lay = TapLayout(n, m, p, T)
    A, B, C = sys.A, sys.B, sys.C
    rb = _RowBuilder(lay.total)

    def left_family(x_block, u_block, cols, initial_identity):
        # [zI - A, -B] [phi_x; phi_u] = [I or 0]
        for i in range(n):
            for j in range(cols):
                rb.add([(lay.index(x_block, 0, i, j), 1.0)],
                       1.0 if (initial_identity and i == j) else 0.0)
        for t in range(T - 1):
            for i in range(n):
                for j in range(cols):
                    ent = [(lay.index(x_block, t + 1, i, j), 1.0)]
                    ent += [(lay.index(x_block, t, k, j), -A[i, k])
                            for k in range(n)]
                    ent += [(lay.index(u_block, t, k, j), -B[i, k])
                            for k in range(m)]
                    rb.add(ent, 0.0)
        for i in range(n):
            for j in range(cols):
                ent = [(lay.index(x_block, T - 1, k, j), A[i, k]) for k in range(n)]
                ent += [(lay.index(u_block, T - 1, k, j), B[i, k]) for k in range(m)]
                rb.add(ent, 0.0)

    def right_family(w_block, e_block, rows, initial_identity):
        # [phi_w, phi_e] [zI - A; -C] = [I or 0]
        for i in range(rows):
            for j in range(n):
                rb.add([(lay.index(w_block, 0, i, j), 1.0)],
                       1.0 if (initial_identity and i == j) else 0.0)
        for t in range(T - 1):
            for i in range(rows):
                for j in range(n):
                    ent = [(lay.index(w_block, t + 1, i, j), 1.0)]
                    ent += [(lay.index(w_block, t, i, k), -A[k, j])
                            for k in range(n)]
                    ent += [(lay.index(e_block, t, i, k), -C[k, j])
                            for k in range(p)]
                    rb.add(ent, 0.0)
        for i in range(rows):
            for j in range(n):
                ent = [(lay.index(w_block, T - 1, i, k), A[k, j]) for k in range(n)]
                ent += [(lay.index(e_block, T - 1, i, k), C[k, j]) for k in range(p)]
                rb.add(ent, 0.0)

    left_family("xw", "uw", n, initial_identity=True)
    left_family("xe", "ue", p, initial_identity=False)
    right_family("uw", "ue", m, initial_identity=False)
    if include_implied:
        right_family("xw", "xe", n, initial_identity=True)

    return AffineTapConstraints(matrix=rb.matrix(), rhs=rb.rhs_vec(), layout=lay)


def z_domain_residuals(sys: DiscreteLtiSystem, resp: SystemResponses, zs) -> dict:
    """Max residual of both achievability families at the given z points."""
    n, m, p = sys.n, sys.m, sys.p
    left = right = 0.0
    for z in np.atleast_1d(zs):
        powers = z ** -(1 + np.arange(resp.horizon))
        Phi = np.zeros((n + m, n + p), dtype=complex)
        Phi[:n, :n] = np.tensordot(powers, resp.phi_xw.taps, axes=(0, 0))
        Phi[:n, n:] = np.tensordot(powers, resp.phi_xe.taps, axes=(0, 0))
        Phi[n:, :n] = np.tensordot(powers, resp.phi_uw.taps, axes=(0, 0))
        Phi[n:, n:] = np.tensordot(powers, resp.phi_ue.taps, axes=(0, 0))
        L = np.hstack([z * np.eye(n) - sys.A, -sys.B])
        R = np.vstack([z * np.eye(n) - sys.A, -sys.C])
        target_l = np.hstack([np.eye(n), np.zeros((n, p))])
        target_r = np.vstack([np.eye(n), np.zeros((m, n))])
        left = max(left, float(np.max(np.abs(L @ Phi - target_l))))
        right = max(right, float(np.max(np.abs(Phi @ R - target_r))))
    return {"left": left, "right": right}


# ---------------------------------------------------------------------------
# cost evaluation (direct, used as the oracle side of the LP objective)


def quadratic_l1_cost(problem: SynthesisProblem, resp: SystemResponses) -> float:
    """Induced-norm cost of the weighted stacked operator at a given point."""
    n, m = problem.sys.n, problem.sys.m
    q, r = problem.cost.weights(n, m)
    H = problem.sys.H
    eps_w, eps_e = problem.eps_w, problem.eps_e
    sq, sr = np.sqrt(q), np.sqrt(r)
    row_x = (eps_w * np.abs(np.einsum("tij,jl->til", resp.phi_xw.taps, H)).sum(axis=(0, 2))
             + eps_e * np.abs(resp.phi_xe.taps).sum(axis=(0, 2)))
    row_u = (eps_w * np.abs(np.einsum("tij,jl->til", resp.phi_uw.taps, H)).sum(axis=(0, 2))
             + eps_e * np.abs(resp.phi_ue.taps).sum(axis=(0, 2)))
    return float(max((sq * row_x).max(initial=0.0), (sr * row_u).max(initial=0.0)))


def imitation_cost(problem: SynthesisProblem, resp: SystemResponses) -> float:
    """Induced-norm distance to the nominal responses at a given point."""
    nom = problem.cost.nominal
    if nom is None:
        raise ValueError("imitation cost requires nominal responses")
    if nom.horizon != resp.horizon:
        raise DimensionError("nominal horizon mismatch")
    n, m = problem.sys.n, problem.sys.m
    q, r = problem.cost.weights(n, m)
    sq, sr = np.sqrt(q), np.sqrt(r)
    row_x = (np.abs(resp.phi_xw.taps - nom.phi_xw.taps).sum(axis=(0, 2))
             + np.abs(resp.phi_xe.taps - nom.phi_xe.taps).sum(axis=(0, 2)))
    row_u = (np.abs(resp.phi_uw.taps - nom.phi_uw.taps).sum(axis=(0, 2))
             + np.abs(resp.phi_ue.taps - nom.phi_ue.taps).sum(axis=(0, 2)))
    return float(max((sq * row_x).max(initial=0.0), (sr * row_u).max(initial=0.0)))


def cost_value(problem: SynthesisProblem, resp: SystemResponses) -> float:
    if problem.cost.kind == "quadratic_l1":
        return quadratic_l1_cost(problem, resp)
    return imitation_cost(problem, resp)


# ---------------------------------------------------------------------------
# robustness constraint


def robustness_constraint(problem: SynthesisProblem):
    """Coefficients (c_xe, c_xw, rhs) of c_xe*|phi_xe| + c_xw*|phi_xw| <= rhs.

    The trajectory term is over-bounded by eps_w*|phi_xw| + d_max, valid
    because |H| <= 1.
    """
    r = problem.radius
    if r <= 0:
        raise ValueError("error-model radius must be positive")
    c_xe = problem.s_used + problem.eps_e / r
    c_xw = problem.eps_w / r
    rhs = 1.0 - problem.d_max / r - problem.margin
    if rhs <= 0:
        raise StructuralInfeasibilityError(
            f"1 - d_max/r - margin = {rhs:.6g} <= 0: no response can satisfy "
            "the robustness constraint",
            diagnostics={"rhs": rhs, "d_max_over_r": problem.d_max / r,
                         "margin": problem.margin})
    return c_xe, c_xw, rhs


def robustness_margin(problem: SynthesisProblem, resp: SystemResponses) -> float:
    """rhs - lhs of the robustness constraint at a given point (>= 0 ok)."""
    c_xe, c_xw, rhs = robustness_constraint(problem)
    lhs = c_xe * inf_induced_norm(resp.phi_xe) + c_xw * inf_induced_norm(resp.phi_xw)
    return rhs - lhs


# ---------------------------------------------------------------------------
# LP assembly and the synthesis pipeline


def _block_entry_indices(lay, block):
    r, c = lay.shapes[block]
    return np.arange(lay.offsets[block], lay.offsets[block] + lay.T * r * c)


def _row_entry_indices(lay, block, i):
    """All tap-entry flat indices belonging to output row i of a block."""
    r, c = lay.shapes[block]
    t = np.arange(lay.T)
    j = np.arange(c)
    return (lay.offsets[block] + ((t[:, None] * r + i) * c + j[None, :])).ravel()


def _assemble_lp(problem: SynthesisProblem, ach: AffineTapConstraints):
    sys, T = problem.sys, problem.T
    n, m, p, d = sys.n, sys.m, sys.p, sys.d
    lay = ach.layout
    N = lay.total
    q, r = problem.cost.weights(n, m)
    sq, sr = np.sqrt(q), np.sqrt(r)
    imitation = problem.cost.kind == "imitation"
    robust = problem.robustness_enabled

    base = np.zeros(N)
    if imitation:
        nom = problem.cost.nominal
        if nom.horizon != T:
            raise DimensionError("nominal horizon mismatch")
        base = lay.pack(nom)

    # LP variable layout: vp | vm | (gp | gm) | (pxw | mxw | pxe | mxe) | t | s_xw | s_xe
    off_vp, off_vm = 0, N
    off = 2 * N
    if not imitation:
        Ng = T * (n + m) * d
        off_gp, off_gm = off, off + Ng
        off += 2 * Ng
        # g entry index: (block g-xw then g-uw), flat (t, i, l)
        def g_index(is_u, t, i, l):
            base_off = T * n * d if is_u else 0
            rows = m if is_u else n
            return base_off + (t * rows + i) * d + l
    links_needed = imitation and robust
    if links_needed:
        Nxw = T * n * n
        Nxe = T * n * p
        off_pxw, off_mxw = off, off + Nxw
        off_pxe, off_mxe = off + 2 * Nxw, off + 2 * Nxw + Nxe
        off += 2 * (Nxw + Nxe)
    off_t = off
    off += 1
    if robust:
        off_sxw, off_sxe = off, off + 1
        off += 2
    n_vars = off

    # ---- equalities
    eq_blocks = []
    eq_rhs = []
    Aach = ach.matrix
    pad = sps.csr_matrix((Aach.shape[0], n_vars - 2 * N))
    eq_blocks.append(sps.hstack([Aach, -Aach, pad], format="csr"))
    eq_rhs.append(ach.rhs - Aach @ base)

    rb = _RowBuilder(n_vars)
    if not imitation:
        H = sys.H
        for is_u, block, rows in ((False, "xw", n), (True, "uw", m)):
            for t in range(T):
                for i in range(rows):
                    for l in range(d):
                        gi = g_index(is_u, t, i, l)
                        ent = [(off_gp + gi, 1.0), (off_gm + gi, -1.0)]
                        for j in range(n):
                            if H[j, l] != 0.0:
                                col = lay.index(block, t, i, j)
                                ent.append((off_vp + col, -H[j, l]))
                                ent.append((off_vm + col, H[j, l]))
                        rb.add(ent, 0.0)
    if links_needed:
        for block, off_p, off_m in (("xw", off_pxw, off_mxw),
                                    ("xe", off_pxe, off_mxe)):
            idx = _block_entry_indices(lay, block)
            for pos, col in enumerate(idx):
                rb.add([(off_p + pos, 1.0), (off_m + pos, -1.0),
                        (off_vp + col, -1.0), (off_vm + col, 1.0)],
                       base[col])
    if rb.count:
        eq_blocks.append(rb.matrix())
        eq_rhs.append(rb.rhs_vec())

    A_eq = sps.vstack(eq_blocks, format="csr")
    b_eq = np.concatenate(eq_rhs)

    # ---- inequalities
    ib = _RowBuilder(n_vars)
    if imitation:
        for i in range(n):
            ent = [(off_vp + col, sq[i]) for col in _row_entry_indices(lay, "xw", i)]
            ent += [(off_vm + col, sq[i]) for col in _row_entry_indices(lay, "xw", i)]
            ent += [(off_vp + col, sq[i]) for col in _row_entry_indices(lay, "xe", i)]
            ent += [(off_vm + col, sq[i]) for col in _row_entry_indices(lay, "xe", i)]
            ent.append((off_t, -1.0))
            ib.add(ent, 0.0)
        for i in range(m):
            ent = [(off_vp + col, sr[i]) for col in _row_entry_indices(lay, "uw", i)]
            ent += [(off_vm + col, sr[i]) for col in _row_entry_indices(lay, "uw", i)]
            ent += [(off_vp + col, sr[i]) for col in _row_entry_indices(lay, "ue", i)]
            ent += [(off_vm + col, sr[i]) for col in _row_entry_indices(lay, "ue", i)]
            ent.append((off_t, -1.0))
            ib.add(ent, 0.0)
    else:
        eps_w, eps_e = problem.eps_w, problem.eps_e
        for i in range(n):
            ent = []
            for t in range(T):
                for l in range(d):
                    gi = g_index(False, t, i, l)
                    ent.append((off_gp + gi, sq[i] * eps_w))
                    ent.append((off_gm + gi, sq[i] * eps_w))
            for col in _row_entry_indices(lay, "xe", i):
                ent.append((off_vp + col, sq[i] * eps_e))
                ent.append((off_vm + col, sq[i] * eps_e))
            ent.append((off_t, -1.0))
            ib.add(ent, 0.0)
        for i in range(m):
            ent = []
            for t in range(T):
                for l in range(d):
                    gi = g_index(True, t, i, l)
                    ent.append((off_gp + gi, sr[i] * eps_w))
                    ent.append((off_gm + gi, sr[i] * eps_w))
            for col in _row_entry_indices(lay, "ue", i):
                ent.append((off_vp + col, sr[i] * eps_e))
                ent.append((off_vm + col, sr[i] * eps_e))
            ent.append((off_t, -1.0))
            ib.add(ent, 0.0)

    if robust:
        c_xe, c_xw, rhs = robustness_constraint(problem)
        for block, s_off in (("xw", off_sxw), ("xe", off_sxe)):
            rows = lay.shapes[block][0]
            for i in range(rows):
                idx = _row_entry_indices(lay, block, i)
                if links_needed:
                    off_p = off_pxw if block == "xw" else off_pxe
                    off_m = off_mxw if block == "xw" else off_mxe
                    rel = idx - lay.offsets[block]
                    ent = [(off_p + k, 1.0) for k in rel]
                    ent += [(off_m + k, 1.0) for k in rel]
                else:
                    ent = [(off_vp + col, 1.0) for col in idx]
                    ent += [(off_vm + col, 1.0) for col in idx]
                ent.append((s_off, -1.0))
                ib.add(ent, 0.0)
        ib.add([(off_sxe, c_xe), (off_sxw, c_xw)], rhs)

    A_in = ib.matrix()
    b_in = ib.rhs_vec()

    c = np.full(n_vars, _TIE_BREAK)
    c[off_t] = 1.0
    if robust:
        c[off_sxw] = c[off_sxe] = _TIE_BREAK
    bounds = [(0.0, None)] * n_vars

    lp = lpmod.LinearProgram(c=c, A_eq=A_eq, b_eq=b_eq, A_in=A_in, b_in=b_in,
                             bounds=bounds)
    unpack = lambda v: lay.unpack(base + v[off_vp:off_vp + N] - v[off_vm:off_vm + N])
    return lp, unpack, off_t


def synthesize(problem: SynthesisProblem, tol: float = 1e-8,
               max_iters: int = 200):
    """Solve the synthesis LP; returns (SystemResponses, GuaranteeReport)."""
    ach = achievability_constraints(problem.sys, problem.T, include_implied=False)
    lp, unpack, off_t = _assemble_lp(problem, ach)
    sol = lpmod.solve(lp, tol=tol, max_iters=max_iters)
    if sol.status == "infeasible":
        diag = {}
        if problem.robustness_enabled:
            c_xe, c_xw, rhs = robustness_constraint(problem)
            diag = {"robustness_rhs": rhs,
                    "coeff_phi_xe": c_xe,
                    "coeff_phi_xw": c_xw,
                    "s_used": problem.s_used,
                    "eps_e_over_r": problem.eps_e / problem.radius,
                    "eps_w_over_r": problem.eps_w / problem.radius}
        raise SynthesisInfeasibleError("synthesis LP infeasible", diagnostics=diag)
    if sol.status != "optimal":
        raise SynthesisSolverError(f"LP solver returned status {sol.status!r}")
    resp = unpack(sol.v)

    phi_xe_norm = inf_induced_norm(resp.phi_xe)
    void = problem.s_used * phi_xe_norm >= 1.0
    gamma = None if void else guarantee_gamma(phi_xe_norm, problem.s_used, problem.r0)
    margin = (robustness_margin(problem, resp)
              if problem.robustness_enabled else float("inf"))
    report = GuaranteeReport(phi_xe_norm=phi_xe_norm, gamma=gamma,
                             s_used=problem.s_used, r0=problem.r0,
                             feasibility_margin=margin, guarantee_void=void)
    return resp, report
