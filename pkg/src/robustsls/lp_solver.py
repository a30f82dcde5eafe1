"""Dense linear-program solver: Mehrotra predictor-corrector on the
homogeneous self-dual embedding.

Problems are given in the general form

    min c'v  s.t.  A_eq v = b_eq,  A_in v <= b_in,  lb <= v <= ub,

converted internally to standard form (min c'x, Ax = b, x >= 0). The
homogeneous embedding gives clean certificates: tau -> 0 with kappa > 0
signals primal or dual infeasibility. Normal equations are solved by dense
Cholesky with diagonal regularization and iterative refinement, so redundant
(consistent) equality rows do not break the solve.

Constraint matrices may be numpy arrays or scipy.sparse matrices; the
synthesis pipeline passes sparse ones.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sps

_STEP_SCALE = 0.99995  # fraction of the distance to the boundary taken per step


class LpSolverError(RuntimeError):
    """Numerical breakdown inside the interior-point iteration."""


def _check_matrix(M, name, n_cols):
    if M is None:
        return None
    if sps.issparse(M):
        M = M.tocsr().astype(float)
        data = M.data
    else:
        M = np.atleast_2d(np.asarray(M, dtype=float))
        data = M
    if M.shape[1] != n_cols:
        raise ValueError(f"{name} has {M.shape[1]} columns, expected {n_cols}")
    if data.size and not np.all(np.isfinite(data if isinstance(data, np.ndarray) else data)):
        raise ValueError(f"{name} contains non-finite entries")
    return M


@dataclass
class LinearProgram:
    """min c'v subject to A_eq v = b_eq, A_in v <= b_in and optional bounds.

    bounds is a per-variable list of (lb, ub) pairs, with None meaning
    unbounded on that side; bounds=None leaves every variable free.
    """

    c: np.ndarray
    A_eq: object = None
    b_eq: np.ndarray = None
    A_in: object = None
    b_in: np.ndarray = None
    bounds: list = None

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float).ravel()
        if not np.all(np.isfinite(self.c)):
            raise ValueError("objective contains non-finite entries")
        n = self.c.size
        self.A_eq = _check_matrix(self.A_eq, "A_eq", n)
        self.A_in = _check_matrix(self.A_in, "A_in", n)
        self.b_eq = self._check_rhs(self.b_eq, self.A_eq, "b_eq")
        self.b_in = self._check_rhs(self.b_in, self.A_in, "b_in")
        if self.bounds is not None and len(self.bounds) != n:
            raise ValueError(f"bounds must have one entry per variable ({n})")

    @staticmethod
    def _check_rhs(b, A, name):
        if A is None:
            if b is not None and np.asarray(b).size:
                raise ValueError(f"{name} given without a matrix")
            return None
        b = np.asarray(b, dtype=float).ravel()
        if b.size != A.shape[0]:
            raise ValueError(f"{name} length {b.size} != {A.shape[0]} rows")
        if not np.all(np.isfinite(b)):
            raise ValueError(f"{name} contains non-finite entries")
        return b

    @property
    def n_vars(self) -> int:
        return self.c.size

    def to_debug_json(self) -> str:
        def dense(M):
            if M is None:
                return None
            return (M.toarray() if sps.issparse(M) else M).tolist()
        return json.dumps({
            "c": self.c.tolist(),
            "A_eq": dense(self.A_eq),
            "b_eq": None if self.b_eq is None else self.b_eq.tolist(),
            "A_in": dense(self.A_in),
            "b_in": None if self.b_in is None else self.b_in.tolist(),
            "bounds": self.bounds,
        })


@dataclass
class LpSolution:
    status: str                 # optimal | infeasible | unbounded | max-iterations
    v: np.ndarray = None        # primal point (original variables)
    y_eq: np.ndarray = None     # equality multipliers, convention c + A_eq'y + A_in'z = g
    z_in: np.ndarray = None     # inequality multipliers, z >= 0
    objective: float = None
    dual_objective: float = None
    kkt_residuals: dict = field(default_factory=dict)
    iterations: int = 0
    certificate: dict = None


# ---------------------------------------------------------------------------
# standard-form conversion


class _StandardForm:
    """min c'x, Ax = b, x >= 0 plus the bookkeeping to map back.

    Column layout: one main column per original variable (shifted/sign
    flipped so x >= 0), then one negative-part column per free variable,
    then slacks for the inequality rows, then slacks for box rows.
    """

    def __init__(self, lp: LinearProgram):
        n = lp.n_vars
        bounds = lp.bounds or [(None, None)] * n
        lo = np.array([(-np.inf if b is None or b[0] is None else b[0]) for b in bounds])
        hi = np.array([(np.inf if b is None or b[1] is None else b[1]) for b in bounds])
        if np.any(lo > hi):
            raise ValueError("lower bound exceeds upper bound")

        # substitution v_j = shift_j + sign_j * x_j (x >= 0), or v_j free
        self.shift = np.where(np.isfinite(lo), lo, np.where(np.isfinite(hi), hi, 0.0))
        self.sign = np.where(np.isfinite(lo) | ~np.isfinite(hi), 1.0, -1.0)
        free = ~np.isfinite(lo) & ~np.isfinite(hi)
        self.free_idx = np.where(free)[0]
        # finite two-sided bounds become extra rows x_j + s = hi - lo
        self.box = np.where(np.isfinite(lo) & np.isfinite(hi))[0]

        self.m_eq = 0 if lp.A_eq is None else lp.A_eq.shape[0]
        self.m_in = 0 if lp.A_in is None else lp.A_in.shape[0]
        self.n_orig = n
        self.n_main = n + self.free_idx.size
        m_box = self.box.size
        n_std = self.n_main + self.m_in + m_box
        m_std = self.m_eq + self.m_in + m_box

        sparse = sps.issparse(lp.A_eq) or sps.issparse(lp.A_in)

        def transform(A):
            """Main + negative-part columns from original columns."""
            if sps.issparse(A):
                main = (A @ sps.diags(self.sign)).tocsc()
                neg = -A.tocsc()[:, self.free_idx]
                return sps.hstack([main, neg], format="csr")
            main = A * self.sign[None, :]
            return np.hstack([main, -A[:, self.free_idx]])

        blocks = []
        rhs = []
        if lp.A_eq is not None:
            eq = transform(lp.A_eq)
            blocks.append(_pad(eq, n_std, sparse))
            rhs.append(lp.b_eq - lp.A_eq @ self.shift)
        if lp.A_in is not None:
            ineq = transform(lp.A_in)
            if sparse:
                slack = sps.eye(self.m_in, format="csr")
                row = sps.hstack([ineq, slack,
                                  sps.csr_matrix((self.m_in, m_box))], format="csr")
            else:
                row = np.hstack([ineq, np.eye(self.m_in),
                                 np.zeros((self.m_in, m_box))])
            blocks.append(row)
            rhs.append(lp.b_in - lp.A_in @ self.shift)
        if m_box:
            idx = np.arange(m_box)
            if sparse:
                row = sps.csr_matrix(
                    (np.ones(2 * m_box),
                     (np.concatenate([idx, idx]),
                      np.concatenate([self.box, self.n_main + self.m_in + idx]))),
                    shape=(m_box, n_std))
            else:
                row = np.zeros((m_box, n_std))
                row[idx, self.box] = 1.0
                row[idx, self.n_main + self.m_in + idx] = 1.0
            blocks.append(row)
            rhs.append(hi[self.box] - lo[self.box])

        if blocks:
            self.A = sps.vstack(blocks, format="csr") if sparse else np.vstack(blocks)
            self.b = np.concatenate(rhs)
        else:
            self.A = np.zeros((0, n_std))
            self.b = np.zeros(0)

        self.c = np.concatenate([lp.c * self.sign, -lp.c[self.free_idx],
                                 np.zeros(self.m_in + m_box)])
        self.c0 = float(lp.c @ self.shift)

    def recover_primal(self, x_std: np.ndarray) -> np.ndarray:
        v = self.shift + self.sign * x_std[:self.n_orig]
        v[self.free_idx] = (x_std[self.free_idx]
                            - x_std[self.n_orig:self.n_main])
        return v

    def recover_duals(self, y_std: np.ndarray):
        y_eq = -y_std[:self.m_eq]
        z_in = -y_std[self.m_eq:self.m_eq + self.m_in]
        return y_eq, z_in


def _pad(A, n_std, sparse):
    m, k = A.shape
    if sparse:
        return sps.hstack([A, sps.csr_matrix((m, n_std - k))], format="csr")
    return np.hstack([A, np.zeros((m, n_std - k))])


# ---------------------------------------------------------------------------
# homogeneous self-dual interior point


class _NormalEquations:
    """Factor M = A diag(d) A' once per iteration, with regularization and
    iterative refinement against the unregularized matrix."""

    def __init__(self, A, d):
        if sps.issparse(A):
            M = (A.multiply(d[None, :]) @ A.T).toarray()
        else:
            M = A @ (d[:, None] * A.T)
        self.M = M
        scale = max(np.mean(np.abs(np.diag(M))), 1e-300)
        delta = 0.0
        for _ in range(8):
            try:
                self.factor = scipy.linalg.cho_factor(
                    M if delta == 0 else M + delta * np.eye(M.shape[0]),
                    check_finite=False)
                self.delta = delta
                return
            except scipy.linalg.LinAlgError:
                delta = 1e-12 * scale if delta == 0 else delta * 1e3
        raise LpSolverError("normal equations could not be factorized")

    def solve(self, r):
        s = scipy.linalg.cho_solve(self.factor, r, check_finite=False)
        # refinement recovers accuracy lost to regularization / conditioning
        for _ in range(5):
            resid = r - self.M @ s
            if np.max(np.abs(resid)) <= 1e-14 * (1.0 + np.max(np.abs(r))):
                break
            s = s + scipy.linalg.cho_solve(self.factor, resid, check_finite=False)
        return s


def _hsd_directions(A, b, c, x, y, z, tau, kappa, gamma, eta, ne, corrections):
    """Predictor / corrector Newton directions for the homogeneous embedding."""
    r_p = b * tau - A @ x
    r_d = c * tau - A.T @ y - z
    r_g = float(c @ x - b @ y + kappa)
    mu = (x @ z + tau * kappa) / (len(x) + 1)

    dinv = x / z

    def sym_solve(r1, r2):
        r = r2 + A @ (dinv * r1)
        v = ne.solve(r)
        u = dinv * (A.T @ v - r1)
        return u, v

    p, q = sym_solve(c, b)
    denom_pq = float(-c @ p + b @ q)

    d_x = d_y = d_z = 0.0
    d_tau = d_kappa = 0.0
    alpha = 0.0
    for i in range(corrections + 1):
        rhatp = eta * r_p
        rhatd = eta * r_d
        rhatg = eta * r_g
        rhatxs = gamma * mu - x * z
        rhattk = gamma * mu - tau * kappa
        if i == 1:
            rhatxs = rhatxs - d_x * d_z
            rhattk = rhattk - d_tau * d_kappa
        u, v = sym_solve(rhatd - rhatxs / x, rhatp)
        d_tau = ((rhatg + rhattk / tau - (-c @ u + b @ v))
                 / (kappa / tau + denom_pq))
        d_x = u + p * d_tau
        d_y = v + q * d_tau
        d_z = (rhatxs - z * d_x) / x
        d_kappa = (rhattk - kappa * d_tau) / tau
        alpha = _max_step(x, d_x, z, d_z, tau, d_tau, kappa, d_kappa)
        gamma = (1 - alpha) ** 2 * min(0.1, 1 - alpha)
        eta = 1 - gamma
    return d_x, d_y, d_z, d_tau, d_kappa, alpha


def _max_step(x, d_x, z, d_z, tau, d_tau, kappa, d_kappa):
    alpha = 1.0
    for v, dv in ((x, d_x), (z, d_z)):
        neg = dv < 0
        if np.any(neg):
            alpha = min(alpha, np.min(v[neg] / -dv[neg]))
    if d_tau < 0:
        alpha = min(alpha, tau / -d_tau)
    if d_kappa < 0:
        alpha = min(alpha, kappa / -d_kappa)
    return min(1.0, _STEP_SCALE * alpha)


def _solve_standard(A, b, c, tol, max_iters):
    m, n = A.shape
    if n == 0:
        return np.zeros(0), np.zeros(m), np.zeros(0), 1.0, 0.0, "optimal", 0
    x = np.ones(n)
    z = np.ones(n)
    y = np.zeros(m)
    tau, kappa = 1.0, 1.0

    nb = max(1.0, np.linalg.norm(b))
    nc = max(1.0, np.linalg.norm(c))
    r_g0 = max(1.0, abs(1.0 + c @ x - b @ y))
    mu0 = 1.0

    status = "max-iterations"
    # drive the iteration well past the reporting tolerance so that the
    # recomputed KKT residuals land safely below it
    target = 0.01 * tol
    best = np.inf
    saved = None  # best near-optimal iterate seen so far
    stall = 0
    it = 0
    for it in range(1, max_iters + 1):
        r_p = b * tau - A @ x
        r_d = c * tau - A.T @ y - z
        r_g = float(c @ x - b @ y + kappa)
        mu = (x @ z + tau * kappa) / (n + 1)
        rho_p = np.linalg.norm(r_p) / nb
        rho_d = np.linalg.norm(r_d) / nc
        rho_A = abs(c @ x - b @ y) / (tau + abs(b @ y))
        rho_g = abs(r_g) / r_g0
        rho_mu = mu / mu0

        worst = max(rho_p, rho_d, rho_A)
        stall = stall + 1 if worst > 0.5 * best else 0
        if worst < best:
            best = worst
            saved = (x.copy(), y.copy(), z.copy(), tau, kappa)
        if worst <= target:
            status = "optimal"
            break
        # certificates only count while no near-optimal iterate exists; on
        # degenerate problems tau can collapse after optimality is reached
        inf1 = (rho_p <= tol and rho_d <= tol and rho_g <= tol
                and tau <= tol * max(1.0, kappa))
        inf2 = rho_mu <= tol and tau <= tol * min(1.0, kappa)
        if (inf1 or inf2) and best > tol:
            status = "infeasible" if b @ y > tol else "unbounded"
            break
        if inf1 or inf2:
            status = "optimal"
            break
        if stall >= 5 and best <= tol:
            status = "optimal"
            break
        if stall >= 30:
            break

        dinv = x / z
        ne = _NormalEquations(A, dinv)
        try:
            d = _hsd_directions(A, b, c, x, y, z, tau, kappa,
                                gamma=0.0, eta=1.0, ne=ne, corrections=1)
        except (scipy.linalg.LinAlgError, FloatingPointError) as exc:
            raise LpSolverError(f"direction solve failed at iteration {it}") from exc
        d_x, d_y, d_z, d_tau, d_kappa, alpha = d
        x = x + alpha * d_x
        y = y + alpha * d_y
        z = z + alpha * d_z
        tau = tau + alpha * d_tau
        kappa = kappa + alpha * d_kappa
        if not np.all(np.isfinite(x)) or tau <= 0 or kappa < 0:
            raise LpSolverError(f"iterates diverged at iteration {it}")

    if status == "max-iterations" and best <= tol:
        status = "optimal"
    if status == "optimal" and saved is not None:
        x, y, z, tau, kappa = saved
    return x, y, z, tau, kappa, status, it


# ---------------------------------------------------------------------------
# public API


def solve(lp: LinearProgram, tol: float = 1e-8, max_iters: int = 200) -> LpSolution:
    """Solve the LP; statuses: optimal, infeasible, unbounded, max-iterations."""
    sf = _StandardForm(lp)
    if sf.A.shape[0] == 0:
        # no constraints at all: bounded iff every reduced cost is favorable
        if np.all(sf.c >= 0):
            sol = LpSolution(status="optimal", iterations=0)
            sol.v = sf.recover_primal(np.zeros(sf.A.shape[1]))
            sol.y_eq = np.zeros(0)
            sol.z_in = np.zeros(0)
            sol.objective = float(lp.c @ sol.v)
            sol.kkt_residuals = verify_kkt(lp, sol)
            sol.dual_objective = sol.kkt_residuals.pop("dual_objective")
            return sol
        return LpSolution(status="unbounded", iterations=0)
    x, y, z, tau, kappa, status, it = _solve_standard(sf.A, sf.b, sf.c, tol, max_iters)

    sol = LpSolution(status=status, iterations=it)
    if status == "optimal":
        x_hat = x / tau
        y_hat = y / tau
        sol.v = sf.recover_primal(x_hat)
        sol.y_eq, sol.z_in = sf.recover_duals(y_hat)
        sol.objective = float(lp.c @ sol.v)
        sol.kkt_residuals = verify_kkt(lp, sol)
        sol.dual_objective = sol.kkt_residuals.pop("dual_objective")
    elif status in ("infeasible", "unbounded"):
        y_eq, z_in = sf.recover_duals(y)
        sol.certificate = {
            "y_eq": y_eq.tolist(),
            "z_in": z_in.tolist(),
            "b_dot_y": float(sf.b @ y),
            "c_dot_x": float(sf.c @ x),
        }
    return sol


def verify_kkt(lp: LinearProgram, sol: LpSolution) -> dict:
    """Recompute KKT residuals from the problem data and a reported solution.

    Convention: g = c + A_eq'y + A_in'z is the reduced cost; z >= 0;
    residuals are reported relative to the problem scale.
    """
    v = np.asarray(sol.v, dtype=float)
    n = lp.n_vars
    y = np.zeros(0) if sol.y_eq is None else np.asarray(sol.y_eq, dtype=float)
    z = np.zeros(0) if sol.z_in is None else np.asarray(sol.z_in, dtype=float)

    primal = 0.0
    comp = 0.0
    if lp.A_eq is not None:
        primal = max(primal, float(np.max(np.abs(lp.A_eq @ v - lp.b_eq), initial=0.0)))
    slack = None
    if lp.A_in is not None:
        slack = lp.b_in - lp.A_in @ v
        primal = max(primal, float(np.max(-slack, initial=0.0)))
        comp = max(comp, float(np.max(np.abs(z * slack), initial=0.0)))

    g = lp.c.copy()
    if lp.A_eq is not None:
        g = g + lp.A_eq.T @ y
    if lp.A_in is not None:
        g = g + lp.A_in.T @ z

    bounds = lp.bounds or [(None, None)] * n
    dual = float(np.max(-z, initial=0.0))  # z must be non-negative
    dual_obj = 0.0
    if lp.b_eq is not None:
        dual_obj -= float(lp.b_eq @ y)
    if lp.b_in is not None:
        dual_obj -= float(lp.b_in @ z)
    for j, bnd in enumerate(bounds):
        lb = -np.inf if bnd is None or bnd[0] is None else bnd[0]
        ub = np.inf if bnd is None or bnd[1] is None else bnd[1]
        primal = max(primal, lb - v[j], v[j] - ub)
        if not np.isfinite(lb) and not np.isfinite(ub):
            dual = max(dual, abs(g[j]))
        else:
            if np.isfinite(lb):
                comp = max(comp, max(g[j], 0.0) * (v[j] - lb))
                dual_obj += lb * max(g[j], 0.0)
            else:
                dual = max(dual, max(g[j], 0.0))
            if np.isfinite(ub):
                comp = max(comp, max(-g[j], 0.0) * (ub - v[j]))
                dual_obj -= ub * max(-g[j], 0.0)
            else:
                dual = max(dual, max(-g[j], 0.0))

    b_scale = 1.0
    if lp.b_eq is not None and lp.b_eq.size:
        b_scale = max(b_scale, float(np.max(np.abs(lp.b_eq))))
    if lp.b_in is not None and lp.b_in.size:
        b_scale = max(b_scale, float(np.max(np.abs(lp.b_in))))
    c_scale = max(1.0, float(np.max(np.abs(lp.c), initial=0.0)))
    obj = float(lp.c @ v)
    return {
        "primal": primal / b_scale,
        "dual": dual / c_scale,
        "complementarity": comp / max(1.0, abs(obj)),
        "dual_objective": dual_obj,
    }
