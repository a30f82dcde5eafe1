import itertools

import numpy as np
import pytest
import scipy.sparse as sps

from robustsls import lp_solver as lpmod


def oracle_solve(c, A_eq, b_eq, A_in, b_in, lo, hi, tol=1e-9):
    """Independent LP oracle: enumerate vertices of the box-bounded polytope.

    Every vertex is the intersection of n active constraints; the optimum of
    a feasible bounded LP is attained at one of them. Returns ('optimal',
    value) or ('infeasible', None).
    """
    c = np.asarray(c, dtype=float)
    n = c.size
    rows = [np.eye(n), -np.eye(n)]
    rhs = [np.asarray(hi, dtype=float), -np.asarray(lo, dtype=float)]
    if A_in is not None:
        rows.insert(0, np.asarray(A_in, dtype=float))
        rhs.insert(0, np.asarray(b_in, dtype=float))
    G = np.vstack(rows)
    h = np.concatenate(rhs)
    k = 0 if A_eq is None else np.asarray(A_eq).shape[0]
    combos = np.array(list(itertools.combinations(range(G.shape[0]), n - k)))
    M = np.empty((len(combos), n, n))
    rb = np.empty((len(combos), n))
    if k:
        M[:, :k, :] = A_eq
        rb[:, :k] = b_eq
    M[:, k:, :] = G[combos]
    rb[:, k:] = h[combos]
    ok = np.abs(np.linalg.det(M)) > 1e-10
    if not np.any(ok):
        return "infeasible", None
    X = np.linalg.solve(M[ok], rb[ok][..., None])[..., 0]
    feas = np.all(G @ X.T <= h[:, None] + tol, axis=0)
    if k:
        feas &= np.all(np.abs(np.asarray(A_eq) @ X.T
                              - np.asarray(b_eq)[:, None]) <= tol, axis=0)
    if not np.any(feas):
        return "infeasible", None
    return "optimal", float((X[feas] @ c).min())


def random_lp(rng):
    """A random LP with box bounds, a few inequalities, sometimes an equality."""
    n = int(rng.integers(2, 9))
    c = rng.normal(size=n)
    lo = np.full(n, -1.0)
    hi = np.full(n, 1.5)
    k_in = int(rng.integers(0, 4))
    A_in = rng.normal(size=(k_in, n)) if k_in else None
    b_in = rng.uniform(-0.5, 1.5, size=k_in) if k_in else None
    A_eq = b_eq = None
    if n >= 3 and rng.random() < 0.3:
        A_eq = rng.normal(size=(1, n))
        b_eq = rng.uniform(-0.5, 0.5, size=1)
    return c, A_eq, b_eq, A_in, b_in, lo, hi


def test_min_x_above_one():
    lp = lpmod.LinearProgram(c=[1.0], A_in=[[-1.0]], b_in=[-1.0])
    sol = lpmod.solve(lp)
    assert sol.status == "optimal"
    assert sol.v[0] == pytest.approx(1.0, abs=1e-8)
    assert sol.objective == pytest.approx(1.0, abs=1e-8)


def test_two_variable_simplex_example():
    # min -x - 2y subject to x + y <= 1, x >= 0, y >= 0
    lp = lpmod.LinearProgram(c=[-1.0, -2.0], A_in=[[1.0, 1.0]], b_in=[1.0],
                             bounds=[(0.0, None), (0.0, None)])
    sol = lpmod.solve(lp)
    assert sol.status == "optimal"
    np.testing.assert_allclose(sol.v, [0.0, 1.0], atol=1e-7)
    assert sol.objective == pytest.approx(-2.0, abs=1e-8)


def test_infeasible_interval():
    lp = lpmod.LinearProgram(c=[1.0], A_in=[[1.0], [-1.0]], b_in=[0.0, -1.0])
    assert lpmod.solve(lp).status == "infeasible"


def test_unbounded():
    lp = lpmod.LinearProgram(c=[-1.0], bounds=[(0.0, None)])
    assert lpmod.solve(lp).status == "unbounded"


def test_equality_constrained():
    # min x + 2y subject to x + y = 1, x >= 0, y >= 0 -> (1, 0)
    lp = lpmod.LinearProgram(c=[1.0, 2.0], A_eq=[[1.0, 1.0]], b_eq=[1.0],
                             bounds=[(0.0, None), (0.0, None)])
    sol = lpmod.solve(lp)
    assert sol.status == "optimal"
    np.testing.assert_allclose(sol.v, [1.0, 0.0], atol=1e-7)


def test_redundant_equalities_tolerated():
    lp = lpmod.LinearProgram(c=[1.0, 2.0],
                             A_eq=[[1.0, 1.0], [2.0, 2.0]], b_eq=[1.0, 2.0],
                             bounds=[(0.0, None), (0.0, None)])
    sol = lpmod.solve(lp)
    assert sol.status == "optimal"
    assert sol.objective == pytest.approx(1.0, abs=1e-7)


def test_bounds_only_no_constraints():
    lp = lpmod.LinearProgram(c=[1.0, -1.0], bounds=[(-2.0, 3.0), (-2.0, 3.0)])
    sol = lpmod.solve(lp)
    assert sol.status == "optimal"
    np.testing.assert_allclose(sol.v, [-2.0, 3.0], atol=1e-7)


def test_sparse_matrices_accepted():
    A = sps.csr_matrix(np.array([[1.0, 1.0]]))
    lp = lpmod.LinearProgram(c=[-1.0, -2.0], A_in=A, b_in=[1.0],
                             bounds=[(0.0, None), (0.0, None)])
    sol = lpmod.solve(lp)
    assert sol.objective == pytest.approx(-2.0, abs=1e-8)


def test_kkt_residuals_small_at_optimum():
    lp = lpmod.LinearProgram(c=[-1.0, -2.0], A_in=[[1.0, 1.0]], b_in=[1.0],
                             bounds=[(0.0, None), (0.0, None)])
    sol = lpmod.solve(lp)
    res = lpmod.verify_kkt(lp, sol)
    res.pop("dual_objective", None)
    assert max(res.values()) <= 1e-8


def test_strong_duality_gap():
    rng = np.random.default_rng(8)
    for _ in range(10):
        c, A_eq, b_eq, A_in, b_in, lo, hi = random_lp(rng)
        lp = lpmod.LinearProgram(c=c, A_eq=A_eq, b_eq=b_eq, A_in=A_in,
                                 b_in=b_in,
                                 bounds=[(l, u) for l, u in zip(lo, hi)])
        sol = lpmod.solve(lp)
        if sol.status == "optimal":
            assert sol.objective == pytest.approx(sol.dual_objective, abs=1e-6)


def test_infeasibility_certificate_reported():
    lp = lpmod.LinearProgram(c=[1.0], A_in=[[1.0], [-1.0]], b_in=[0.0, -1.0])
    sol = lpmod.solve(lp)
    assert sol.status == "infeasible"
    assert sol.certificate is not None


def test_validation_rejects_bad_inputs():
    with pytest.raises(ValueError):
        lpmod.LinearProgram(c=[np.nan])
    with pytest.raises(ValueError):
        lpmod.LinearProgram(c=[1.0, 2.0], A_in=[[1.0]], b_in=[1.0])
    with pytest.raises(ValueError):
        lpmod.LinearProgram(c=[1.0], A_in=[[1.0]], b_in=[1.0, 2.0])
    with pytest.raises(ValueError):
        lpmod.solve(lpmod.LinearProgram(c=[1.0], bounds=[(1.0, 0.0)]))
