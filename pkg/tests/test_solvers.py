import cvxpy as cp
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dnflex.conic import Cones, solve_socp
from dnflex.errors import InfeasibleError, SolverError
from dnflex.nlp import pdipm


def random_socp(seed):
    """Bounded feasible SOCP: box constraints plus two norm balls."""
    rng = np.random.default_rng(seed)
    n = 4
    c = rng.normal(size=n)
    g_box = np.vstack([np.eye(n), -np.eye(n)])
    h_box = np.full(2 * n, 2.0)
    blocks_g, blocks_h = [g_box], [h_box]
    for _ in range(2):
        m = rng.normal(size=(3, n))
        center = rng.normal(size=3) * 0.1
        # ||m x - center|| <= 3
        blocks_g.append(np.vstack([np.zeros(n), -m]))
        blocks_h.append(np.concatenate([[3.0], -center]))
    return c, np.vstack(blocks_g), np.concatenate(blocks_h), Cones(2 * n, (4, 4))


def cvx_reference(c, G, h, cones, A=None, b=None):
    x = cp.Variable(c.size)
    cons = [G[:cones.l] @ x <= h[:cones.l]]
    off = cones.l
    for d in cones.q:
        u = h[off:off + d] - G[off:off + d] @ x
        cons.append(cp.SOC(u[0], u[1:]))
        off += d
    if A is not None:
        cons.append(A @ x == b)
    prob = cp.Problem(cp.Minimize(c @ x), cons)
    prob.solve(solver=cp.CLARABEL)
    return prob.value


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_socp_matches_clarabel(seed):
    c, G, h, cones = random_socp(seed)
    sol = solve_socp(c, G, h, cones)
    assert sol.status == "optimal"
    assert sol.pcost == pytest.approx(cvx_reference(c, G, h, cones), abs=1e-6)
    assert cones.violation(h - G @ sol.x) < 1e-7


def test_equality_constrained():
    c = np.array([1.0, 1.0])
    G = -np.eye(2)
    h = np.zeros(2)
    sol = solve_socp(c, G, h, Cones(2), A=np.array([[1.0, 2.0]]), b=np.array([2.0]))
    np.testing.assert_allclose(sol.x, [0.0, 1.0], atol=1e-7)
    assert sol.pcost == pytest.approx(1.0, abs=1e-8)


def test_rotated_cone_minimum():
    # minimize t subject to t >= ||(x - 3, 1)||  ->  t = 1 at x = 3
    c = np.array([0.0, 1.0])
    G = -np.array([[0.0, 1.0], [1.0, 0.0], [0.0, 0.0]])
    h = np.array([0.0, -3.0, 1.0])
    sol = solve_socp(c, G, h, Cones(0, (3,)))
    assert sol.x == pytest.approx([3.0, 1.0], abs=1e-6)


def test_infeasible_certificate():
    # x <= -1 and x >= 1
    G = np.array([[1.0], [-1.0]])
    h = np.array([-1.0, -1.0])
    with pytest.raises(InfeasibleError) as exc:
        solve_socp(np.array([1.0]), G, h, Cones(2))
    y, z = exc.value.certificate
    assert np.all(z >= -1e-9) and h @ z < 0 and np.abs(G.T @ z).max() < 1e-6


def test_dimension_check():
    with pytest.raises(SolverError):
        solve_socp(np.ones(2), np.ones((3, 2)), np.ones(2), Cones(3))


def test_pdipm_quadratic():
    # minimize (x-2)^2 + (y-1)^2  s.t.  x + y = 1,  x <= 0.8
    def f(x):
        return (x[0] - 2) ** 2 + (x[1] - 1) ** 2, np.array([2 * (x[0] - 2), 2 * (x[1] - 1)])

    def gh(x):
        return (np.array([x[0] - 0.8]), np.array([x[0] + x[1] - 1]),
                np.array([[1.0, 0.0]]), np.array([[1.0, 1.0]]))

    res = pdipm(f, gh, lambda x, lam, mu: 2 * np.eye(2), np.zeros(2))
    assert res.converged
    np.testing.assert_allclose(res.x, [0.8, 0.2], atol=1e-7)
    # stationarity: grad f + lam * [1,1] + mu * [1,0] = 0 at (0.8, 0.2)
    assert res.lam[0] == pytest.approx(1.6, abs=1e-6)
    assert res.mu[0] == pytest.approx(0.8, abs=1e-6)


def test_pdipm_nonconvex_circle():
    # minimize x + y + 0.1|x|^2  s.t.  x^2 + y^2 = 2  ->  (-1, -1)
    def f(x):
        return x.sum() + 0.1 * x @ x, np.ones(2) + 0.2 * x

    def gh(x):
        return np.zeros(0), np.array([x @ x - 2]), np.zeros((0, 2)), 2 * x[None, :]

    res = pdipm(f, gh, lambda x, lam, mu: (0.2 + 2 * lam[0]) * np.eye(2), np.array([-0.5, -1.5]))
    assert res.converged
    np.testing.assert_allclose(res.x, [-1.0, -1.0], atol=1e-7)
