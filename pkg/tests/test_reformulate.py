import numpy as np
import pytest
import scipy.sparse as sp

from eddyopt.discretize import (
    ProblemConfig,
    SpaceOperators,
    TimeGrid,
    build_mesh,
    build_operators,
    lowrank_desired,
    sample_desired_state,
)
from eddyopt.lacore import LowRankMatrix, NotSpdError
from eddyopt.reformulate import (
    assemble_kkt_dense,
    assemble_kkt_dense3,
    build_B,
    build_a_ops,
    build_rhs,
    build_sylvester_problem,
    extract_solution,
    solve_kkt_dense,
    time_difference_matrix,
    unvec,
    vec,
)

from oracles import kron_sylvester_solve, solve_kkt2


def _identity_ops(n):
    eye = sp.identity(n, format="csr")
    return SpaceOperators(eye, eye, n)


def _small_problem(cells=2, m_t=2, sigma=1.0, beta=1.0, **kw):
    mesh = build_mesh(cells)
    config = ProblemConfig(sigma=sigma, beta=beta, **kw)
    grid = TimeGrid(m_t)
    ops = build_operators(mesh, config)
    yd = sample_desired_state("ex1", mesh, grid)
    return ops, config, grid, yd


# ---------------------------------------------------------------------------
# the time-coupling matrix


def test_build_B_single_step():
    b = build_B(1.0, 1.0, 1.0, 1).toarray()
    assert np.allclose(b, [[1.0, 1.0], [-1.0, 1.0]])


def test_build_B_two_steps_explicit():
    b = build_B(2.0, 0.5, 4.0, 2).toarray()
    expected = np.array(
        [
            [4.0, -4.0, 0.5, 0.0],
            [0.0, 4.0, 0.0, 0.5],
            [-0.5, 0.0, 4.0, 0.0],
            [0.0, -0.5, -4.0, 4.0],
        ]
    )
    assert np.array_equal(b, expected)


@pytest.mark.parametrize("m_t", [1, 3, 16, 64])
def test_build_B_symmetric_part_positive_definite(m_t):
    sigma, tau = 0.7, 1.0 / m_t
    b = build_B(sigma, tau, 2.0, m_t).toarray()
    sym = 0.5 * (b + b.T)
    c = time_difference_matrix(m_t).toarray()
    blk = (sigma / tau) * 0.5 * (c + c.T)
    expected = np.block(
        [[blk, np.zeros_like(blk)], [np.zeros_like(blk), blk]]
    )
    assert np.allclose(sym, expected, atol=1e-14)
    assert np.linalg.eigvalsh(sym).min() > 0


def test_build_B_sigma_zero_with_shift():
    m_t, beta, s = 3, 4.0, 0.25
    b = build_B(0.0, 0.1, beta, m_t)
    shifted = (b - s * sp.identity(2 * m_t)).toarray()
    w = 1.0 / np.sqrt(beta)
    eye = np.eye(m_t)
    expected = np.block([[-s * eye, w * eye], [-w * eye, -s * eye]])
    assert np.array_equal(shifted, expected)


# ---------------------------------------------------------------------------
# right-hand side factors


def test_build_rhs_direct_substitution():
    v = np.array([[1.0], [2.0], [3.0]])
    y2 = np.array([[5.0], [7.0]])
    r1, r2 = build_rhs(v, y2, 4.0)
    assert np.allclose(r1, v / 2.0)
    assert np.allclose(r2, [[0.0], [0.0], [5.0], [7.0]])


def test_build_rhs_zero_target():
    r1, r2 = build_rhs(np.zeros((4, 0)), np.zeros((3, 0)), 1.0)
    assert r1.shape == (4, 0) and r2.shape == (6, 0)


def test_build_rhs_reconstruction_oracle():
    rng = np.random.default_rng(1)
    y1 = rng.standard_normal((8, 3))
    y2 = rng.standard_normal((5, 3))
    beta = 0.3
    r1, r2 = build_rhs(y1, y2, beta)
    dense = r1 @ r2.T
    expected = np.hstack([np.zeros((8, 5)), (y1 @ y2.T) / np.sqrt(beta)])
    assert np.linalg.norm(dense - expected) <= 1e-14 * np.linalg.norm(expected)
    with pytest.raises(ValueError):
        build_rhs(y1, y2[:, :2], beta)


# ---------------------------------------------------------------------------
# operator closures


def test_a_ops_identity():
    apply_a, apply_a_inv = build_a_ops(_identity_ops(4), 0.0)
    v = np.arange(4.0)
    assert np.allclose(apply_a(v), v)
    assert np.allclose(apply_a_inv(v), v)


def test_a_ops_scalar_shift():
    ops = SpaceOperators(
        sp.csr_matrix(2.0 * np.eye(3)), sp.csr_matrix(4.0 * np.eye(3)), 3
    )
    apply_a, apply_a_inv = build_a_ops(ops, 1.0)
    v = np.array([1.0, -2.0, 0.5])
    assert np.allclose(apply_a(v), 3.0 * v)
    assert np.allclose(apply_a_inv(v), v / 3.0)


def test_a_ops_composition_on_p1_operators():
    ops, config, grid, _ = _small_problem(cells=4)
    apply_a, apply_a_inv = build_a_ops(ops, 0.5)
    rng = np.random.default_rng(6)
    v = rng.standard_normal(ops.n)
    assert np.linalg.norm(apply_a_inv(apply_a(v)) - v) <= 1e-12 * np.linalg.norm(v)
    # block application matches columnwise application
    block = rng.standard_normal((ops.n, 3))
    together = apply_a(block)
    for j in range(3):
        assert np.allclose(together[:, j], apply_a(block[:, j]))


def test_a_ops_rejects_indefinite_shifted_stiffness():
    n = 4
    ops = SpaceOperators(
        sp.identity(n, format="csr"),
        sp.csr_matrix(-np.eye(n)),
        n,
    )
    with pytest.raises(NotSpdError) as err:
        build_a_ops(ops, 0.0)
    assert "shift" in str(err.value)


# ---------------------------------------------------------------------------
# dense optimality systems


def test_kkt_dense_is_symmetric():
    ops, config, grid, yd = _small_problem()
    kkt = assemble_kkt_dense(ops, config, grid, yd)
    assert np.array_equal(kkt.matrix, kkt.matrix.T)


def test_kkt_dense_scalar_instance():
    ops = _identity_ops(1)
    config = ProblemConfig(sigma=1.0, beta=1.0, reg_kind=0)
    grid = TimeGrid(1)
    yd = np.array([[1.0]])
    kkt = assemble_kkt_dense(ops, config, grid, yd)
    assert np.allclose(kkt.matrix, [[1.0, 2.0], [2.0, -1.0]])
    assert np.allclose(kkt.rhs, [1.0, 0.0])


def test_kkt_dense_guard():
    ops = _identity_ops(200)
    config = ProblemConfig(sigma=1.0, beta=1.0, reg_kind=0)
    grid = TimeGrid(50)
    with pytest.raises(ValueError):
        assemble_kkt_dense(ops, config, grid, np.zeros((200, 50)))


def test_kkt_dense_matches_independent_oracle():
    ops, config, grid, yd = _small_problem(m_t=3, sigma=0.8, beta=1e-2)
    kkt = assemble_kkt_dense(ops, config, grid, yd)
    y, u, lam = solve_kkt_dense(kkt, config.beta)
    y_o, u_o, lam_o = solve_kkt2(
        ops.mass.toarray(), ops.stiffness.toarray(), config.effective_sigma,
        grid.tau, config.beta, yd,
    )
    assert np.linalg.norm(y - y_o) <= 1e-10 * np.linalg.norm(y_o)
    assert np.linalg.norm(u - u_o) <= 1e-10 * np.linalg.norm(u_o)
    assert np.linalg.norm(lam - lam_o) <= 1e-10 * np.linalg.norm(lam_o)


def test_three_block_elimination_matches_two_block():
    ops, config, grid, yd = _small_problem(m_t=2, sigma=0.5, beta=0.1)
    y2, u2, lam2 = solve_kkt_dense(assemble_kkt_dense(ops, config, grid, yd), config.beta)
    y3, u3, lam3 = solve_kkt_dense(assemble_kkt_dense3(ops, config, grid, yd))
    assert np.linalg.norm(y3 - y2) <= 1e-10 * np.linalg.norm(y2)
    assert np.linalg.norm(u3 - u2) <= 1e-10 * np.linalg.norm(u2)
    assert np.linalg.norm(lam3 - lam2) <= 1e-10 * np.linalg.norm(lam2)
    assert np.linalg.norm(u3 - lam3 / config.beta) <= 1e-10 * np.linalg.norm(u3)


def test_sylvester_solution_maps_to_kkt_solution():
    ops, config, grid, yd = _small_problem(cells=2, m_t=2, sigma=1.0, beta=0.25)
    yd_lr = lowrank_desired(yd, 1e-14)
    problem = build_sylvester_problem(ops, config, grid, yd_lr)
    a_dense = (
        np.linalg.solve(ops.mass.toarray(), ops.stiffness.toarray())
        + problem.shift * np.eye(ops.n)
    )
    x = kron_sylvester_solve(a_dense, problem.b_matrix.toarray(), problem.r1 @ problem.r2.T)
    y_ref, u_ref, lam_ref = solve_kkt_dense(
        assemble_kkt_dense(ops, config, grid, yd), config.beta
    )
    sb = np.sqrt(config.beta)
    assert np.linalg.norm(x[:, : grid.m_t] - y_ref) <= 1e-10 * np.linalg.norm(y_ref)
    assert np.linalg.norm(sb * x[:, grid.m_t :] - lam_ref) <= 1e-10 * np.linalg.norm(lam_ref)


# ---------------------------------------------------------------------------
# problem assembly invariants


def test_problem_scaling_invariance():
    ops, config, grid, yd = _small_problem(cells=2, m_t=2, sigma=0.3, beta=0.5)
    yd_lr = lowrank_desired(yd, 1e-14)
    p1 = build_sylvester_problem(ops, config, grid, yd_lr)
    scaled = SpaceOperators((7.0 * ops.mass).tocsr(), (7.0 * ops.stiffness).tocsr(), ops.n)
    p2 = build_sylvester_problem(scaled, config, grid, yd_lr)
    a1 = np.linalg.solve(ops.mass.toarray(), ops.stiffness.toarray())
    x1 = kron_sylvester_solve(
        a1 + p1.shift * np.eye(ops.n), p1.b_matrix.toarray(), p1.r1 @ p1.r2.T
    )
    a2 = np.linalg.solve(scaled.mass.toarray(), scaled.stiffness.toarray())
    x2 = kron_sylvester_solve(
        a2 + p2.shift * np.eye(ops.n), p2.b_matrix.toarray(), p2.r1 @ p2.r2.T
    )
    assert np.linalg.norm(x1 - x2) <= 1e-12 * np.linalg.norm(x1)


def test_problem_unique_solvability_on_tiny_instance():
    # the shift keeps the inverse map well conditioned for the identity check
    ops, config, grid, yd = _small_problem(cells=1, m_t=2, sigma=1.0, beta=0.5, shift=1.0)
    yd_lr = lowrank_desired(yd, 1e-14)
    problem = build_sylvester_problem(ops, config, grid, yd_lr)
    a_dense = (
        np.linalg.solve(ops.mass.toarray(), ops.stiffness.toarray())
        + problem.shift * np.eye(ops.n)
    )
    big = np.kron(np.eye(2 * grid.m_t), a_dense) + np.kron(
        problem.b_matrix.toarray().T, np.eye(ops.n)
    )
    assert np.linalg.matrix_rank(big) == big.shape[0]
    # invariants carried by the problem object
    assert np.all(problem.r2[: grid.m_t] == 0.0)
    rng = np.random.default_rng(0)
    v = rng.standard_normal(ops.n)
    assert np.linalg.norm(problem.apply_a_inv(problem.apply_a(v)) - v) <= 1e-10


def test_problem_warns_for_tiny_beta():
    ops, config, grid, yd = _small_problem(cells=1, m_t=1, sigma=1.0, beta=1e-13)
    yd_lr = lowrank_desired(yd, 1e-14)
    with pytest.warns(UserWarning):
        build_sylvester_problem(ops, config, grid, yd_lr)


# ---------------------------------------------------------------------------
# solution extraction


def test_extract_solution_unit_beta():
    rng = np.random.default_rng(3)
    x = LowRankMatrix(rng.standard_normal((5, 2)), rng.standard_normal((8, 2)))
    y, u, lam = extract_solution(x, 1.0)
    dense = x.to_dense()
    assert np.allclose(u.to_dense(), dense[:, 4:])
    assert np.allclose(y.to_dense(), dense[:, :4])


def test_extract_solution_scaling():
    x = LowRankMatrix(np.array([[1.0]]), np.array([[1.0], [2.0]]))
    y, u, lam = extract_solution(x, 4.0)
    assert np.allclose(lam.to_dense(), [[4.0]])
    assert np.allclose(u.to_dense(), [[1.0]])
    assert np.allclose(y.to_dense(), [[1.0]])


def test_extract_solution_rejects_odd_columns():
    x = LowRankMatrix(np.zeros((3, 1)), np.zeros((5, 1)))
    with pytest.raises(ValueError):
        extract_solution(x, 1.0)


def test_extract_solution_satisfies_state_equation():
    ops, config, grid, yd = _small_problem(cells=2, m_t=2, sigma=1.0, beta=0.5)
    yd_lr = lowrank_desired(yd, 1e-14)
    problem = build_sylvester_problem(ops, config, grid, yd_lr)
    a_dense = (
        np.linalg.solve(ops.mass.toarray(), ops.stiffness.toarray())
        + problem.shift * np.eye(ops.n)
    )
    x_dense = kron_sylvester_solve(
        a_dense, problem.b_matrix.toarray(), problem.r1 @ problem.r2.T
    )
    # refactor the dense solution and extract the trajectories
    u_, s_, vt_ = np.linalg.svd(x_dense, full_matrices=False)
    keep = s_ > 1e-13 * s_[0]
    x_lr = LowRankMatrix(u_[:, keep] * s_[keep], vt_[keep].T.copy())
    y, u, lam = extract_solution(x_lr, config.beta)
    c = time_difference_matrix(grid.m_t).toarray()
    mm = np.kron(np.eye(grid.m_t), ops.mass.toarray())
    nsig = np.kron(np.eye(grid.m_t), grid.tau * ops.stiffness.toarray()) + np.kron(
        c, config.effective_sigma * ops.mass.toarray()
    )
    res = nsig @ vec(y.to_dense()) - grid.tau * (mm @ vec(u.to_dense()))
    assert np.linalg.norm(res) <= 1e-8 * np.linalg.norm(grid.tau * (mm @ vec(u.to_dense())))
