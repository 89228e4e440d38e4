import numpy as np
import pytest
import scipy.sparse as sp

from chns.assembly import StepContext, SystemState
from chns.errors import ConfigError, NewtonConvergenceError, SingularMatrixError
from chns.mesh import MeshConfig, build_channel_mesh
from chns.solver import NewtonSettings, NewtonSolver, increment_norm, lu_factorize, newton_solve
from chns.spaces import Discretization
from chns.timeloop import SimulationConfig, build_problem, initial_state

from conftest import random_state


def test_identity_solve():
    b = np.arange(1.0, 6.0)
    lu = lu_factorize(sp.identity(5, format="csr"))
    assert np.array_equal(lu.solve(b), b)


def test_diagonal_solve():
    lu = lu_factorize(sp.diags([2.0, 4.0]))
    assert lu.solve(np.array([2.0, 4.0])) == pytest.approx([1.0, 1.0], abs=0)


def test_singular_matrices():
    with pytest.raises(SingularMatrixError):
        lu_factorize(sp.csr_matrix((2, 2)))
    with pytest.raises(SingularMatrixError) as info:
        lu_factorize(sp.csr_matrix(np.array([[1.0, 0.0], [0.0, 0.0]])))
    assert info.value.row == 1
    with pytest.raises(SingularMatrixError):
        lu_factorize(sp.csr_matrix(np.array([[1.0, 2.0], [2.0, 4.0]])))
    with pytest.raises(ValueError):
        lu_factorize(sp.csr_matrix(np.ones((2, 3))))


def test_random_sparse_solve_backward_error():
    rng = np.random.default_rng(0)
    n = 200
    A = sp.random(n, n, density=0.02, random_state=1) + sp.identity(n) * 5.0
    lu = lu_factorize(A)
    b = rng.normal(size=n)
    x = lu.solve(b)
    A = sp.csr_matrix(A)
    norm_inf = abs(A).sum(axis=1).max()
    assert np.abs(A @ x - b).max() <= 1e-10 * (norm_inf * np.abs(x).max() + np.abs(b).max())
    assert lu.backward_error <= 1e-10
    assert lu.fill > 0


@pytest.mark.parametrize("kw", [dict(max_iterations=0), dict(abs_tol=0.0), dict(rel_tol=-1.0),
                                dict(refresh_ratio=1.0), dict(refresh_ratio=0.0)])
def test_invalid_settings(kw):
    with pytest.raises(ConfigError):
        NewtonSettings(**kw)


def test_defaults():
    s = NewtonSettings()
    assert (s.abs_tol, s.rel_tol, s.max_iterations, s.reuse_jacobian) == (1e-10, 1e-9, 50, False)


def test_stationary_converges_in_one_iteration(small_disc, materials):
    ctx = StepContext(0.01, 0.001, 0.1, (0.0, 0.0), materials, small_disc)
    s = SystemState.zeros(small_disc)
    s.phi[:] = materials.fh.phi_star
    nxt, rep = newton_solve(s, ctx)
    assert rep.iterations == 1
    # f'(phi_star) vanishes only up to rounding of the computed minimizer
    assert rep.final_increment < 1e-15
    assert rep.residual_norm < 1e-30
    assert rep.criterion == "absolute"
    assert np.abs(nxt.phi - s.phi).max() < 1e-15 and np.abs(nxt.u).max() < 1e-30


def test_increment_norm_is_l2(small_ctx):
    disc = small_ctx.disc
    L = small_ctx.assembler.layout
    x = np.zeros(L.size)
    x[L.phi] = 1.0
    assert increment_norm(small_ctx, x) == pytest.approx(np.sqrt(1.5), rel=1e-13)
    x[L.p] = 100.0  # pressure and r do not count
    x[L.r] = 5.0
    assert increment_norm(small_ctx, x) == pytest.approx(np.sqrt(1.5), rel=1e-13)
    x[L.mu] = 1.0
    assert increment_norm(small_ctx, x) == pytest.approx(np.sqrt(3.0), rel=1e-13)


@pytest.fixture(scope="module")
def channel_problem():
    cfg = SimulationConfig(mesh=MeshConfig(10, 30, 1.0, 3.0), T=0.03, dt=0.01, rng_seed=7)
    pb = build_problem(cfg)
    return pb, initial_state(cfg, pb.disc)


def test_channel_first_step(channel_problem):
    pb, s0 = channel_problem
    nxt, rep = newton_solve(s0, pb.ctx)
    assert rep.iterations <= 50
    assert rep.abs_increments[-1] < 1e-10 or rep.rel_increments[-1] < 1e-9
    # contraction over the last two iterations
    assert rep.abs_increments[-1] <= rep.abs_increments[-2]
    assert all(e <= 1e-10 for e in rep.backward_errors)
    # the accepted iterate is a root up to a small multiple of the last increment
    assert rep.residual_norm < 1e-8
    disc = pb.disc
    assert abs(disc.ones_p1 @ nxt.phi - disc.ones_p1 @ s0.phi) <= 1e-9


def test_newton_deterministic(channel_problem):
    pb, s0 = channel_problem
    a, _ = newton_solve(s0, pb.ctx)
    b, _ = newton_solve(s0, pb.ctx)
    for name in ("phi", "mu", "u", "p"):
        assert np.array_equal(getattr(a, name), getattr(b, name))
    assert a.r == b.r


def test_reuse_mode_matches_full_newton(channel_problem):
    pb, s0 = channel_problem
    full = NewtonSolver(pb.ctx, NewtonSettings())
    chord = NewtonSolver(pb.ctx, NewtonSettings(reuse_jacobian=True))
    a, b = s0, s0
    for _ in range(3):
        a, _ = full.step(a)
        b, _ = chord.step(b)
    disc = pb.disc
    assert disc.l2_norm_p1(a.phi - b.phi) < 1e-8
    assert disc.l2_norm_vel(a.u - b.u) < 1e-8
    assert chord.factorizations < full.factorizations


def test_nonconvergence_carries_history(channel_problem):
    pb, s0 = channel_problem
    with pytest.raises(NewtonConvergenceError) as info:
        newton_solve(s0, pb.ctx, NewtonSettings(max_iterations=1, abs_tol=1e-300, rel_tol=1e-300))
    err = info.value
    assert err.history.iterations == 1
    assert isinstance(err.iterate, SystemState)


def test_guess_is_used(small_ctx):
    rng = np.random.default_rng(3)
    disc = small_ctx.disc
    prev = random_state(disc, rng, amp_u=0.01, amp_phi=0.2)
    sol, rep = newton_solve(prev, small_ctx)
    again, rep2 = newton_solve(prev, small_ctx, guess=sol)
    assert rep2.iterations <= 2
    assert disc.l2_norm_p1(again.phi - sol.phi) < 1e-10


def test_solver_isolated_per_instance():
    disc = Discretization(build_channel_mesh(MeshConfig(2, 2)))
    from chns.materials import CHI_SEGREGATING, FloryHugginsParams, MaterialModel, load_viscosity_model

    mat = MaterialModel(FloryHugginsParams(CHI_SEGREGATING), load_viscosity_model())
    ctx = StepContext(0.01, 0.001, 0.1, (0.0, 0.0), mat, disc)
    s1, s2 = NewtonSolver(ctx), NewtonSolver(ctx)
    st = SystemState.zeros(disc)
    st.phi[:] = 0.3
    s1.step(st)
    assert s1.factorizations >= 1 and s2.factorizations == 0


def test_tiny_pivot_falls_back_to_threshold_pivoting():
    A = sp.csr_matrix(np.array([[1e-17, 1.0], [1.0, 1e-17]]))
    lu = lu_factorize(A)
    assert lu.pivoting == "threshold"
    # exact solution of the symmetric 2x2 system with b = (1, 1)
    assert lu.solve(np.ones(2)) == pytest.approx(np.full(2, 1 / (1 + 1e-17)), rel=1e-15)
    with pytest.raises(SingularMatrixError):
        lu_factorize(A, pivoting="static")
    with pytest.raises(ValueError):
        lu_factorize(A, pivoting="rook")


def test_static_pivoting_on_saddle_point_jacobian(channel_problem):
    pb, s0 = channel_problem
    asm = pb.ctx.assembler
    J = asm.jacobian(asm.freeze(s0), asm.layout.pack(s0))
    assert np.count_nonzero(J.diagonal() == 0) > 0  # pressure and multiplier rows
    fast, safe = lu_factorize(J), lu_factorize(J, pivoting="threshold")
    assert fast.pivoting == "static" and safe.pivoting == "threshold"
    assert fast.fill < safe.fill
    b = np.random.default_rng(4).normal(size=J.shape[0])
    x, y = fast.solve(b), safe.solve(b)
    assert fast.backward_error <= 1e-14 and safe.backward_error <= 1e-14
    scale = abs(J).sum(axis=1).max() * np.abs(x).max()
    assert np.abs(J @ x - b).max() <= 1e-14 * scale
    assert np.abs(x - y).max() <= 1e-8 * np.abs(y).max()
