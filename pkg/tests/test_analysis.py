import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from chns.analysis import (
    NORMS, ErrorReport, eoc, inject_to_reference, l2_in_time, linf_in_time, prolongation,
    self_convergence_study, spacetime_norms,
)
from chns.mesh import MeshConfig, build_channel_mesh, build_convergence_mesh
from chns.spaces import P1, P2, Discretization, interpolate_nodal
from chns.timeloop import convergence_config, run


@pytest.fixture(scope="module")
def nested():
    return Discretization(build_convergence_mesh(0)), Discretization(build_convergence_mesh(1))


def test_eoc_examples():
    assert eoc(8.212e-01, 3.910e-01) == pytest.approx(1.071, abs=5e-4)
    assert eoc(1.0, 1.0) == 0.0
    assert eoc(4.0, 1.0) == 2.0
    for bad in ((0.0, 1.0), (1.0, -1.0), (float("nan"), 1.0)):
        with pytest.raises(ValueError):
            eoc(*bad)


@given(st.floats(1e-12, 1e6), st.floats(1e-12, 1e6), st.floats(1e-12, 1e6))
def test_eoc_additivity(a, b, c):
    assert eoc(a, b) + eoc(b, c) == pytest.approx(math.log2(a / c), abs=1e-12)


def test_inject_constant(nested):
    coarse, fine = nested
    c = np.full(coarse.n1, 0.37)
    assert np.allclose(inject_to_reference(c, coarse, fine, P1), 0.37, atol=1e-15, rtol=0)


def test_inject_hat_function(nested):
    coarse, fine = nested
    for j in (0, 17, 40):
        c = np.zeros(coarse.n1)
        c[j] = 1.0
        f = inject_to_reference(c, coarse, fine, P1)
        assert fine.h1_norm_p1(f) == pytest.approx(coarse.h1_norm_p1(c), rel=1e-12)
        assert fine.l2_norm_p1(f) == pytest.approx(coarse.l2_norm_p1(c), rel=1e-12)


def test_inject_random_velocity(nested):
    coarse, fine = nested
    rng = np.random.default_rng(0)
    for _ in range(3):
        u = rng.normal(size=2 * coarse.n2)
        f = inject_to_reference(u, coarse, fine, P2)
        assert len(f) == 2 * fine.n2
        assert fine.l2_norm_vel(f) == pytest.approx(coarse.l2_norm_vel(u), rel=1e-12)
        assert fine.h1_norm_vel(f) == pytest.approx(coarse.h1_norm_vel(u), rel=1e-12)


def test_inject_two_levels(nested):
    coarse, _ = nested
    finest = Discretization(build_convergence_mesh(2))
    c = np.random.default_rng(1).normal(size=coarse.n1)
    f = inject_to_reference(c, coarse, finest, P1)
    assert finest.h1_norm_p1(f) == pytest.approx(coarse.h1_norm_p1(c), rel=1e-12)


def test_non_nested_rejected(nested):
    coarse, _ = nested
    other = Discretization(build_channel_mesh(MeshConfig(12, 12)))
    with pytest.raises(ValueError):
        prolongation(coarse, other, P1)
    wide = Discretization(build_channel_mesh(MeshConfig(16, 16, 2.0, 1.0)))
    with pytest.raises(ValueError):
        prolongation(coarse, wide, P1)


def test_time_norm_examples():
    # H1 norm 2 held constant on [0, 2]
    v = np.array([2.0])
    times = [0.0, 0.5, 2.0]
    assert l2_in_time(times, [v, v, v], semantics="linear") == pytest.approx(2 * math.sqrt(2), rel=1e-15)
    assert l2_in_time(times, [None, v, v], semantics="constant") == pytest.approx(2 * math.sqrt(2), rel=1e-15)
    # linear growth 0 -> e_T over [0, T]
    T, eT = 3.0, np.array([1.5, 2.0])
    ts = np.linspace(0, T, 7)
    vals = [t / T * eT for t in ts]
    assert l2_in_time(ts, vals) == pytest.approx(np.linalg.norm(eT) * math.sqrt(T / 3), rel=1e-14)
    assert linf_in_time(vals) == pytest.approx(np.linalg.norm(eT), rel=1e-15)
    with pytest.raises(ValueError):
        l2_in_time([0.0, 1.0], [v])
    with pytest.raises(ValueError):
        l2_in_time([0.0, 1.0], [v, v], semantics="cubic")


def test_spacetime_norms_zero_and_constant(nested):
    disc, _ = nested
    times = np.linspace(0.0, 2.0, 5)
    z1, z2 = np.zeros(disc.n1), np.zeros(2 * disc.n2)
    res = spacetime_norms(disc, times, [z1] * 5, [z2] * 5, [None] + [z1] * 4, [None] + [z1] * 4)
    assert all(v == 0.0 for v in res.values())
    # mu error with H1 norm 2, constant in time on [0, 2]
    y = interpolate_nodal(lambda x, y: y, disc.Q)
    mu = y * (2.0 / disc.h1_norm_p1(y))
    res = spacetime_norms(disc, times, [z1] * 5, [z2] * 5, [None] + [mu] * 4, [None] + [mu] * 4)
    assert res["mu_L2_H1"] == pytest.approx(2 * math.sqrt(2), rel=1e-13)
    assert res["p_L2_L2"] == pytest.approx(math.sqrt(2) * disc.l2_norm_p1(mu), rel=1e-13)
    with pytest.raises(ValueError):
        spacetime_norms(disc, times, [z1] * 4, [z2] * 5, [None] * 5, [None] * 5)


def test_spacetime_norms_linear_velocity(nested):
    disc, _ = nested
    rng = np.random.default_rng(2)
    eT = rng.normal(size=2 * disc.n2)
    T = 1.0
    times = np.linspace(0.0, T, 9)
    us = [t / T * eT for t in times]
    z = np.zeros(disc.n1)
    res = spacetime_norms(disc, times, [z] * 9, us, [None] + [z] * 8, [None] + [z] * 8)
    assert res["u_L2_H1"] == pytest.approx(disc.h1_norm_vel(eT) * math.sqrt(T / 3), rel=1e-12)
    assert res["u_Linf_L2"] == pytest.approx(disc.l2_norm_vel(eT), rel=1e-12)


@pytest.fixture(scope="module")
def tiny_study():
    # four coarse steps of level 0 against eight of level 1
    T = 4.0 / 320.0
    return T, self_convergence_study((0, 1), reference=1, T=T, modes=("coarse", "fine"))


def test_study_coarse_mode_matches_direct_computation(tiny_study):
    T, reports = tiny_study
    c_cfg, f_cfg = convergence_config(0, T=T), convergence_config(1, T=T)
    ct, ft = run(c_cfg), run(f_cfg)
    from chns.timeloop import build_problem

    cd, fd = build_problem(c_cfg).disc, build_problem(f_cfg).disc
    cs, fs = ct.snapshots, ft.snapshots[::2]
    assert [s.step for s in fs] == [0, 2, 4, 6, 8]
    inj1 = lambda c: inject_to_reference(c, cd, fd, P1)
    inj2 = lambda c: inject_to_reference(c, cd, fd, P2)
    phi = [f.phi - inj1(c.phi) for c, f in zip(cs, fs)]
    u = [f.u - inj2(c.u) for c, f in zip(cs, fs)]
    mu = [None] + [f.mu - inj1(c.mu) for c, f in zip(cs[1:], fs[1:])]
    p = [None] + [f.p - inj1(c.p) for c, f in zip(cs[1:], fs[1:])]
    direct = spacetime_norms(fd, [s.t for s in cs], phi, u, mu, p)
    rep = reports["coarse"]
    for name in NORMS:
        assert rep.errors[name][0] == pytest.approx(direct[name], rel=1e-10)
        assert rep.errors[name][0] > 0


def test_study_fine_mode_differs_but_is_comparable(tiny_study):
    _, reports = tiny_study
    a, b = reports["coarse"], reports["fine"]
    for name in NORMS:
        assert 0.2 < a.errors[name][0] / b.errors[name][0] < 5.0


def test_report_output(tiny_study, tmp_path):
    _, reports = tiny_study
    rep = reports["coarse"]
    text = rep.to_text()
    assert "time comparison: coarse" in text.splitlines()[0]
    assert "---" in text
    path = tmp_path / "eoc.csv"
    rep.to_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0].startswith("#") and lines[1].startswith("k,phi_Linf_H1,phi_Linf_H1_eoc")
    assert len(lines) == 3


def test_report_eocs():
    rep = ErrorReport([0, 1, 2], 3, errors={n: [0.8, 0.2, 0.05] for n in NORMS})
    for name in NORMS:
        assert math.isnan(rep.eocs[name][0])
        assert rep.eocs[name][1:] == pytest.approx([2.0, 2.0], abs=1e-15)


def test_study_argument_checks():
    with pytest.raises(ValueError):
        self_convergence_study((1,), reference=1, T=0.01)
    with pytest.raises(ValueError):
        self_convergence_study((0, 1), T=0.0125, modes=("middle",))
