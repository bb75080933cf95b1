import numpy as np
import pytest
import scipy.sparse as sp

from pdmpfv.coefficients import BoundarySamples, CoefficientSet, compute_coefficients
from pdmpfv.mesh import build_uniform
from pdmpfv.model import MixtureKernel, uniform_part
from pdmpfv.solver import (
    DensityState,
    ImplicitStepper,
    SchemeError,
    SchemeParams,
    dense_step,
    fixed_point_solve,
    init_density,
    run_stationary,
    run_transient,
    step_implicit,
)

from conftest import translation_model


def _setup(model, h, tau, dt, method="direct"):
    mesh = build_uniform(model.domain, h)
    coeffs = compute_coefficients(model, mesh, tau)
    return mesh, coeffs, SchemeParams(dt, tau, method=method)


@pytest.fixture
def drain_model():
    # pure translation whose boundary kernel drops the mass below the mesh
    return translation_model(X=3.2, boundary=MixtureKernel.dirac(-1.0))


def test_pure_translation_matches_geometric_closed_form(drain_model):
    mesh, coeffs, params = _setup(drain_model, 0.1, 0.1, 0.1)
    assert mesh.n_cells == 32
    rng = np.random.default_rng(3)
    p_n = rng.random(mesh.n_cells)
    state = DensityState(p_n, 0, mesh.volumes)
    expected = np.array([sum(0.5 ** (j + 1) * p_n[k - j] for j in range(k + 1)) for k in range(mesh.n_cells)])
    np.testing.assert_allclose(dense_step(state, coeffs, params), expected, rtol=1e-13)
    for method in ("direct", "fixed-point"):
        out = ImplicitStepper(coeffs, SchemeParams(0.1, 0.1, method=method), check_monotone=True).step(state)
        np.testing.assert_allclose(out.p, expected, rtol=1e-11)


def test_single_step_conserves_mass(tcp_fj):
    mesh, coeffs, params = _setup(tcp_fj, 0.1, 0.1, 0.1)
    state = init_density(tcp_fj, mesh)
    nxt = step_implicit(state, coeffs, params)
    assert nxt.mass == pytest.approx(1.0, abs=1e-14)
    assert nxt.p.min() >= 0


def test_zero_state_stays_zero(tcp_fj):
    mesh, coeffs, params = _setup(tcp_fj, 0.2, 0.2, 0.2, method="fixed-point")
    out = step_implicit(DensityState(np.zeros(mesh.n_cells), 0, mesh.volumes), coeffs, params)
    assert np.all(out.p == 0)


def test_diagonal_system_converges_immediately():
    n, tau, dt = 5, 0.5, 0.25
    vol = np.full(n, 0.2)
    empty = sp.csr_matrix((n, n))
    coeffs = CoefficientSet(
        v=empty, lambda_mat=empty, lambda_vec=np.zeros(n), q_vec=np.zeros(n), q_mat=empty, tau=tau,
        volumes=vol, lost_rate=vol / tau, points=np.zeros(0), weights=np.zeros(0), cells=np.zeros(0, int),
        boundary=BoundarySamples(np.zeros(0, int), np.zeros(0), np.zeros(0)),
    )
    p_n = np.arange(1.0, n + 1)
    res = fixed_point_solve(DensityState(p_n, 0, vol), coeffs, SchemeParams(dt, tau))
    np.testing.assert_allclose(res.p, p_n / (1 + dt / tau), rtol=1e-15)
    assert res.iterations <= 2
    assert res.increments[-1] == 0.0


def test_fixed_point_rejects_negative_rhs(tcp_fj):
    mesh, coeffs, params = _setup(tcp_fj, 0.5, 0.5, 0.5)
    with pytest.raises(ValueError):
        fixed_point_solve(DensityState(-np.ones(mesh.n_cells), 0, mesh.volumes), coeffs, params)


def test_fixed_point_and_direct_agree(tcp_fj):
    mesh, coeffs, _ = _setup(tcp_fj, 0.1, 0.1, 0.1)
    state = init_density(tcp_fj, mesh)
    fp = ImplicitStepper(coeffs, SchemeParams(0.1, 0.1, method="fixed-point"))
    lu = ImplicitStepper(coeffs, SchemeParams(0.1, 0.1, method="direct"))
    a = b = state
    for _ in range(50):
        a, b = fp.step(a), lu.step(b)
        assert a.weighted_l1(b) <= 1e-9


def test_nonconverging_fixed_point_raises(tcp_fj):
    mesh = build_uniform(tcp_fj.domain, 0.1)
    coeffs = compute_coefficients(tcp_fj, mesh, 0.1)
    params = SchemeParams(0.1, 0.1, fixed_point_tolerance=1e-30, max_fixed_point_iterations=3, method="fixed-point")
    with pytest.raises(SchemeError):
        ImplicitStepper(coeffs, params).step(init_density(tcp_fj, mesh))


def test_tau_mismatch_is_rejected(tcp_fj):
    mesh, coeffs, _ = _setup(tcp_fj, 0.5, 0.5, 0.5)
    with pytest.raises(ValueError):
        ImplicitStepper(coeffs, SchemeParams(0.5, 0.25))


@pytest.mark.parametrize("kwargs", [dict(dt=0.0, tau=0.1), dict(dt=0.1, tau=-1.0), dict(dt=0.1, tau=0.1, method="explicit")])
def test_bad_scheme_params(kwargs):
    with pytest.raises(ValueError):
        SchemeParams(**kwargs)


def test_init_density_dirac_at_origin(tcp_fj):
    mesh = build_uniform(tcp_fj.domain, 0.2)
    p0 = init_density(tcp_fj, mesh)
    assert p0.p[0] == pytest.approx(5.0)
    assert np.all(p0.p[1:] == 0)


def test_init_density_uniform_law():
    model = translation_model(initial=MixtureKernel((), uniform_part(0.0, 2.0, 1.0)))
    p0 = init_density(model, build_uniform(model.domain, 0.25))
    np.testing.assert_allclose(p0.p, 0.5, rtol=1e-12)


def test_init_density_outside_mesh_raises():
    model = translation_model(initial=MixtureKernel.dirac(2.5))
    with pytest.raises(ValueError):
        init_density(model, build_uniform(model.domain, 0.25))


def test_transient_with_zero_horizon(tcp_fj):
    mesh, coeffs, params = _setup(tcp_fj, 0.2, 0.2, 0.2)
    run = run_transient(tcp_fj, mesh, coeffs, params, 0.0, snapshots=[0.0])
    assert run.steps == 0
    np.testing.assert_array_equal(run.final.p, run.initial.p)
    assert run.snapshots[0.0] is run.initial


def test_transient_snapshots_and_times(tcp_fj):
    mesh, coeffs, params = _setup(tcp_fj, 0.2, 0.2, 0.2)
    run = run_transient(tcp_fj, mesh, coeffs, params, 1.0, snapshots=[0.4, 1.0])
    assert run.steps == 5
    np.testing.assert_allclose(run.times, [0.0, 0.2, 0.4, 0.6, 0.8])
    np.testing.assert_array_equal(run.snapshots[0.4].p, run.densities[1])
    assert run.snapshots[1.0] is run.final
    np.testing.assert_allclose(run.masses, 1.0, atol=1e-13)


def test_stationary_is_a_fixed_point(tcp_fj):
    mesh = build_uniform(tcp_fj.domain, 0.05)
    coeffs = compute_coefficients(tcp_fj, mesh, 0.05)
    params = SchemeParams(1e6, 0.05)
    rho = run_stationary(tcp_fj, mesh, coeffs, params)
    again = ImplicitStepper(coeffs, params).step(rho)
    assert again.weighted_l1(rho) < 1e-10
    assert rho.mass == pytest.approx(1.0, abs=1e-12)


def test_stationary_warns_for_small_dt(tcp_fj):
    mesh = build_uniform(tcp_fj.domain, 0.2)
    coeffs = compute_coefficients(tcp_fj, mesh, 0.2)
    with pytest.warns(UserWarning):
        run_stationary(tcp_fj, mesh, coeffs, SchemeParams(10.0, 0.2), tol=1e-8)
