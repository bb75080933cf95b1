import csv

import numpy as np
import pytest

from pdmpfv.coefficients import compute_coefficients
from pdmpfv.measures import (
    DiscreteMeasures,
    TestFunction,
    bump_test_function,
    constant_test_function,
    flow_derivative,
    integrate_mu,
    integrate_sigma,
    kolmogorov_residual,
    time_cutoff,
    write_mu_atoms,
    write_sigma_atoms,
)
from pdmpfv.mesh import build_uniform
from pdmpfv.model import build_tcp_model
from pdmpfv.solver import SchemeParams, run_transient


def _measures(model, h, T, tau=None, dt=None):
    tau = tau or h
    dt = dt or h
    mesh = build_uniform(model.domain, h)
    coeffs = compute_coefficients(model, mesh, tau)
    run = run_transient(model, mesh, coeffs, SchemeParams(dt, tau), T)
    return DiscreteMeasures.from_run(run, coeffs, mesh), run


ONE = TestFunction(lambda x, t: np.ones_like(x), support_end=np.inf)


def test_mu_total_mass_is_horizon(tcp_fj):
    m, _ = _measures(tcp_fj, 0.1, 2.0)
    assert integrate_mu(m, ONE) == pytest.approx(2.0, abs=1e-12)


def test_mu_is_linear(tcp_fj):
    m, _ = _measures(tcp_fj, 0.1, 2.0)
    f = bump_test_function()
    g = TestFunction(lambda x, t: x * np.exp(-t), support_end=np.inf)
    both = TestFunction(lambda x, t: 2.0 * f(x, t) - 3.0 * g(x, t), support_end=np.inf)
    assert integrate_mu(m, both) == pytest.approx(2.0 * integrate_mu(m, f) - 3.0 * integrate_mu(m, g), rel=1e-12)


def test_sigma_mass_matches_q_weights(tcp_fj):
    m, run = _measures(tcp_fj, 0.1, 2.0)
    expected = m.dt * float(np.sum(run.densities @ m.coeffs.q_vec))
    assert integrate_sigma(m, ONE) == pytest.approx(expected, rel=1e-12)
    assert m.sigma_weights().sum() == pytest.approx(expected, rel=1e-12)


@pytest.mark.parametrize("variant, X", [("TCP-I", 6.0), ("TCP-F", 2.0), ("TCP-FJ", 2.0)])
def test_sigma_atoms_sit_on_the_boundary(variant, X):
    model = build_tcp_model(variant, X)
    mesh = build_uniform(model.domain, 0.2)
    coeffs = compute_coefficients(model, mesh, 0.2)
    np.testing.assert_array_equal(coeffs.boundary.image, X)


def test_tcp_i_boundary_measure_is_negligible():
    model = build_tcp_model("TCP-I", 6.0)
    m, _ = _measures(model, 0.01, 10.0)
    assert integrate_sigma(m, ONE) <= 1e-6


@pytest.mark.parametrize(
    "g, x, t, expected",
    [
        (lambda x, t: x, 0.5, 0.0, 1.0),
        (lambda x, t: t + 0.0 * x, 0.5, 3.0, 1.0),
        (lambda x, t: x * t, 1.0, 2.0, 3.0),
        (lambda x, t: np.sin(x), 0.3, 0.0, np.cos(0.3)),
    ],
)
def test_flow_derivative(tcp_fj, g, x, t, expected):
    assert flow_derivative(g, tcp_fj, x, t, 1e-4) == pytest.approx(expected, abs=1e-7)


def test_flow_derivative_needs_room_before_boundary(tcp_fj):
    with pytest.raises(ValueError):
        flow_derivative(lambda x, t: x, tcp_fj, 1.99995, 0.0, 1e-4)
    with pytest.raises(ValueError):
        flow_derivative(lambda x, t: x, tcp_fj, 1.0, 0.0, 0.0)


def test_zero_test_function_has_zero_residual(tcp_fj):
    m, run = _measures(tcp_fj, 0.2, 2.0)
    zero = TestFunction(lambda x, t: 0.0 * x, support_end=2.0)
    assert kolmogorov_residual(m, run.final, tcp_fj, zero) == 0.0


def test_constant_in_x_residual_is_small(tcp_fj):
    # only the time factor of g changes, so every term but transport cancels
    m, run = _measures(tcp_fj, 0.025, 2.0)
    assert kolmogorov_residual(m, run.final, tcp_fj, constant_test_function()) <= 1e-6


def test_residual_horizon_must_match(tcp_fj):
    m, run = _measures(tcp_fj, 0.2, 2.0)
    with pytest.raises(ValueError):
        kolmogorov_residual(m, run.final, tcp_fj, bump_test_function(), T=1.5)


def test_bump_residual_shrinks_under_refinement(tcp_fj):
    values = []
    for h in (0.2, 0.1):
        m, run = _measures(tcp_fj, h, 2.0)
        values.append(kolmogorov_residual(m, run.final, tcp_fj, bump_test_function()))
    assert values[1] < values[0]


def test_time_cutoff_shape():
    t = np.array([0.0, 1.0, 1.5, 2.0, 3.0])
    c = time_cutoff(t, 1.0, 2.0)
    np.testing.assert_allclose(c, [1.0, 1.0, 0.5, 0.0, 0.0], atol=1e-15)


def test_atom_exports(tmp_path, tcp_fj):
    m, _ = _measures(tcp_fj, 0.2, 1.0)
    with open(write_mu_atoms(m, tmp_path / "mu.csv")) as fh:
        rows = list(csv.DictReader(fh))
    assert sum(float(r["weight"]) for r in rows) == pytest.approx(1.0, abs=1e-12)
    with open(write_sigma_atoms(m, tmp_path / "sigma.csv")) as fh:
        srows = list(csv.DictReader(fh))
    assert all(float(r["x"]) == 2.0 for r in srows)
    assert sum(float(r["weight"]) for r in srows) == pytest.approx(m.sigma_weights().sum(), rel=1e-12)
