import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pdmpfv.coefficients import QuadratureSpec, compute_coefficients, kernel_cell_masses, verify_balance
from pdmpfv.mesh import Mesh1D, build_uniform
from pdmpfv.model import build_tcp_model
from pdmpfv.solver import DensityState, ImplicitStepper, SchemeParams

VARIANTS = st.sampled_from([("TCP-I", 6.0), ("TCP-F", 2.0), ("TCP-FJ", 2.0)])


@pytest.mark.parametrize("variant, X", [("TCP-I", 6.0), ("TCP-F", 2.0), ("TCP-FJ", 2.0)])
def test_flow_semigroup_and_hitting_time_cocycle(variant, X):
    model = build_tcp_model(variant, X)
    rng = np.random.default_rng(17)
    x = rng.uniform(0.0, X, 1000)
    s, t = rng.uniform(0.0, X, (2, 1000))
    np.testing.assert_allclose(model.flow(model.flow(x, s), t), model.flow(x, s + t), atol=1e-12)
    before = s < model.alpha(x)
    xs, ss = x[before], s[before]
    np.testing.assert_allclose(model.alpha(model.flow(xs, ss)), model.alpha(xs) - ss, atol=1e-9)


@settings(max_examples=40, deadline=None)
@given(VARIANTS, st.floats(0.0, 0.999), st.integers(1, 40))
def test_kernel_cell_masses_sum_to_one(variant_x, frac, n_cells):
    variant, X = variant_x
    model = build_tcp_model(variant, X)
    mesh = build_uniform(model.domain, X / n_cells) if n_cells > 1 else Mesh1D.from_edges([0.0, X])
    x = np.array([frac * X])
    for kernel in (model.interior_kernel, model.boundary_kernel):
        masses, outside = kernel_cell_masses(kernel, x if kernel is model.interior_kernel else np.array([X]), mesh)
        assert masses.sum() + outside.sum() == pytest.approx(1.0, abs=1e-10)
        assert outside.sum() <= 1e-12


@settings(max_examples=25, deadline=None)
@given(
    VARIANTS,
    st.integers(2, 60),
    st.floats(0.01, 3.0),
    st.integers(1, 16),
    st.sampled_from(["midpoint", "uniform"]),
)
def test_balance_identity_on_random_meshes(variant_x, n_cells, tau_scale, m, rule):
    variant, X = variant_x
    model = build_tcp_model(variant, X)
    edges = np.sort(np.random.default_rng(n_cells).uniform(0.0, X, n_cells - 1))
    mesh = Mesh1D.from_edges(np.unique(np.concatenate([[0.0], edges, [X]])))
    tau = tau_scale * float(mesh.volumes.mean())
    coeffs = compute_coefficients(model, mesh, tau, QuadratureSpec(m, rule, seed=n_cells))
    assert verify_balance(coeffs, mesh) <= 1e-13 * float(mesh.volumes.max())


@settings(max_examples=25, deadline=None)
@given(
    VARIANTS,
    st.floats(0.05, 0.5),
    st.floats(0.2, 3.0),
    st.floats(0.01, 100.0),
    st.integers(0, 2**32 - 1),
    st.sampled_from(["direct", "fixed-point"]),
)
def test_step_keeps_positivity_and_mass(variant_x, h, tau_scale, dt, seed, method):
    variant, X = variant_x
    model = build_tcp_model(variant, X, h=h)
    mesh = build_uniform(model.domain, h)
    tau = tau_scale * h
    coeffs = compute_coefficients(model, mesh, tau)
    p = np.random.default_rng(seed).random(mesh.n_cells)
    p /= np.dot(mesh.volumes, p)
    state = DensityState(p, 0, mesh.volumes)
    stepper = ImplicitStepper(coeffs, SchemeParams(dt, tau, method=method))
    for _ in range(3):
        state = stepper.step(state)
        assert state.p.min() >= 0.0
        assert state.mass == pytest.approx(1.0, abs=1e-9)
