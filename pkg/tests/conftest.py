import numpy as np
import pytest

from pdmpfv.model import DomainSpec, FlowMap, HittingTime, MixtureKernel, PdmpModel, build_tcp_model

ACCEPTANCE_LINES: list[str] = []


def translation_model(X=2.0, rate=0.0, rate_bound=1.0, boundary=None, interior=None, initial=None, lower=0.0):
    """Unit-speed translation on (-inf, X) with a constant jump rate."""
    domain = DomainSpec(upper=X, truncation_lower=lower)
    return PdmpModel(
        domain=domain,
        flow=FlowMap(lambda x, t: np.minimum(x + t, X)),
        alpha=HittingTime(lambda x: X - x, domain),
        rate=lambda x: np.full_like(x, rate),
        rate_bound=rate_bound,
        interior_kernel=interior or MixtureKernel.dirac(lambda x: 0.5 * x),
        boundary_kernel=boundary or MixtureKernel.dirac(0.5 * X),
        initial_law=initial or MixtureKernel.dirac(lower),
    )


@pytest.fixture
def tcp_fj():
    return build_tcp_model("TCP-FJ", 2.0, 0.5)


@pytest.fixture
def tcp_f():
    return build_tcp_model("TCP-F", 2.0)


@pytest.fixture
def tcp_i():
    return build_tcp_model("TCP-I", 6.0)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
