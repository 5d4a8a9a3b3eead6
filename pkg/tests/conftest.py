import numpy as np
import pytest

from flowguide import models, paths


@pytest.fixture(scope="session")
def ot():
    return paths.cond_ot()


@pytest.fixture(scope="session")
def std_normal(ot):
    target = models.GaussianMixtureTarget([1.0], [[0.0, 0.0]], [np.eye(2)])
    return models.AnalyticMixture(target, ot)


@pytest.fixture(scope="session")
def dirac(ot):
    return models.AnalyticMixture(models.GaussianMixtureTarget.dirac([2.0, 0.0]), ot)


@pytest.fixture(scope="session")
def mixture(ot):
    return models.AnalyticMixture(models.two_mode_target(std=0.5), ot)


@pytest.fixture(scope="session")
def random_mixture(ot):
    rng = np.random.default_rng(7)
    return models.AnalyticMixture(models.GaussianMixtureTarget.random(rng, 3, 3), ot)


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
