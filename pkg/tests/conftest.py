import numpy as np
import pytest

from irebilevel.experiments import InstanceSpec, gen_instance, reference_solve
from irebilevel.solvers import SolverConfig, StepRule, solve


@pytest.fixture(scope="session")
def instance():
    return gen_instance(InstanceSpec(n=50, tau=0.1, seed=0, rho=1.0))


@pytest.fixture(scope="session")
def reference(instance):
    return reference_solve(instance.problem, instance)


class Runs:
    """Solver runs on the default instance, cached across the session."""

    def __init__(self, instance, reference):
        self.instance = instance
        self.reference = reference
        self._lifted = {}
        self._traces = {}

    def lifted(self, rho=1.0):
        if rho not in self._lifted:
            lp = self.instance.lifted(rho)
            self._lifted[rho] = (lp, lp.lift_reference(self.reference))
        return self._lifted[rho]

    def trace(self, algorithm, beta, rule="constant", rho=1.0, K=10_000,
              mode="verify", windows=()):
        key = (algorithm, beta, rule, rho, K, mode, tuple(windows))
        if key not in self._traces:
            lp, lref = self.lifted(rho)
            cfg = SolverConfig(algorithm=algorithm, beta=beta,
                               step_rule=StepRule(rule, 0.5, 1.0), iterations=K,
                               mode=mode, rho=rho, kstar_windows=tuple(windows))
            self._traces[key] = solve(lp.lifted, cfg, lp.embed(np.zeros(lp.n)), lref)
        return self._traces[key]


@pytest.fixture(scope="session")
def runs(instance, reference):
    return Runs(instance, reference)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
