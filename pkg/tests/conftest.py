import numpy as np
import pytest


def fd_gradient(f, x, h=1e-5):
    """Central finite differences of a scalar function."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def rel_err(analytic, numeric, floor=1e-8):
    """Max-norm relative error ``|a - n|_inf / max(|n|_inf, floor)``."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return float(np.max(np.abs(a - n)) / max(np.max(np.abs(n)), floor))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def default_teacher():
    """Teacher pretrained once with the default configuration (about a minute)."""
    from betakd.config import ExperimentConfig
    from betakd.training import build_source, obtain_teacher

    cfg = ExperimentConfig()
    source = build_source(cfg)
    return source, obtain_teacher(cfg, source)


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def acceptance_report(request):
    """Record (and print) one pass/fail line for a numbered criterion."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def report(number, passed, detail):
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {detail}"
        lines.append((number, line))
        print(line)
        return passed

    return report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines, key=lambda item: item[0]):
            terminalreporter.write_line(line)
