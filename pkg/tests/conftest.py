import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def rel_err(a, b, floor=1e-8):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def central_diff(f, x, h=1e-5):
    """Central finite-difference gradient of scalar f at array x."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def grad_close(analytic, numeric, tol=1e-4, atol=1e-7):
    """Relative error against the gradient's scale, ignoring entries that are both ~0."""
    a, n = np.asarray(analytic), np.asarray(numeric)
    scale = max(np.max(np.abs(a)), np.max(np.abs(n)), atol)
    return float(np.max(np.abs(a - n)) / scale) <= tol


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance report ---------------------------------------------------------------------
ACCEPTANCE: list[str] = []


class criterion:
    """Record one PASS/FAIL line for an acceptance criterion; failures re-raise."""

    def __init__(self, number: int, title: str):
        self.number, self.title, self.detail = number, title, ""

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        status = "PASS" if exc_type is None else "FAIL"
        line = f"{status} criterion {self.number:>2}: {self.title}"
        if self.detail:
            line += f" [{self.detail}]"
        if exc_type is not None and exc_type is not AssertionError:
            line += f" ({exc_type.__name__}: {exc})"
        ACCEPTANCE.append(line)
        print(line)
        return False


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
