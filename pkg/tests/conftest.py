import numpy as np
import pytest

from mlblue.coupling import CouplingStructure

ACCEPTANCE = {}


def random_spd(rng, p, cond=50.0):
    q, _ = np.linalg.qr(rng.standard_normal((p, p)))
    eig = np.exp(rng.uniform(0, np.log(cond), p))
    a = (q * eig) @ q.T
    return 0.5 * (a + a.T)


def random_instance(rng, L=None, K=None):
    """Random valid structure with random SPD group covariances and sample sizes."""
    L = L or int(rng.integers(1, 5))
    K = K or int(rng.integers(1, 6))
    subsets = [tuple(l + 1 for l in range(L) if (mask >> l) & 1) for mask in range(1, 2**L)]
    while True:
        pick = rng.choice(len(subsets), size=min(K, len(subsets)), replace=False)
        groups = [subsets[i] for i in pick]
        if set().union(*groups) == set(range(1, L + 1)):
            break
    m = tuple(int(v) for v in rng.integers(1, 50, size=len(groups)))
    s = CouplingStructure(L, groups, m)
    covs = tuple(random_spd(rng, len(g)) for g in s.groups)
    return s, covs


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def three_level():
    """Three levels coupled as {1}, {1,2}, {2,3}."""
    return CouplingStructure(3, [(1,), (1, 2), (2, 3)], m=(200, 50, 10), costs=(0.01, 0.11, 1.1))


@pytest.fixture
def acceptance():
    """Record (criterion, passed, detail) for the end-of-session summary."""
    def record(number, passed, detail):
        ACCEPTANCE[number] = (bool(passed), detail)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")


def hetero_field_spec(n=16):
    """Field hierarchy whose amplitude and inter-level coupling vary in space."""
    from mlblue.synthetic import FieldHierarchySpec

    i = np.arange(n)
    return FieldHierarchySpec(n, cutoffs=(2, 4, np.inf), noise=(0.6, 0.3, 0.05),
                              amplitude=tuple(1 + 0.3 * np.sin(2 * np.pi * i / n)),
                              noise_profile=tuple(0.5 + 1.0 * (i >= n / 2)))


@pytest.fixture
def nested():
    """Groups (1), (1,2), (2,3), (3): not the MLMC pattern."""
    return CouplingStructure(3, [(1,), (1, 2), (2, 3), (3,)], m=(40, 20, 10, 5))
