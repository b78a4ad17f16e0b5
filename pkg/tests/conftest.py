import numpy as np
import pytest

from fedleak_lab.autodiff import Tensor, finite_difference_oracle, grad, max_relative_error


def gradcheck(build, arrays, seed=0, h=1e-5):
    """Compare engine gradients of sum(W * build(*inputs)) with central differences.

    Returns the worst relative error over all inputs.
    """
    rng = np.random.default_rng(seed)
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    out = build(*leaves)
    weights = rng.normal(size=out.shape)

    def scalar(*ts):
        o = build(*ts)
        return (o * weights).sum()

    analytic = grad(scalar(*leaves), leaves)
    worst = 0.0
    for k, a in enumerate(arrays):
        def f(v, k=k):
            args = [Tensor(v) if j == k else Tensor(arrays[j]) for j in range(len(arrays))]
            return scalar(*args).item()
        numeric = finite_difference_oracle(f, a, h=h)
        worst = max(worst, max_relative_error(analytic[k].data, numeric))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(42)


# one verdict line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
