import numpy as np
import pytest


def central_diff(f, arrays, eps=1e-4):
    """Central finite differences of scalar ``f(*arrays)`` w.r.t. every array.

    Works on raw float64 numpy arrays and never touches the tape.
    """
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = a[i]
            a[i] = old + eps
            fp = f(*arrays)
            a[i] = old - eps
            fm = f(*arrays)
            a[i] = old
            g[i] = (fp - fm) / (2 * eps)
        grads.append(g)
    return grads


def rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)
    return float(np.linalg.norm(a - b) / denom)


@pytest.fixture
def np_rng():
    return np.random.default_rng(1234)


def random_flow(seed, tokens=3, token_dim=2, blocks=2, dtype=np.float64, clip=1.0,
                num_classes=2, layers=1, width=16, scale=0.25):
    """Untrained flow with random (non-identity) output heads."""
    from biflow.flow import FlowConfig, ForwardModel, perturb_heads
    from biflow.numerics import Rng

    cfg = FlowConfig(tokens=tokens, token_dim=token_dim, blocks=blocks, layers=layers, width=width,
                     num_classes=num_classes, clip=clip)
    rng = Rng(seed)
    return perturb_heads(ForwardModel(cfg, rng.split(), dtype), rng.split(), scale)


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
