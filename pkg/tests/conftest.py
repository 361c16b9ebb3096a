import numpy as np
import pytest

from tunet.autodiff import Tensor, backward, sum_all, mul
from tunet.model import ModelConfig

TINY = dict(height=32, width=32, channels=1, patch_size=8, num_heads=2, num_layers=1,
            embed_channels=1, encoder_widths=(4, 8))


@pytest.fixture
def tiny_config():
    return ModelConfig(**TINY)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def central_difference(f, arrays, step=1e-4):
    """Numerical gradient of scalar ``f(*arrays)`` w.r.t. each array (64-bit)."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = arr[idx]
            arr[idx] = orig + step
            plus = f(*arrays)
            arr[idx] = orig - step
            minus = f(*arrays)
            arr[idx] = orig
            g[idx] = (plus - minus) / (2 * step)
        grads.append(g)
    return grads


def check_op_gradient(op, *arrays, rtol=1e-4, seed=0):
    """Compare backprop through ``op`` with central differences.

    The scalar objective is sum(op(*inputs) * R) for a fixed random R, so every
    output element carries a distinct weight.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    probe_out = op(*[Tensor(a) for a in arrays]).data
    weights = np.random.default_rng(seed).normal(size=probe_out.shape)

    def objective(*arrs):
        return float((op(*[Tensor(a) for a in arrs]).data * weights).sum())

    numeric = central_difference(objective, arrays)
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    backward(sum_all(mul(op(*leaves), Tensor(weights))))
    for leaf, num in zip(leaves, numeric):
        denom = np.maximum(np.maximum(np.abs(leaf.grad), np.abs(num)), 1e-8)
        rel = np.abs(leaf.grad - num) / denom
        assert rel.max() <= rtol, f"max relative error {rel.max():.3e}"


# ---------------------------------------------------------------------------
# acceptance reporting: one PASS/FAIL line per criterion at the end of the run

_criteria: dict[str, list] = {}


def pytest_runtest_logreport(report):
    label = dict(report.user_properties).get("criterion")
    if label is None:
        return
    entry = _criteria.setdefault(label, [True, []])
    if report.failed or (report.when == "call" and report.skipped):
        entry[0] = False
    if report.when == "call":
        entry[1].extend(v for k, v in report.user_properties if k == "note")


@pytest.fixture(autouse=True)
def _tag_criterion(request, record_property):
    marker = request.node.get_closest_marker("acceptance")
    if marker is not None:
        record_property("criterion", marker.args[0])


@pytest.fixture
def note(record_property):
    """Attach a measured value to the acceptance line of the current test."""
    return lambda text: record_property("note", text)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for label, (ok, notes) in _criteria.items():
        detail = f"  [{'; '.join(notes)}]" if notes else ""
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {label}{detail}")
