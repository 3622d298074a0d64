import numpy as np
import pytest

from advmlm import tensor as T

# Lines appended by the acceptance suite, echoed in the terminal summary.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def f64():
    with T.default_dtype(np.float64):
        yield


def numeric_grad(fn, arrays, index, eps=1e-4):
    """Central differences of scalar ``fn(*arrays)`` w.r.t. ``arrays[index]``."""
    x = arrays[index]
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        up = fn(*arrays)
        x[i] = old - eps
        down = fn(*arrays)
        x[i] = old
        grad[i] = (up - down) / (2 * eps)
    return grad


def max_rel_error(a, b, floor=1e-6):
    """Largest |a-b| relative to the scale of the gradient tensor."""
    scale = max(np.abs(a).max(), np.abs(b).max(), floor)
    return float(np.abs(a - b).max() / scale)


def grad_check(build, arrays, eps=1e-4):
    """Compare autodiff and central-difference gradients of ``build``.

    ``build`` maps Tensors to a scalar Tensor.  Returns the worst relative
    error over all inputs.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]

    def value(*arrs):
        with T.no_grad():
            return float(build(*[T.Tensor(a) for a in arrs]).data)

    leaves = [T.Tensor(a.copy(), requires_grad=True) for a in arrays]
    build(*leaves).backward()
    worst = 0.0
    for k, leaf in enumerate(leaves):
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(arrays[k])
        worst = max(worst, max_rel_error(analytic, numeric_grad(value, arrays, k, eps)))
    return worst


def small_config(**changes):
    """A config small enough for many short runs in one test session."""
    from advmlm.config import RunConfig

    base = dict(
        synth_kind="markov", synth_num_sequences=200, synth_min_len=10, synth_max_len=20, max_len=24,
        noiser_layers=1, noiser_embed_dim=16, noiser_hidden_dim=8,
        encoder_layers=1, encoder_heads=2, encoder_model_dim=16, encoder_ff_dim=32, encoder_max_seq_len=32,
        batch_size=8, max_steps=40, checkpoint_interval=0, lr=1e-3,
    )
    base.update(changes)
    return RunConfig(**base)
