"""The numba and numpy kernel paths must agree."""
import numpy as np
import pytest

from advmlm import _backend, kernels

pytestmark = pytest.mark.skipif(not _backend.numba_available(), reason="numba not installed")


@pytest.fixture
def both_backends():
    previous = _backend.backend_name()

    def run(fn):
        out = {}
        for name in ("numba", "numpy"):
            _backend.set_backend(name)
            out[name] = fn()
        return out["numba"], out["numpy"]

    yield run
    _backend.set_backend(previous)


def _close(a, b):
    if isinstance(a, tuple):
        for x, y in zip(a, b):
            _close(x, y)
    else:
        np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_masked_softmax_parity(both_backends, seed):
    r = np.random.default_rng(seed)
    x = r.normal(size=(3, 4, 7))
    mask = r.random((3, 4, 7)) > 0.3
    mask[0, 0] = False
    _close(*both_backends(lambda: kernels.masked_softmax_forward(x, mask)))


@pytest.mark.parametrize("seed", range(5))
def test_layer_norm_parity(both_backends, seed):
    r = np.random.default_rng(seed)
    x, g = r.normal(size=(5, 9)), r.normal(size=(5, 9))
    _close(*both_backends(lambda: kernels.layer_norm_forward(x, 1e-5)))
    xhat, rstd = kernels.layer_norm_forward(x, 1e-5)
    _close(*both_backends(lambda: kernels.layer_norm_backward(g, xhat, rstd)))


@pytest.mark.parametrize("reverse", [False, True])
@pytest.mark.parametrize("seed", range(3))
def test_gru_parity(both_backends, seed, reverse):
    r = np.random.default_rng(seed)
    B, S, H = 3, 6, 4
    gi = r.normal(size=(B, S, 3 * H))
    w, b = 0.5 * r.normal(size=(3 * H, H)), 0.5 * r.normal(size=3 * H)
    mask = (r.random((B, S)) > 0.2).astype(float)
    fwd = both_backends(lambda: kernels.gru_forward(gi, w, b, mask, reverse))
    _close(fwd[0][0], fwd[1][0])
    _close(fwd[0][1], fwd[1][1])
    dout = r.normal(size=(B, S, H))
    saved = fwd[1][1]
    _close(*both_backends(lambda: kernels.gru_backward(dout, w, mask, saved, reverse)))


def test_gru_carries_state_over_invalid_positions():
    gi = np.random.default_rng(0).normal(size=(1, 3, 6))
    w, b = np.zeros((6, 2)), np.zeros(6)
    mask = np.array([[1.0, 0.0, 1.0]])
    out, saved = kernels.gru_forward(gi, w, b, mask, False)
    assert np.all(out[0, 1] == 0)
    hprev = saved[0]
    np.testing.assert_array_equal(hprev[2, 0], hprev[1, 0])


def test_env_flag_parsing(monkeypatch):
    import importlib

    monkeypatch.setenv("ADVMLM_NUMBA", "off")
    mod = importlib.reload(_backend)
    try:
        assert not mod.using_numba()
    finally:
        monkeypatch.delenv("ADVMLM_NUMBA")
        importlib.reload(_backend)
