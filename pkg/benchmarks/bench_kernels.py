"""Time the numba kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 20]

Each row reports the median wall time per call on both backends.  The
first numba call (compilation) is excluded.  ``full step`` is one noiser
update plus one encoder update at the default model sizes.
"""
import argparse
import statistics
import time

import numpy as np

from advmlm import _backend, kernels
from advmlm.config import RunConfig
from advmlm.data import make_batch
from advmlm.training import PRE_TRAINING_ENCODING, PRE_TRAINING_NOISING, build_corpus, init_state, update_encoder, update_noiser


def _median_time(fn, repeat):
    fn()  # warm-up / compile
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return statistics.median(times)


def _cases():
    r = np.random.default_rng(0)
    B, S, H = 32, 64, 64
    gi = r.normal(size=(B, S, 3 * H)).astype(np.float32)
    w = (0.1 * r.normal(size=(3 * H, H))).astype(np.float32)
    b = np.zeros(3 * H, dtype=np.float32)
    mask = np.ones((B, S), dtype=np.float32)
    out, saved = kernels.gru_forward(gi, w, b, mask, False)
    dout = r.normal(size=out.shape).astype(np.float32)

    x = r.normal(size=(B, S, 128)).astype(np.float32)
    xhat, rstd = kernels.layer_norm_forward(x, 1e-5)
    scores = r.normal(size=(B, 4, S, S)).astype(np.float32)
    smask = np.broadcast_to(r.random((B, 1, 1, S)) > 0.1, scores.shape)

    cfg = RunConfig(synth_kind="markov", synth_num_sequences=256, synth_min_len=30, synth_max_len=60)
    state = init_state(cfg)
    batch = make_batch(build_corpus(cfg)[0][: cfg.batch_size], state.vocab, cfg.max_len)

    def full_step():
        state.mode = PRE_TRAINING_NOISING
        update_noiser(state, batch)
        state.mode = PRE_TRAINING_ENCODING
        update_encoder(state, batch)

    return {
        "gru forward (32x64x64)": lambda: kernels.gru_forward(gi, w, b, mask, False),
        "gru backward": lambda: kernels.gru_backward(dout, w, mask, saved, False),
        "layer norm fwd+bwd (32x64x128)": lambda: kernels.layer_norm_backward(x, *kernels.layer_norm_forward(x, 1e-5)),
        "masked softmax (32x4x64x64)": lambda: kernels.masked_softmax_forward(scores, smask),
        "full step (default config)": full_step,
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    if not _backend.numba_available():
        raise SystemExit("numba is not installed; nothing to compare")
    cases = _cases()
    print(f"{'kernel':34s} {'numba ms':>10s} {'numpy ms':>10s} {'speed-up':>9s}")
    for name, fn in cases.items():
        timing = {}
        for backend in ("numba", "numpy"):
            _backend.set_backend(backend)
            timing[backend] = _median_time(fn, args.repeat if "full" not in name else max(3, args.repeat // 5))
        print(f"{name:34s} {timing['numba'] * 1e3:10.3f} {timing['numpy'] * 1e3:10.3f} {timing['numpy'] / timing['numba']:8.1f}x")


if __name__ == "__main__":
    main()
