"""Checkpoint format, round trips and exact resume."""
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from advmlm import checkpoint as ckpt
from advmlm.training import Trainer, comparable, load_checkpoint, save_checkpoint, state_blobs, train

from conftest import small_config

FP = bytes(range(32))


@settings(max_examples=30, deadline=None)
@given(
    st.dictionaries(
        st.text(min_size=1, max_size=12),
        st.one_of(
            st.binary(max_size=40),
            st.lists(st.floats(allow_nan=False, width=32), max_size=12).map(lambda v: np.array(v, dtype=np.float32)),
            st.lists(st.integers(-(2**40), 2**40), max_size=6).map(lambda v: np.array(v, dtype=np.int64)),
        ),
        max_size=5,
    )
)
def test_encode_decode_round_trip(blobs):
    fp, out = ckpt.decode(ckpt.encode(blobs, FP))
    assert fp == FP and out.keys() == blobs.keys()
    for k, v in blobs.items():
        if isinstance(v, bytes):
            assert out[k] == v
        else:
            assert out[k].dtype == v.dtype and np.array_equal(out[k], v)


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    cfg = small_config(max_steps=15, dropout_rate=0.1)
    state, _ = train(cfg)
    path = tmp_path_factory.mktemp("ck") / "a.ckpt"
    save_checkpoint(state, path)
    return cfg, state, path


def test_save_load_save_is_byte_identical(trained, tmp_path):
    cfg, _, path = trained
    again = tmp_path / "b.ckpt"
    save_checkpoint(load_checkpoint(path, cfg), again)
    assert path.read_bytes() == again.read_bytes()


def test_load_without_config_uses_the_embedded_one(trained):
    cfg, state, path = trained
    loaded = load_checkpoint(path)
    assert loaded.config == cfg and loaded.i == state.i and loaded.mode == state.mode


@pytest.mark.parametrize("split", [5, 10, 13])
def test_resume_matches_uninterrupted_run(split, tmp_path):
    cfg = small_config(max_steps=30, dropout_rate=0.1, probe_interval=5, probe_size=16)
    full_state, full = train(cfg)

    first = Trainer(cfg)
    head = first.run(max_steps=split)
    save_checkpoint(first.state, tmp_path / "mid.ckpt")
    second = Trainer(cfg, state=load_checkpoint(tmp_path / "mid.ckpt", cfg))
    tail = second.run()

    assert [comparable(r) for r in head + tail] == [comparable(r) for r in full]
    a, b = state_blobs(full_state), state_blobs(second.state)
    assert a.keys() == b.keys()
    for k in a:
        assert (a[k] == b[k]) if isinstance(a[k], bytes) else np.array_equal(a[k], b[k]), k


def test_longer_horizon_keeps_the_fingerprint():
    cfg = small_config()
    assert cfg.fingerprint() == cfg.replace(max_steps=10_000, checkpoint_interval=7).fingerprint()
    assert cfg.fingerprint() != cfg.replace(lr=0.5).fingerprint()


def _mutated(path, tmp_path, fn):
    data = bytearray(path.read_bytes())
    out = tmp_path / "bad.ckpt"
    out.write_bytes(bytes(fn(data)))
    return out


@pytest.mark.parametrize(
    "damage, message",
    [
        (lambda d: d[: len(d) // 2], "digest|truncated"),
        (lambda d: d[:20], "truncated"),
        (lambda d: d[:100] + bytes([d[100] ^ 0xFF]) + d[101:], "digest"),
        (lambda d: b"NOTACKPT" + d[8:], "magic"),
        (lambda d: d[:8] + struct.pack("<H", 99) + d[10:], "version"),
        (lambda d: d + b"\x00", "digest"),
    ],
    ids=["half", "stub", "bitflip", "magic", "version", "trailing"],
)
def test_damaged_checkpoints_are_rejected(trained, tmp_path, damage, message):
    cfg, _, path = trained
    bad = _mutated(path, tmp_path, damage)
    with pytest.raises(ckpt.CheckpointError, match=message):
        load_checkpoint(bad, cfg)


def test_fingerprint_mismatch_is_rejected(trained):
    cfg, _, path = trained
    with pytest.raises(ckpt.CheckpointError, match="fingerprint"):
        load_checkpoint(path, cfg.replace(lr=0.5))


def test_missing_file_is_a_checkpoint_error(tmp_path):
    with pytest.raises(ckpt.CheckpointError):
        load_checkpoint(tmp_path / "nope.ckpt")


def test_interrupted_write_leaves_previous_file(trained, tmp_path, monkeypatch):
    _, state, path = trained
    target = tmp_path / "c.ckpt"
    target.write_bytes(path.read_bytes())

    def boom(*a, **k):
        raise OSError("disk full")

    monkeypatch.setattr(ckpt.os, "fsync", boom)
    with pytest.raises(OSError):
        save_checkpoint(state, target)
    assert target.read_bytes() == path.read_bytes()
