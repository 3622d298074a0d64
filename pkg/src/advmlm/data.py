"""Vocabulary, corpus ingestion, synthetic corpora and batch assembly."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

CONTROL_TOKENS = ("[PAD]", "[MASK]", "[CLS]", "[SEP]", "[UNK]")
AMINO_ACIDS = "ABCDEFGHIKLMNOPQRSTUVWXYZ"


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class Vocabulary:
    """Control tokens at ids 0..4, content tokens from ``v_idx`` upward."""

    alphabet: str = AMINO_ACIDS
    control: tuple[str, ...] = CONTROL_TOKENS
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if len(set(self.alphabet)) != len(self.alphabet):
            raise CorpusError("alphabet has duplicate symbols")
        index = {tok: i for i, tok in enumerate(self.control)}
        for i, ch in enumerate(self.alphabet):
            index[ch] = self.v_idx + i
        object.__setattr__(self, "_index", index)

    @property
    def pad_id(self) -> int:
        return self.control.index("[PAD]")

    @property
    def mask_id(self) -> int:
        return self.control.index("[MASK]")

    @property
    def cls_id(self) -> int:
        return self.control.index("[CLS]")

    @property
    def sep_id(self) -> int:
        return self.control.index("[SEP]")

    @property
    def unk_id(self) -> int:
        return self.control.index("[UNK]")

    @property
    def v_idx(self) -> int:
        return len(self.control)

    @property
    def size(self) -> int:
        return len(self.control) + len(self.alphabet)

    @property
    def content_size(self) -> int:
        return len(self.alphabet)

    def __len__(self) -> int:
        return self.size

    def token_to_id(self, token: str) -> int:
        return self._index.get(token, self.unk_id)

    def id_to_token(self, idx: int) -> str:
        if idx < self.v_idx:
            return self.control[idx]
        return self.alphabet[idx - self.v_idx]

    def encode(self, seq: str) -> list[int]:
        return [self._index.get(ch, self.unk_id) for ch in seq]

    def decode(self, ids) -> str:
        return "".join(self.id_to_token(int(i)) for i in ids)


# ------------------------------------------------------------------ corpora
def read_corpus(path, fmt: str = "fasta") -> tuple[list[str], int]:
    """Parse ``path`` and return ``(sequences, dropped_empty_count)``."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise CorpusError(f"cannot read corpus file {path}: {exc.strerror}") from exc
    lines = text.replace("\r\n", "\n").replace("\r", "\n").split("\n")

    raw: list[str] = []
    if fmt == "fasta":
        current: list[str] | None = None
        for line in lines:
            line = line.strip()
            if line.startswith(">"):
                if current is not None:
                    raw.append("".join(current))
                current = []
            elif line:
                if current is None:
                    raise CorpusError(f"{path}: sequence data before first '>' header")
                current.append(line)
        if current is not None:
            raw.append("".join(current))
    elif fmt == "lines":
        raw = [line.strip() for line in lines]
        while raw and not raw[-1]:
            raw.pop()
    else:
        raise CorpusError(f"unknown corpus format {fmt!r}")

    seqs = [s.upper() for s in raw if s]
    dropped = len(raw) - len(seqs)
    if not seqs:
        raise CorpusError(f"{path}: no usable sequences")
    return seqs, dropped


def load_corpus(path, fmt: str = "fasta") -> list[str]:
    seqs, dropped = read_corpus(path, fmt)
    if dropped:
        log.warning("dropped %d empty sequences from %s", dropped, path)
    return seqs


def markov_transitions(n_symbols: int, order: int, concentration: float, seed: int) -> np.ndarray:
    """Random transition tensor of shape [n_symbols]*order + [n_symbols] with Dirichlet rows."""
    rng = np.random.default_rng(seed)
    rows = rng.dirichlet(np.full(n_symbols, concentration), size=n_symbols**order)
    return rows.reshape((n_symbols,) * order + (n_symbols,))


def template_predictable(pattern: str, length: int) -> np.ndarray:
    """Boolean per position: True where the token is recoverable from a neighbour.

    ``s`` slots follow their predecessor; the ``r`` slot right before an
    ``s`` is recoverable from it.  Everything else is noise.
    """
    slots = [pattern[i % len(pattern)] for i in range(length)]
    out = np.zeros(length, dtype=bool)
    for i, c in enumerate(slots):
        if c == "s" and i > 0:
            out[i] = True
            out[i - 1] = True
    return out


def synth_corpus(spec: dict, rng: np.random.Generator, alphabet: str = AMINO_ACIDS) -> list[str]:
    """Generate a synthetic corpus.

    ``spec["kind"]`` is one of:

    * ``uniform`` - i.i.d. uniform symbols.
    * ``markov`` - order-``k`` chain; the transition tensor is either given
      as ``transitions`` or drawn from ``Dirichlet(concentration)`` with
      ``chain_seed`` so that several corpora can share one chain.
    * ``template`` - repeats ``pattern`` over the sequence: ``r``/``u`` slots
      are uniform, an ``s`` slot is the successor (cyclic, in alphabet
      order) of the previous symbol.

    Common keys: ``num_sequences``, ``min_len``, ``max_len``.
    """
    kind = spec.get("kind")
    try:
        n = int(spec.get("num_sequences", 1000))
        lo = int(spec.get("min_len", 20))
        hi = int(spec.get("max_len", lo))
    except (TypeError, ValueError) as exc:
        raise CorpusError(f"invalid synthetic corpus spec: {exc}") from None
    if n <= 0 or lo <= 0 or hi < lo:
        raise CorpusError("synthetic corpus needs num_sequences > 0 and 0 < min_len <= max_len")
    A = len(alphabet)
    letters = np.array(list(alphabet))
    lengths = rng.integers(lo, hi + 1, size=n)

    if kind == "uniform":
        return ["".join(letters[rng.integers(0, A, size=L)]) for L in lengths]

    if kind == "markov":
        order = int(spec.get("order", 1))
        if order < 1:
            raise CorpusError("markov order must be >= 1")
        if "transitions" in spec:
            P = np.asarray(spec["transitions"], dtype=float)
            if P.shape != (A,) * order + (A,) or not np.allclose(P.sum(-1), 1.0):
                raise CorpusError("markov transitions must be row-stochastic with shape [A]*k+[A]")
        else:
            P = markov_transitions(A, order, float(spec.get("concentration", 0.1)), int(spec.get("chain_seed", 0)))
        cdf = np.cumsum(P.reshape(-1, A), axis=-1)
        out = []
        for L in lengths:
            seq = list(rng.integers(0, A, size=min(order, L)))
            for _ in range(L - len(seq)):
                ctx = 0
                for s in seq[-order:]:
                    ctx = ctx * A + s
                u = rng.random()
                seq.append(min(int(np.searchsorted(cdf[ctx], u, side="right")), A - 1))
            out.append("".join(letters[seq]))
        return out

    if kind == "template":
        pattern = spec.get("pattern", "rs")
        if not pattern or set(pattern) - set("rsu") or pattern[0] == "s":
            raise CorpusError("template pattern uses r/s/u and cannot start with 's'")
        out = []
        for L in lengths:
            draws = rng.integers(0, A, size=L)
            seq = np.empty(L, dtype=np.int64)
            for i in range(L):
                slot = pattern[i % len(pattern)]
                seq[i] = (seq[i - 1] + 1) % A if slot == "s" else draws[i]
            out.append("".join(letters[seq]))
        return out

    raise CorpusError(f"unknown synthetic corpus kind {kind!r}")


# ------------------------------------------------------------------ batches
@dataclass
class Batch:
    tokens: np.ndarray  # int64 [batch, seq]
    valid_tokens_mask: np.ndarray  # float [batch, seq], content positions only
    seq_lens: np.ndarray  # int64 [batch]
    truncated: int = 0

    @property
    def shape(self) -> tuple[int, int]:
        return self.tokens.shape


def make_batch(sequences, vocab: Vocabulary, max_len: int) -> Batch:
    """Frame each sequence as ``[CLS] seq [SEP]`` and right-pad to ``max_len``.

    Content longer than ``max_len - 2`` is truncated.
    """
    if max_len < 3:
        raise CorpusError("max_len must leave room for [CLS] and [SEP]")
    rows = len(sequences)
    tokens = np.full((rows, max_len), vocab.pad_id, dtype=np.int64)
    valid = np.zeros((rows, max_len), dtype=np.float64)
    truncated = 0
    for r, seq in enumerate(sequences):
        ids = vocab.encode(seq) if isinstance(seq, str) else list(seq)
        if len(ids) > max_len - 2:
            ids = ids[: max_len - 2]
            truncated += 1
        tokens[r, 0] = vocab.cls_id
        tokens[r, 1 : 1 + len(ids)] = ids
        tokens[r, 1 + len(ids)] = vocab.sep_id
        valid[r, 1 : 1 + len(ids)] = 1.0
    if truncated:
        log.info("truncated %d sequences to %d content tokens", truncated, max_len - 2)
    return Batch(tokens, valid, valid.sum(axis=1).astype(np.int64), truncated)


def make_batches(sequences, vocab: Vocabulary, max_len: int, batch_size: int) -> list[Batch]:
    return [make_batch(sequences[i : i + batch_size], vocab, max_len) for i in range(0, len(sequences), batch_size)]


class BatchStream:
    """Deterministic ``get_batch(i)``: epochs over a reshuffled corpus.

    Step ``i`` is 1-based; the shuffle of epoch ``e`` depends only on
    ``(seed, e)``, so any step can be reproduced without replaying earlier ones.
    """

    def __init__(self, sequences, vocab: Vocabulary, batch_size: int, max_len: int, seed: int):
        if not sequences:
            raise CorpusError("corpus is empty")
        self.sequences = list(sequences)
        self.vocab = vocab
        self.batch_size = batch_size
        self.max_len = max_len
        self.seed = seed
        self.per_epoch = math.ceil(len(self.sequences) / batch_size)
        self._order_cache: tuple[int, np.ndarray] | None = None

    def _order(self, epoch: int) -> np.ndarray:
        if self._order_cache is None or self._order_cache[0] != epoch:
            rng = np.random.default_rng([self.seed, 0x5EED, epoch])
            self._order_cache = (epoch, rng.permutation(len(self.sequences)))
        return self._order_cache[1]

    def get_batch(self, i: int) -> Batch:
        epoch, slot = divmod(i - 1, self.per_epoch)
        idx = self._order(epoch)[slot * self.batch_size : (slot + 1) * self.batch_size]
        return make_batch([self.sequences[j] for j in idx], self.vocab, self.max_len)
