"""AdamW, the alternating noiser/encoder schedule, checkpoints and metrics."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from . import checkpoint as ckpt
from . import nn
from . import tensor as T
from .config import RunConfig
from .data import BatchStream, CorpusError, Vocabulary, load_corpus, make_batches, synth_corpus
from .mlm import Encoder, LossReport, MaskingParams, make_outcome, random_mask, run_encoder
from .noiser import TAGS, Noiser
from .sampling import temperature_at
from .tensor import ContractViolation, NumericFault, Tensor

log = logging.getLogger(__name__)

PRE_TRAINING_NOISING = "N"
PRE_TRAINING_ENCODING = "E"
METRICS_VERSION = 1

# Stream tags for np.random.default_rng([seed, step, tag]).
_TAG_NOISE = 1
_TAG_DROPOUT = 2
_TAG_INIT = 0x1417
_TAG_CORPUS = 0xDA7A
_TAG_PROBE = 0x9B0B
_TAG_EVAL = 0xE7A1


# -------------------------------------------------------------------- AdamW
class AdamW:
    """Adam with decoupled weight decay.

    Each step first shrinks every weight by ``1 - lr * weight_decay`` and then
    applies the bias-corrected Adam update.  Gradients are validated before
    anything is modified, so a non-finite gradient leaves the state intact.
    """

    def __init__(self, params: dict[str, Tensor], lr=1e-4, weight_decay=1e-2, betas=(0.9, 0.999), eps=1e-8):
        if lr <= 0 or weight_decay < 0 or not (0 <= betas[0] < 1 and 0 <= betas[1] < 1) or eps <= 0:
            raise ContractViolation("invalid AdamW hyperparameters")
        self.params = dict(params)
        self.lr = float(lr)
        self.weight_decay = float(weight_decay)
        self.betas = (float(betas[0]), float(betas[1]))
        self.eps = float(eps)
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, grads: dict[str, np.ndarray] | None = None) -> None:
        if grads is None:
            grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in self.params.items()}
        for k, p in self.params.items():
            g = grads[k]
            if g.shape != p.data.shape:
                raise ContractViolation(f"gradient shape {g.shape} != parameter shape {p.data.shape} for {k}")
            if not np.all(np.isfinite(g)):
                raise NumericFault(f"non-finite gradient for {k}; step aborted")
        b1, b2 = self.betas
        self.t += 1
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        decay = 1.0 - self.lr * self.weight_decay
        for k, p in self.params.items():
            g = grads[k].astype(p.data.dtype, copy=False)
            m = self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            v = self.v[k] = b2 * self.v[k] + (1.0 - b2) * (g * g)
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data * decay - self.lr * update).astype(p.data.dtype, copy=False)

    # State as plain arrays, for checkpoints.
    def state_blobs(self, prefix: str) -> dict[str, np.ndarray]:
        out = {f"{prefix}/t": np.array([self.t], dtype=np.int64)}
        for k in self.params:
            out[f"{prefix}/m/{k}"] = self.m[k]
            out[f"{prefix}/v/{k}"] = self.v[k]
        return out

    def load_blobs(self, prefix: str, blobs: dict) -> None:
        self.t = int(_blob(blobs, f"{prefix}/t")[0])
        for k, p in self.params.items():
            for name, store in (("m", self.m), ("v", self.v)):
                arr = _blob(blobs, f"{prefix}/{name}/{k}")
                if arr.shape != p.data.shape:
                    raise ckpt.CheckpointError(f"shape mismatch for {prefix}/{name}/{k}")
                store[k] = arr.astype(p.data.dtype)


def adamw_step(opt: AdamW, grads: dict[str, np.ndarray] | None = None) -> AdamW:
    """Functional spelling of :meth:`AdamW.step`."""
    opt.step(grads)
    return opt


def _blob(blobs: dict, name: str):
    if name not in blobs:
        raise ckpt.CheckpointError(f"checkpoint is missing blob {name!r}")
    return blobs[name]


# --------------------------------------------------------------- run state
@dataclass
class TrainState:
    config: RunConfig
    vocab: Vocabulary
    noiser: Noiser | None
    encoder: Encoder
    opt_noiser: AdamW | None
    opt_encoder: AdamW
    i: int = 1  # next step to run, 1-based
    mode: str = PRE_TRAINING_NOISING
    best_probe: float | None = None
    stale_probes: int = 0
    stopped: bool = False

    @property
    def steps_done(self) -> int:
        return self.i - 1

    @property
    def seed(self) -> int:
        return self.config.seed

    def step_rng(self, tag: int, step: int | None = None) -> np.random.Generator:
        return np.random.default_rng([self.config.seed, self.i if step is None else step, tag])


def masking_params(cfg: RunConfig, step: int) -> MaskingParams:
    t = temperature_at(step, cfg.temperature, cfg.temperature_final, cfg.anneal_steps)
    return MaskingParams(cfg.rho_adv, cfg.rho_rand, t, cfg.exact_budget, cfg.baseline_rate)


def build_models(cfg: RunConfig, vocab: Vocabulary):
    rng_noiser, rng_encoder = np.random.default_rng([cfg.seed, _TAG_INIT]).spawn(2)
    noiser = None
    if cfg.adversarial:
        gcfg = nn.GruConfig(cfg.noiser_layers, cfg.noiser_embed_dim, cfg.noiser_hidden_dim, cfg.noiser_bidirectional)
        noiser = Noiser(vocab, gcfg, rng_noiser)
    tcfg = nn.TransformerConfig(
        cfg.encoder_layers, cfg.encoder_heads, cfg.encoder_model_dim, cfg.encoder_ff_dim, cfg.encoder_max_seq_len, cfg.dropout_rate
    )
    return noiser, Encoder(vocab, tcfg, rng_encoder)


def init_state(cfg: RunConfig) -> TrainState:
    vocab = Vocabulary(cfg.alphabet)
    noiser, encoder = build_models(cfg, vocab)
    opt_n = None
    if noiser is not None:
        opt_n = AdamW(noiser.named_parameters(), cfg.effective_noiser_lr, cfg.weight_decay)
    opt_e = AdamW(encoder.named_parameters(), cfg.lr, cfg.weight_decay)
    mode = PRE_TRAINING_NOISING if noiser is not None else PRE_TRAINING_ENCODING
    return TrainState(cfg, vocab, noiser, encoder, opt_n, opt_e, mode=mode)


# ------------------------------------------------------------ update steps
def update_noiser(state: TrainState, batch, params: MaskingParams | None = None) -> LossReport:
    """One ascent step on the noiser; the encoder is frozen and runs without dropout."""
    if state.mode != PRE_TRAINING_NOISING:
        raise ContractViolation("update_noiser called outside noising mode")
    if state.noiser is None:
        raise ContractViolation("baseline runs have no noiser")
    params = params or masking_params(state.config, state.i)
    state.encoder.requires_grad_(False)
    try:
        state.opt_noiser.zero_grad()
        report = run_encoder(
            state.noiser, state.encoder, batch.tokens, batch.valid_tokens_mask, "adversarial",
            state.step_rng(_TAG_NOISE), params,
        )
        if not report.degenerate and report.total_loss.requires_grad:
            (-report.total_loss).backward()
            state.opt_noiser.step()
    finally:
        state.encoder.requires_grad_(True)
    return report


def update_encoder(state: TrainState, batch, params: MaskingParams | None = None, masking: str | None = None) -> LossReport:
    """One descent step on the encoder; the noiser samples without building a graph.

    ``masking`` defaults to ``adversarial`` when a noiser exists and to
    ``random`` at ``baseline_rate`` otherwise.
    """
    if state.mode != PRE_TRAINING_ENCODING:
        raise ContractViolation("update_encoder called outside encoding mode")
    params = params or masking_params(state.config, state.i)
    masking = masking or ("adversarial" if state.noiser is not None else "random")
    state.opt_encoder.zero_grad()
    outcome = None
    if masking != "random":
        with T.no_grad():
            outcome = make_outcome(
                state.noiser, batch.tokens, batch.valid_tokens_mask, masking, params, state.step_rng(_TAG_NOISE)
            )
    if outcome is None:
        report = run_encoder(
            None, state.encoder, batch.tokens, batch.valid_tokens_mask, "random", state.step_rng(_TAG_NOISE), params,
            dropout_rng=state.step_rng(_TAG_DROPOUT),
        )
    else:
        report = run_encoder(
            None, state.encoder, batch.tokens, batch.valid_tokens_mask, "outcome", None, params,
            outcome=outcome, dropout_rng=state.step_rng(_TAG_DROPOUT),
        )
    if not report.degenerate:
        report.total_loss.backward()
        state.opt_encoder.step()
    return report


# ---------------------------------------------------------------- corpora
def build_corpus(cfg: RunConfig) -> tuple[list[str], list[str]]:
    """Training sequences and held-out probe sequences for ``cfg``."""
    want_probe = cfg.probe_interval > 0 and cfg.probe_size > 0
    if cfg.synth_kind is not None:
        spec = {
            "kind": cfg.synth_kind, "num_sequences": cfg.synth_num_sequences, "min_len": cfg.synth_min_len,
            "max_len": cfg.synth_max_len, "pattern": cfg.synth_pattern, "order": cfg.synth_order,
            "concentration": cfg.synth_concentration, "chain_seed": cfg.synth_chain_seed,
        }
        train = synth_corpus(spec, np.random.default_rng([cfg.seed, _TAG_CORPUS]), cfg.alphabet)
        probe = []
        if want_probe:
            probe = synth_corpus({**spec, "num_sequences": cfg.probe_size}, np.random.default_rng([cfg.seed, _TAG_PROBE]), cfg.alphabet)
        return train, probe
    seqs = load_corpus(cfg.corpus_path, cfg.corpus_format)
    if not want_probe:
        return seqs, []
    if len(seqs) <= cfg.probe_size:
        raise CorpusError(f"corpus has {len(seqs)} sequences; cannot hold out a probe of {cfg.probe_size}")
    order = np.random.default_rng([cfg.seed, _TAG_PROBE]).permutation(len(seqs))
    held = set(order[: cfg.probe_size].tolist())
    return [s for j, s in enumerate(seqs) if j not in held], [seqs[j] for j in sorted(held)]


class Probe:
    """Held-out sequences with random masks drawn once and reused at every evaluation."""

    def __init__(self, sequences: list[str], vocab: Vocabulary, cfg: RunConfig):
        self.batches = make_batches(sequences, vocab, cfg.max_len, cfg.batch_size)
        self.outcomes = [
            random_mask(b.tokens, b.valid_tokens_mask, cfg.baseline_rate, np.random.default_rng([cfg.seed, _TAG_PROBE, k]), vocab)
            for k, b in enumerate(self.batches)
        ]

    def loss(self, encoder: Encoder) -> float:
        total, count = 0.0, 0
        with T.no_grad():
            for b, o in zip(self.batches, self.outcomes):
                rep = run_encoder(None, encoder, b.tokens, b.valid_tokens_mask, "outcome", None, outcome=o)
                total += rep.loss * rep.scored_count
                count += rep.scored_count
        return total / max(count, 1)


# --------------------------------------------------------------- metrics
def metrics_record(state: TrainState, step: int, mode: str, report: LossReport, temperature: float, valid: int, started: float) -> dict:
    hist = {tag: int(report.histogram.get(tag, 0)) for tag in TAGS if tag != "none"}
    return {
        "v": METRICS_VERSION,
        "step": step,
        "mode": mode,
        "mlm_loss": float(report.loss),
        "masked_accuracy": float(report.masked_accuracy),
        "adv_loss": report.adv_loss,
        "rand_loss": report.rand_loss,
        "scored": int(report.scored_count),
        "valid": int(valid),
        "hist": hist,
        "temperature": float(temperature),
        "wall_clock": round(time.perf_counter() - started, 6),
    }


def comparable(record: dict) -> dict:
    """A record without its timing field, for determinism comparisons."""
    return {k: v for k, v in record.items() if k != "wall_clock"}


# ------------------------------------------------------------ checkpoints
def _state_json(state: TrainState) -> bytes:
    body = {"i": state.i, "mode": state.mode, "best_probe": state.best_probe, "stale_probes": state.stale_probes, "stopped": state.stopped}
    return json.dumps(body, sort_keys=True).encode("utf-8")


def state_blobs(state: TrainState) -> dict:
    blobs: dict = {"config": state.config.canonical_text().encode("utf-8"), "state": _state_json(state)}
    if state.noiser is not None:
        blobs.update({f"theta/{k}": p.data for k, p in state.noiser.named_parameters().items()})
        blobs.update(state.opt_noiser.state_blobs("opt_noiser"))
    blobs.update({f"phi/{k}": p.data for k, p in state.encoder.named_parameters().items()})
    blobs.update(state.opt_encoder.state_blobs("opt_encoder"))
    return blobs


def save_checkpoint(state: TrainState, path) -> None:
    ckpt.write(path, state_blobs(state), state.config.fingerprint())


def load_checkpoint(path, config: RunConfig | None = None) -> TrainState:
    """Rebuild a :class:`TrainState` from ``path``.

    With ``config`` the stored fingerprint must match it; otherwise the
    config embedded in the file is used.
    """
    from .config import ConfigError, config_from_text

    fingerprint, blobs = ckpt.read(path, config.fingerprint() if config is not None else None)
    if config is None:
        try:
            config = config_from_text(_blob(blobs, "config").decode("utf-8"))
        except (ConfigError, ValueError) as exc:
            raise ckpt.CheckpointError(f"embedded config is invalid: {exc}") from None
        if config.fingerprint() != fingerprint:
            raise ckpt.CheckpointError("embedded config does not match the checkpoint fingerprint")
    state = init_state(config)
    for prefix, module in (("theta", state.noiser), ("phi", state.encoder)):
        if module is None:
            continue
        for k, p in module.named_parameters().items():
            arr = _blob(blobs, f"{prefix}/{k}")
            if arr.shape != p.data.shape:
                raise ckpt.CheckpointError(f"shape mismatch for {prefix}/{k}")
            p.data = arr.astype(p.data.dtype)
    if state.opt_noiser is not None:
        state.opt_noiser.load_blobs("opt_noiser", blobs)
    state.opt_encoder.load_blobs("opt_encoder", blobs)
    info = json.loads(_blob(blobs, "state").decode("utf-8"))
    state.i, state.mode = int(info["i"]), info["mode"]
    state.best_probe, state.stale_probes, state.stopped = info["best_probe"], int(info["stale_probes"]), bool(info["stopped"])
    return state


def checkpoint_name(step: int) -> str:
    return f"step_{step:08d}.ckpt"


def latest_checkpoint(directory) -> Path | None:
    found = sorted(Path(directory).glob("step_*.ckpt"))
    return found[-1] if found else None


# ------------------------------------------------------------------ loop
class Trainer:
    """Drives the alternating schedule for one run.

    Steps are 1-based.  The first ``warmup_encoder_steps`` steps train the
    encoder alone under random masking; after that the noiser and encoder
    alternate, flipping mode whenever the (warmup-adjusted) step index is a
    multiple of ``n_noiser`` (while noising) or ``n_encoder`` (while encoding).
    All randomness for step ``i`` is derived from ``(seed, i)``, so a run
    resumed from a checkpoint replays exactly.
    """

    def __init__(self, config: RunConfig, corpus: list[str] | None = None, probe: list[str] | None = None, state: TrainState | None = None):
        self.config = config
        if corpus is None:
            corpus, built_probe = build_corpus(config)
            probe = built_probe if probe is None else probe
        if not corpus:
            raise CorpusError("corpus is empty; refusing to start")
        self.state = state or init_state(config)
        self.stream = BatchStream(corpus, self.state.vocab, config.batch_size, config.max_len, config.seed)
        self.probe = Probe(probe, self.state.vocab, config) if probe and config.probe_interval > 0 else None

    def _warmup(self, step: int) -> bool:
        return self.state.noiser is not None and step <= self.config.warmup_encoder_steps

    def step(self, started: float | None = None) -> dict:
        """Run step ``state.i`` and return its metrics record."""
        state, cfg = self.state, self.config
        started = time.perf_counter() if started is None else started
        i = state.i
        batch = self.stream.get_batch(i)
        params = masking_params(cfg, i)
        if self._warmup(i):
            state.mode = PRE_TRAINING_ENCODING
            report = update_encoder(state, batch, params, masking="random")
            mode = PRE_TRAINING_ENCODING
            if i == cfg.warmup_encoder_steps:
                state.mode = PRE_TRAINING_NOISING
        elif state.noiser is None:
            report = update_encoder(state, batch, params)
            mode = PRE_TRAINING_ENCODING
        else:
            k = i - cfg.warmup_encoder_steps
            mode = state.mode
            if mode == PRE_TRAINING_NOISING:
                report = update_noiser(state, batch, params)
                if k % cfg.n_noiser == 0:
                    state.mode = PRE_TRAINING_ENCODING
            else:
                report = update_encoder(state, batch, params)
                if k % cfg.n_encoder == 0:
                    state.mode = PRE_TRAINING_NOISING
        record = metrics_record(state, i, mode, report, params.temperature, int(batch.valid_tokens_mask.sum()), started)
        state.i += 1
        if self.probe is not None and i % cfg.probe_interval == 0:
            record["probe_loss"] = self._probe_update()
        return record

    def _probe_update(self) -> float:
        state = self.state
        value = self.probe.loss(state.encoder)
        if state.best_probe is None or value < state.best_probe - 1e-4:
            state.best_probe, state.stale_probes = value, 0
        else:
            state.stale_probes += 1
            if self.config.early_stop_patience and state.stale_probes >= self.config.early_stop_patience:
                state.stopped = True
        return value

    def run(
        self,
        max_steps: int | None = None,
        on_record: Callable[[dict], None] | None = None,
        checkpoint_dir=None,
    ) -> list[dict]:
        cfg, state = self.config, self.state
        horizon = cfg.max_steps if max_steps is None else max_steps
        records = []
        started = time.perf_counter()
        while state.i <= horizon and not state.stopped:
            record = self.step(started)
            records.append(record)
            if on_record is not None:
                on_record(record)
            done = record["step"]
            if checkpoint_dir is not None and cfg.checkpoint_interval and done % cfg.checkpoint_interval == 0:
                save_checkpoint(state, Path(checkpoint_dir) / checkpoint_name(done))
        if state.stopped:
            log.info("early stop at step %d: probe loss has not improved for %d evaluations", state.steps_done, state.stale_probes)
        if checkpoint_dir is not None and records and (records[-1]["step"] % max(cfg.checkpoint_interval, 1) or not cfg.checkpoint_interval):
            save_checkpoint(state, Path(checkpoint_dir) / checkpoint_name(records[-1]["step"]))
        return records


def train(config: RunConfig, corpus: list[str] | None = None, probe: list[str] | None = None, **run_kwargs) -> tuple[TrainState, list[dict]]:
    trainer = Trainer(config, corpus, probe)
    records = trainer.run(**run_kwargs)
    return trainer.state, records


# -------------------------------------------------------------- evaluation
def evaluate(
    state: TrainState,
    sequences: Iterable[str],
    masking: str = "both",
    seed: int | None = None,
    batch_size: int | None = None,
) -> dict:
    """Frozen-parameter evaluation at 20% total masking by default.

    ``random`` masks at ``baseline_rate``; ``adversarial`` lets the noiser
    choose ``rho_adv + rho_rand`` of the tokens with no random overlay, so
    both conditions mask the same share.  ``both`` adds the gap.
    """
    if masking not in ("random", "adversarial", "both"):
        raise ContractViolation(f"unknown masking {masking!r}")
    cfg = state.config
    seed = cfg.seed if seed is None else seed
    sequences = list(sequences)
    if not sequences:
        raise CorpusError("evaluation corpus is empty")
    batches = make_batches(sequences, state.vocab, cfg.max_len, batch_size or cfg.batch_size)
    wanted = ("random", "adversarial") if masking == "both" else (masking,)
    if "adversarial" in wanted and state.noiser is None:
        raise ContractViolation("adversarial evaluation needs a checkpoint with a noiser")
    report: dict = {"sequences": len(sequences)}
    for kind in wanted:
        params = MaskingParams(cfg.rho_adv + cfg.rho_rand, 0.0, cfg.temperature, cfg.exact_budget, cfg.baseline_rate)
        total, correct, count, valid = 0.0, 0.0, 0, 0
        hist = {tag: 0 for tag in TAGS if tag != "none"}
        with T.no_grad():
            for b_idx, b in enumerate(batches):
                rng = np.random.default_rng([seed, _TAG_EVAL, b_idx])
                mode = "random" if kind == "random" else "adversarial_only"
                rep = run_encoder(state.noiser, state.encoder, b.tokens, b.valid_tokens_mask, mode, rng, params)
                total += rep.loss * rep.scored_count
                correct += rep.masked_accuracy * rep.scored_count
                count += rep.scored_count
                valid += int(b.valid_tokens_mask.sum())
                for tag, c in rep.histogram.items():
                    hist[tag] += c
        report[kind] = {
            "loss": total / max(count, 1),
            "masked_accuracy": correct / max(count, 1),
            "scored": count,
            "masked_fraction": count / max(valid, 1),
            "hist": hist,
        }
    if masking == "both":
        gap = report["adversarial"]["loss"] - report["random"]["loss"]
        report["gap"] = gap
        report["relative_gap"] = gap / report["random"]["loss"] if report["random"]["loss"] > 0 else math.nan
    return report


def inspect_masks(state: TrainState, sequences: list[str], seed: int | None = None) -> list[dict]:
    """Per-sequence any-mask probabilities and sampled decisions from the noiser."""
    if state.noiser is None:
        raise ContractViolation("mask inspection needs a checkpoint with a noiser")
    cfg = state.config
    seed = cfg.seed if seed is None else seed
    out = []
    params = MaskingParams(cfg.rho_adv, 0.0, cfg.temperature, cfg.exact_budget, cfg.baseline_rate)
    for b_idx, b in enumerate(make_batches(sequences, state.vocab, cfg.max_len, cfg.batch_size)):
        with T.no_grad():
            o = make_outcome(state.noiser, b.tokens, b.valid_tokens_mask, "adversarial_only", params, np.random.default_rng([seed, _TAG_EVAL, b_idx]))
        for r in range(b.tokens.shape[0]):
            sel = b.valid_tokens_mask[r] > 0
            idx = np.flatnonzero(sel)
            out.append(
                {
                    "v": METRICS_VERSION,
                    "index": len(out),
                    "tokens": state.vocab.decode(b.tokens[r, idx]),
                    "any_mask_prob": [round(min(max(float(x), 0.0), 1.0), 6) for x in o.any_mask_prob[r, idx]],
                    "masked": [int(x) for x in o.loss_positions[r, idx]],
                    "kind": [TAGS[int(x)] for x in o.provenance[r, idx]],
                }
            )
    return out
