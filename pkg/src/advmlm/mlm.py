"""Masked-language-model objective and the encoder forward pass."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import nn
from . import tensor as T
from .data import Vocabulary
from .noiser import (
    ADV_KEEP,
    ADV_MASK,
    ADV_REPLACE,
    RAND_KEEP,
    RAND_MASK,
    RAND_REPLACE,
    NoiseOutcome,
    Noiser,
    compose_random,
    mask_type_histogram,
    one_hot_tokens,
    run_noiser,
)
from .tensor import ContractViolation, Tensor

log = logging.getLogger(__name__)

MODES = ("adversarial", "adversarial_only", "random", "outcome")


def random_mask(
    tokens: np.ndarray,
    valid_tokens_mask,
    rate: float,
    rng: np.random.Generator,
    vocab: Vocabulary,
    exclude=None,
) -> NoiseOutcome:
    """Classical MLM masking: each valid token is picked with probability ``rate``;
    picked tokens become [MASK] / stay / get a uniform content token in 80:10:10.

    ``exclude`` marks positions that must not be picked.
    """
    if not 0.0 < rate < 1.0:
        raise ContractViolation("random masking rate must lie in (0, 1)")
    tokens = np.asarray(tokens)
    eligible = np.asarray(valid_tokens_mask) > 0
    if exclude is not None:
        eligible &= ~np.asarray(exclude, dtype=bool)
    u_pick, u_kind = rng.random(tokens.shape), rng.random(tokens.shape)
    replacement = rng.integers(vocab.v_idx, vocab.size, size=tokens.shape)
    picked = eligible & (u_pick < rate)
    as_mask = picked & (u_kind < 0.8)
    as_keep = picked & (u_kind >= 0.8) & (u_kind < 0.9)
    as_replace = picked & (u_kind >= 0.9)

    noised = np.where(as_mask, vocab.mask_id, np.where(as_replace, replacement, tokens))
    provenance = np.zeros(tokens.shape, dtype=np.int8)
    provenance[as_mask] = RAND_MASK
    provenance[as_keep] = RAND_KEEP
    provenance[as_replace] = RAND_REPLACE
    return NoiseOutcome(
        x_tilde=one_hot_tokens(noised, vocab.size),
        loss_positions=picked.astype(np.int8),
        provenance=provenance,
    )


class Encoder(nn.Module):
    """Soft-one-hot embedding -> transformer -> MLM head."""

    def __init__(self, vocab: Vocabulary, cfg: nn.TransformerConfig, rng: np.random.Generator):
        self.vocab = vocab
        self.cfg = cfg
        self.embed = nn.Embedding(vocab.size, cfg.model_dim, rng)
        self.transformer = nn.TransformerEncoder(cfg, rng)
        self.head = nn.MLMHead(cfg.model_dim, vocab.size, rng)

    def __call__(self, x_tilde: Tensor, valid_tokens_mask, rng=None) -> Tensor:
        h = self.transformer(self.embed(x_tilde), valid_tokens_mask, rng)
        return self.head(h)


@dataclass
class LossReport:
    total_loss: Tensor
    per_position_nll: np.ndarray
    masked_accuracy: float
    scored_count: int
    degenerate: bool = False
    adv_loss: float | None = None
    rand_loss: float | None = None
    histogram: dict = field(default_factory=dict)
    outcome: NoiseOutcome | None = None

    @property
    def loss(self) -> float:
        return float(self.total_loss.data)


def _mean_at(nll: np.ndarray, sel: np.ndarray) -> float | None:
    return float(nll[sel].mean()) if sel.any() else None


def mlm_loss(logits: Tensor, targets: np.ndarray, outcome: NoiseOutcome) -> LossReport:
    """Mean cross-entropy over the outcome's loss positions.

    Positions outside ``loss_positions`` have weight exactly zero.  The
    weights may carry gradient (adversarial positions); the forward value
    is unaffected.
    """
    V = logits.shape[-1]
    targets = np.asarray(targets)
    logp = T.log_softmax(logits, dim=-1)
    nll = -(logp * one_hot_tokens(targets, V, logits.dtype)).sum(axis=-1)
    weights = outcome.weights()
    sel = outcome.loss_positions.astype(bool)
    count = int(sel.sum())
    if count == 0:
        log.warning("batch has no scored positions; loss defined as 0")
        zero = Tensor._wrap(np.zeros((), dtype=logits.dtype))
        return LossReport(zero, nll.data * 0, 0.0, 0, degenerate=True, histogram=mask_type_histogram(outcome), outcome=outcome)
    total = (nll * weights).sum() / weights.sum()
    pred = logits.data.argmax(axis=-1)
    acc = float((pred[sel] == targets[sel]).mean())
    prov = outcome.provenance
    adv = np.isin(prov, (ADV_MASK, ADV_KEEP, ADV_REPLACE))
    rnd = np.isin(prov, (RAND_MASK, RAND_KEEP, RAND_REPLACE))
    per_pos = np.where(sel, nll.data, 0.0)
    return LossReport(
        total_loss=total,
        per_position_nll=per_pos,
        masked_accuracy=acc,
        scored_count=count,
        adv_loss=_mean_at(nll.data, adv),
        rand_loss=_mean_at(nll.data, rnd),
        histogram=mask_type_histogram(outcome),
        outcome=outcome,
    )


@dataclass(frozen=True)
class MaskingParams:
    rho_adv: float = 0.10
    rho_rand: float = 0.10
    temperature: float = 1.0
    exact_budget: bool = True
    baseline_rate: float = 0.20


def make_outcome(
    noiser: Noiser | None,
    tokens: np.ndarray,
    valid_tokens_mask,
    mode: str,
    params: MaskingParams,
    rng: np.random.Generator,
) -> NoiseOutcome:
    """Noise a batch according to ``mode``.

    ``adversarial`` draws the adversary's budget first, then random masks at
    ``rho_rand / (1 - rho_adv)`` over the remaining valid tokens (so the
    random share is ``rho_rand`` of all valid tokens in expectation).
    ``adversarial_only`` skips the random overlay.
    """
    noise_rng, rand_rng = rng.spawn(2)
    if noiser is None:
        raise ContractViolation(f"mode {mode!r} requires a noiser")
    adv = run_noiser(
        noiser, tokens, valid_tokens_mask, params.rho_adv, params.temperature, noise_rng, params.exact_budget
    )
    if mode == "adversarial_only":
        return adv
    if mode != "adversarial":
        raise ContractViolation(f"unknown masking mode {mode!r}")
    if params.rho_rand <= 0:
        return adv
    rate = params.rho_rand / (1.0 - params.rho_adv)
    rand = random_mask(tokens, valid_tokens_mask, rate, rand_rng, noiser.vocab, exclude=adv.loss_positions)
    return compose_random(adv, tokens, valid_tokens_mask, rand)


def run_encoder(
    noiser: Noiser | None,
    encoder: Encoder,
    tokens: np.ndarray,
    valid_tokens_mask,
    mode: str,
    rng: np.random.Generator,
    params: MaskingParams = MaskingParams(),
    outcome: NoiseOutcome | None = None,
    dropout_rng: np.random.Generator | None = None,
) -> LossReport:
    """Noise the batch, reconstruct it with the encoder and score the loss positions."""
    if mode not in MODES:
        raise ContractViolation(f"unknown masking mode {mode!r}")
    if mode == "outcome":
        if outcome is None:
            raise ContractViolation("mode 'outcome' needs an outcome")
    elif mode == "random":
        outcome = random_mask(tokens, valid_tokens_mask, params.baseline_rate, rng, encoder.vocab)
    else:
        outcome = make_outcome(noiser, tokens, valid_tokens_mask, mode, params, rng)
    logits = encoder(outcome.x_tilde, valid_tokens_mask, dropout_rng)
    return mlm_loss(logits, tokens, outcome)
