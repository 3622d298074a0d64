"""The adversarial masker: GRU scorer + budgeted samplers -> noised input."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from . import nn
from . import tensor as T
from .data import Vocabulary
from .sampling import (
    CHANNEL_KEEP,
    CHANNEL_MASK,
    EPSILON,
    gumbel_noise,
    rss_hard,
    rss_sampler,
    straight_through_parts,
    subset_sizes,
)
from .tensor import ContractViolation, Tensor

# Provenance tags, indexed by the codes stored in NoiseOutcome.provenance.
TAGS = ("none", "adv_mask", "adv_keep", "adv_replace", "rand_mask", "rand_keep", "rand_replace")
NONE, ADV_MASK, ADV_KEEP, ADV_REPLACE, RAND_MASK, RAND_KEEP, RAND_REPLACE = range(len(TAGS))


@dataclass
class MaskScores:
    any_mask: Tensor  # [B, S]
    mask_options: Tensor  # [B, S, 2 + V_content]


@dataclass
class NoiseOutcome:
    x_tilde: Tensor  # [B, S, V]
    loss_positions: np.ndarray  # [B, S] 0/1
    provenance: np.ndarray  # [B, S] int8 codes into TAGS
    loss_weights: Tensor | None = None  # forward == loss_positions; carries the adversary's gradient
    any_mask_prob: np.ndarray | None = None  # relaxed any-mask probabilities, for inspection

    def weights(self) -> Tensor:
        if self.loss_weights is not None:
            return self.loss_weights
        return Tensor._wrap(self.loss_positions.astype(self.x_tilde.dtype))


class Noiser(nn.Module):
    """Embedding -> stacked GRU -> linear scores (1 any-mask + 2 + V_content options)."""

    def __init__(self, vocab: Vocabulary, cfg: nn.GruConfig, rng: np.random.Generator):
        self.vocab = vocab
        self.cfg = cfg
        self.embed = nn.Embedding(vocab.size, cfg.embed_dim, rng)
        self.gru = nn.GRU(cfg, rng)
        self.head = nn.Linear(cfg.output_dim, 3 + vocab.content_size, rng)

    def scores(self, tokens: np.ndarray, valid_tokens_mask) -> MaskScores:
        h = self.gru(self.embed(tokens), valid_tokens_mask)
        s = self.head(h)
        return MaskScores(any_mask=s[:, :, 0], mask_options=s[:, :, 1:])


def one_hot_tokens(tokens: np.ndarray, vocab_size: int, dtype=None) -> Tensor:
    return T.one_hot(tokens, vocab_size, dtype)


def run_noiser(
    noiser: Noiser,
    tokens: np.ndarray,
    valid_tokens_mask,
    rho: float,
    t: float,
    rng: np.random.Generator,
    exact_budget: bool = True,
    scores: MaskScores | None = None,
) -> NoiseOutcome:
    """Score, sample which positions to mask (budget ``round(len * rho)``) and how.

    With ``exact_budget`` the relaxed any-mask probabilities are snapped to
    their per-row top-k before thresholding, so the hard mask count always
    equals the budget; otherwise the raw probabilities are thresholded at 0.5.
    """
    vocab = noiser.vocab
    valid = np.asarray(valid_tokens_mask, dtype=T.get_default_dtype())
    if scores is None:
        scores = noiser.scores(tokens, valid)
    dtype = scores.any_mask.dtype

    y_soft = rss_sampler(scores.any_mask, valid, rho, t, rng, EPSILON)
    if exact_budget:
        p_overall = rss_hard(y_soft, valid, subset_sizes(valid, rho))
    else:
        over = y_soft.data > 1.0
        p_overall = T.where(over, 1.0, y_soft) if over.any() else y_soft

    g_type = scores.mask_options + gumbel_noise(scores.mask_options.shape, rng, dtype)
    p_type = T.softmax(g_type * (1.0 / t), dim=-1)

    x = one_hot_tokens(tokens, vocab.size, dtype)
    st = straight_through_parts(x, p_overall, p_type, vocab.mask_id, vocab.v_idx)

    hard = st.mask_any.data * valid
    if np.any(hard != st.mask_any.data):
        raise ContractViolation("adversary selected an invalid position")
    provenance = np.zeros(tokens.shape, dtype=np.int8)
    kind = np.where(
        st.mask_type == CHANNEL_MASK, ADV_MASK, np.where(st.mask_type == CHANNEL_KEEP, ADV_KEEP, ADV_REPLACE)
    )
    provenance[hard > 0] = kind[hard > 0]
    return NoiseOutcome(
        x_tilde=st.x_tilde,
        loss_positions=(hard > 0).astype(np.int8),
        provenance=provenance,
        loss_weights=st.mask_any,
        any_mask_prob=y_soft.data.copy(),
    )


def compose_random(
    adv: NoiseOutcome,
    tokens: np.ndarray,
    valid_tokens_mask,
    rand: NoiseOutcome,
) -> NoiseOutcome:
    """Overlay random masking ``rand`` onto the positions the adversary left alone.

    ``rand`` must not touch adversarial positions.
    """
    r = rand.loss_positions.astype(bool)
    if np.any(r & adv.loss_positions.astype(bool)):
        raise ContractViolation("random and adversarial masks overlap")
    x_tilde = T.where(r[..., None], rand.x_tilde, adv.x_tilde)
    weights = adv.weights() + r.astype(adv.x_tilde.dtype)
    provenance = np.where(r, rand.provenance, adv.provenance).astype(np.int8)
    return NoiseOutcome(
        x_tilde=x_tilde,
        loss_positions=(adv.loss_positions.astype(bool) | r).astype(np.int8),
        provenance=provenance,
        loss_weights=weights,
        any_mask_prob=adv.any_mask_prob,
    )


def mask_type_histogram(outcomes: Iterable[NoiseOutcome] | NoiseOutcome) -> dict[str, int]:
    """Count loss positions per provenance tag (``none`` excluded)."""
    if isinstance(outcomes, NoiseOutcome):
        outcomes = [outcomes]
    counts = np.zeros(len(TAGS), dtype=np.int64)
    for o in outcomes:
        counts += np.bincount(o.provenance.reshape(-1).astype(np.int64), minlength=len(TAGS))
    return {tag: int(counts[i]) for i, tag in enumerate(TAGS) if tag != "none"}
