"""Noiser outcomes, random masking and the MLM loss."""
import numpy as np
import pytest

from advmlm import nn
from advmlm import tensor as T
from advmlm.data import Vocabulary, make_batch
from advmlm.mlm import Encoder, MaskingParams, make_outcome, mlm_loss, random_mask, run_encoder
from advmlm.noiser import (
    ADV_MASK,
    RAND_KEEP,
    RAND_MASK,
    RAND_REPLACE,
    MaskScores,
    Noiser,
    compose_random,
    mask_type_histogram,
    run_noiser,
)
from advmlm.tensor import ContractViolation, Tensor

VOCAB = Vocabulary()


def _batch(rows=16, lo=12, hi=30, seed=0, max_len=34):
    r = np.random.default_rng(seed)
    letters = VOCAB.alphabet
    seqs = ["".join(r.choice(list(letters), size=r.integers(lo, hi + 1))) for _ in range(rows)]
    return make_batch(seqs, VOCAB, max_len)


@pytest.fixture(scope="module")
def noiser():
    return Noiser(VOCAB, nn.GruConfig(1, 16, 8, True), np.random.default_rng(0))


@pytest.fixture(scope="module")
def encoder():
    return Encoder(VOCAB, nn.TransformerConfig(1, 2, 16, 32, 64, 0.0), np.random.default_rng(1))


def test_random_mask_split_and_rate():
    b = _batch(rows=64, lo=40, hi=60, max_len=64)
    picked = counts = 0
    kinds = np.zeros(3)
    for s in range(40):
        o = random_mask(b.tokens, b.valid_tokens_mask, 0.2, np.random.default_rng(s), VOCAB)
        picked += o.loss_positions.sum()
        counts += b.valid_tokens_mask.sum()
        kinds += [np.sum(o.provenance == c) for c in (RAND_MASK, RAND_KEEP, RAND_REPLACE)]
    assert abs(picked / counts - 0.2) < 0.005
    np.testing.assert_allclose(kinds / kinds.sum(), [0.8, 0.1, 0.1], atol=0.01)


def test_random_mask_touches_only_valid_positions():
    b = _batch()
    o = random_mask(b.tokens, b.valid_tokens_mask, 0.5, np.random.default_rng(3), VOCAB)
    invalid = b.valid_tokens_mask == 0
    assert not o.loss_positions[invalid].any()
    noised = o.x_tilde.data.argmax(-1)
    assert np.array_equal(noised[invalid], b.tokens[invalid])
    # replacements are content tokens only
    rep = o.provenance == RAND_REPLACE
    assert np.all(noised[rep] >= VOCAB.v_idx)
    assert np.all(noised[o.provenance == RAND_MASK] == VOCAB.mask_id)


def test_random_mask_rejects_bad_rate():
    b = _batch(rows=2)
    for rate in (0.0, 1.0, -0.1):
        with pytest.raises(ContractViolation):
            random_mask(b.tokens, b.valid_tokens_mask, rate, np.random.default_rng(0), VOCAB)


def test_adversarial_outcome_budget_and_disjoint_random(noiser):
    b = _batch(rows=24)
    with T.no_grad():
        o = make_outcome(noiser, b.tokens, b.valid_tokens_mask, "adversarial", MaskingParams(0.1, 0.1), np.random.default_rng(5))
    adv = np.isin(o.provenance, (1, 2, 3))
    rnd = np.isin(o.provenance, (4, 5, 6))
    assert not (adv & rnd).any()
    expected = np.rint(b.valid_tokens_mask.sum(1) * 0.1)
    np.testing.assert_array_equal(adv.sum(1), expected)
    assert np.array_equal(o.loss_positions.astype(bool), adv | rnd)
    assert not o.loss_positions[b.valid_tokens_mask == 0].any()


def test_random_share_matches_rho_rand(noiser):
    b = _batch(rows=64, lo=40, hi=60, max_len=64)
    share = []
    with T.no_grad():
        for s in range(20):
            o = make_outcome(noiser, b.tokens, b.valid_tokens_mask, "adversarial", MaskingParams(0.1, 0.1), np.random.default_rng(s))
            share.append(np.isin(o.provenance, (4, 5, 6)).sum() / b.valid_tokens_mask.sum())
    assert abs(np.mean(share) - 0.1) < 0.005


def test_compose_random_refuses_overlap(noiser):
    b = _batch(rows=4)
    with T.no_grad():
        adv = run_noiser(noiser, b.tokens, b.valid_tokens_mask, 0.2, 1.0, np.random.default_rng(0))
    clash = random_mask(b.tokens, b.valid_tokens_mask, 0.9, np.random.default_rng(1), VOCAB)
    with pytest.raises(ContractViolation):
        compose_random(adv, b.tokens, b.valid_tokens_mask, clash)


def test_constant_scores_mask_uniformly(noiser):
    """With no preference, every valid position is selected equally often."""
    b = make_batch(["ACDEFGHIKL"] * 200, VOCAB, 12)
    B, S = b.tokens.shape
    scores = MaskScores(
        any_mask=Tensor(np.zeros((B, S))),
        mask_options=Tensor(np.zeros((B, S, 2 + VOCAB.content_size))),
    )
    freq = np.zeros(S)
    trials = 25
    for s in range(trials):
        o = run_noiser(noiser, b.tokens, b.valid_tokens_mask, 0.3, 1.0, np.random.default_rng(s), scores=scores)
        freq += o.loss_positions.sum(0)
    freq = freq[1:11] / (B * trials)
    np.testing.assert_allclose(freq, 0.3, atol=0.02)


def test_loss_ignores_unscored_positions(encoder):
    b = _batch(rows=6)
    o = random_mask(b.tokens, b.valid_tokens_mask, 0.3, np.random.default_rng(2), VOCAB)
    logits = encoder(o.x_tilde, b.valid_tokens_mask)
    rep = mlm_loss(logits, b.tokens, o)
    # change the targets where nothing is scored; loss is unchanged
    other = b.tokens.copy()
    other[o.loss_positions == 0] = VOCAB.v_idx
    again = mlm_loss(logits, other, o)
    assert rep.loss == again.loss
    sel = o.loss_positions.astype(bool)
    logp = logits.data - np.log(np.exp(logits.data).sum(-1, keepdims=True))
    manual = -np.take_along_axis(logp, b.tokens[..., None], -1)[..., 0][sel].mean()
    assert abs(rep.loss - manual) < 1e-5
    assert np.all(rep.per_position_nll[~sel] == 0)


def test_no_scored_positions_is_degenerate(encoder):
    b = _batch(rows=2)
    o = random_mask(b.tokens, np.zeros_like(b.valid_tokens_mask), 0.5, np.random.default_rng(0), VOCAB)
    rep = mlm_loss(encoder(o.x_tilde, b.valid_tokens_mask), b.tokens, o)
    assert rep.degenerate and rep.loss == 0.0 and rep.scored_count == 0


def test_histogram_counts_tags(noiser):
    b = _batch(rows=8)
    with T.no_grad():
        o = make_outcome(noiser, b.tokens, b.valid_tokens_mask, "adversarial", MaskingParams(0.1, 0.1), np.random.default_rng(9))
    h = mask_type_histogram(o)
    assert sum(h.values()) == int(o.loss_positions.sum())
    assert set(h) == {"adv_mask", "adv_keep", "adv_replace", "rand_mask", "rand_keep", "rand_replace"}


def test_adversarial_loss_reaches_noiser_parameters(noiser, encoder):
    b = _batch(rows=8)
    noiser.zero_grad()
    rep = run_encoder(noiser, encoder, b.tokens, b.valid_tokens_mask, "adversarial", np.random.default_rng(4), MaskingParams(0.2, 0.1))
    rep.total_loss.backward()
    assert any(p.grad is not None and np.abs(p.grad).sum() > 0 for p in noiser.parameters())


def test_unknown_mode_rejected(noiser, encoder):
    b = _batch(rows=2)
    with pytest.raises(ContractViolation):
        run_encoder(noiser, encoder, b.tokens, b.valid_tokens_mask, "bogus", np.random.default_rng(0))
    with pytest.raises(ContractViolation):
        run_encoder(noiser, encoder, b.tokens, b.valid_tokens_mask, "outcome", np.random.default_rng(0))
