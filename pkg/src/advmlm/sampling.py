"""Differentiable sampling: Gumbel noise, Gumbel-Softmax, relaxed subset
selection with per-row budgets, and the three-mode straight-through sampler.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .tensor import ContractViolation, Tensor

EPSILON = 1e-18

# Channel layout of the mask-options scores.
CHANNEL_MASK = 0
CHANNEL_KEEP = 1
CHANNEL_REPLACE = 2


@dataclass(frozen=True)
class SamplerParams:
    rho: float = 0.10
    temperature: float = 1.0
    epsilon: float = EPSILON
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.rho < 1.0:
            raise ContractViolation("rho must lie in (0, 1)")
        if self.temperature <= 0.0:
            raise ContractViolation("temperature must be positive")
        if self.epsilon <= 0.0:
            raise ContractViolation("epsilon must be positive")


def gumbel_noise(shape, rng: np.random.Generator, dtype=None) -> Tensor:
    """I.i.d. standard Gumbel samples ``-log(-log(U))``, with U kept off {0, 1}."""
    u = rng.random(shape)
    tiny = np.finfo(np.float64).tiny
    u = np.clip(u, tiny, 1.0 - np.finfo(np.float64).epsneg)
    g = -np.log(-np.log(u))
    return Tensor._wrap(g.astype(dtype or T.get_default_dtype()))


def gumbel_softmax(scores: Tensor, t: float, rng: np.random.Generator) -> Tensor:
    """One Concrete sample per row: ``softmax((scores + G) / t)`` over the last axis."""
    if t <= 0:
        raise ContractViolation("temperature must be positive")
    g = gumbel_noise(scores.shape, rng, scores.dtype)
    return T.softmax((scores + g) * (1.0 / t), dim=-1)


def subset_sizes(valid_tokens_mask, rho: float) -> np.ndarray:
    """Per-row budget ``round(seq_len * rho)`` (round half to even)."""
    seq_lens = np.asarray(valid_tokens_mask, dtype=np.float64).sum(axis=1)
    return np.rint(seq_lens * rho).astype(np.int64)


def rss_sampler(
    s: Tensor,
    valid_tokens_mask,
    rho: float,
    t: float,
    rng: np.random.Generator,
    epsilon: float = EPSILON,
    noise: Tensor | None = None,
) -> Tensor:
    """Relaxed subset selection with a per-row budget of ``round(len * rho)``.

    Each iteration suppresses already-selected mass through
    ``g += log(max((1 - y_soft) * valid, eps))`` and adds one Gumbel-Softmax
    draw to ``y_soft``.  A row stops accumulating once its own budget is
    spent; because softmax is shift invariant, the epsilon-suppression of an
    exhausted row alone would not stop it.  Mass left on invalid positions is
    zeroed at the end.

    ``noise`` overrides the Gumbel draw (used to pin the randomness in tests).
    """
    if t <= 0:
        raise ContractViolation("temperature must be positive")
    valid = np.asarray(valid_tokens_mask, dtype=s.dtype)
    if valid.shape != s.shape or s.ndim != 2:
        raise ContractViolation("scores and valid_tokens_mask must both be [batch, seq]")
    if np.any((valid != 0) & (valid != 1)):
        raise ContractViolation("valid_tokens_mask must be binary")
    if not np.all(np.isfinite(s.data)):
        raise T.NumericFault("non-finite selection scores")

    sizes = subset_sizes(valid, rho)
    if noise is None:
        noise = gumbel_noise(s.shape, rng, s.dtype)
    g = s + noise
    y = T.zeros(s.shape, dtype=s.dtype)
    left = sizes.copy()
    active = valid * (left > 0)[:, None]
    inv_t = 1.0 / t
    for _ in range(int(sizes.max(initial=0))):
        row_on = (left > 0).astype(s.dtype)[:, None]
        khot = T.maximum((1.0 - y) * active, epsilon)
        g = g + T.log(khot)
        y = y + T.softmax(g * inv_t, dim=-1) * row_on
        left = left - 1
        active = active * (left > 0)[:, None]
    return y * valid


def rss_hard(y_soft: Tensor, valid_tokens_mask, sizes: np.ndarray) -> Tensor:
    """Exact-budget hard sample: top-``k`` valid positions of ``y_soft`` per row,
    with straight-through gradient to ``y_soft``.

    Ties break towards the lower position index.
    """
    valid = np.asarray(valid_tokens_mask, dtype=bool)
    ranked = np.where(valid, y_soft.data.astype(np.float64), -np.inf)
    order = np.argsort(-ranked, axis=1, kind="stable")
    hard = np.zeros(y_soft.shape, dtype=y_soft.dtype)
    for r, k in enumerate(sizes):
        hard[r, order[r, : int(k)]] = 1.0
    return T.straight_through(hard, y_soft)


class StraightThroughResult(NamedTuple):
    x_tilde: Tensor  # [B, S, V]
    mask_any: Tensor  # [B, S], forward exactly 0/1
    mask_type: np.ndarray | None  # [B, S] argmax channel, None for [MASK]-only masking


def straight_through_parts(
    x_onehot,
    p_mask_overall: Tensor,
    p_mask_type: Tensor | None,
    mask_id: int,
    v_idx: int,
) -> StraightThroughResult:
    """Hard masking decisions with straight-through gradients.

    A position is masked iff ``p_mask_overall > 0.5``.  Channel 0 of
    ``p_mask_type`` is [MASK] substitution, channel 1 keeps the original
    token and channels ``2:`` replace with content token ``v_idx + j``.
    """
    x = x_onehot if isinstance(x_onehot, Tensor) else Tensor._wrap(np.asarray(x_onehot, dtype=p_mask_overall.dtype))
    B, S, V = x.shape
    p = p_mask_overall
    if p.shape != (B, S):
        raise ContractViolation("p_mask_overall must be [batch, seq]")
    if np.any(p.data < -1e-6) or np.any(p.data > 1 + 1e-6):
        raise ContractViolation("p_mask_overall must lie in [0, 1]")

    hard_any = (p.data > 0.5).astype(p.dtype)
    mask_any = T.straight_through(hard_any, p)

    if p_mask_type is None:
        onehot_mask = np.zeros((B, S, V), dtype=p.dtype)
        onehot_mask[..., mask_id] = 1.0
        x_masked = T.straight_through(onehot_mask, p.reshape(B, S, 1))
        mask_type = None
    else:
        width = 2 + V - v_idx
        if p_mask_type.shape != (B, S, width):
            raise ContractViolation(
                f"p_mask_type must be [batch, seq, {width}] (no control-token replacement channels); "
                f"got {p_mask_type.shape}"
            )
        if not np.allclose(p_mask_type.data.sum(axis=-1), 1.0, atol=1e-4):
            raise ContractViolation("p_mask_type rows must sum to 1")
        mask_type = p_mask_type.data.argmax(axis=-1)
        hard_type = np.zeros(p_mask_type.shape, dtype=p.dtype)
        np.put_along_axis(hard_type, mask_type[..., None], 1.0, axis=-1)
        M = T.straight_through(hard_type, p_mask_type)

        onehot_mask = np.zeros((1, 1, V), dtype=p.dtype)
        onehot_mask[..., mask_id] = 1.0
        m_mask = M[:, :, CHANNEL_MASK : CHANNEL_MASK + 1]
        m_keep = M[:, :, CHANNEL_KEEP : CHANNEL_KEEP + 1]
        m_replace = M[:, :, CHANNEL_REPLACE:]
        pad = T.zeros((B, S, v_idx), dtype=p.dtype)
        x_masked = m_mask * onehot_mask + x * m_keep + T.concat([pad, m_replace], axis=-1)

    a = mask_any.reshape(B, S, 1)
    x_tilde = (1.0 - a) * x + a * x_masked
    return StraightThroughResult(x_tilde, mask_any, mask_type)


def straight_through(x_onehot, p_mask_overall: Tensor, p_mask_type: Tensor | None, mask_id: int, v_idx: int) -> Tensor:
    return straight_through_parts(x_onehot, p_mask_overall, p_mask_type, mask_id, v_idx).x_tilde


def temperature_at(step: int, t0: float, t_final: float | None, anneal_steps: int) -> float:
    """Fixed temperature, or a linear anneal from ``t0`` to ``t_final`` over ``anneal_steps``."""
    if t_final is None or anneal_steps <= 0:
        return t0
    frac = min(max(step, 0) / anneal_steps, 1.0)
    return t0 + (t_final - t0) * frac
