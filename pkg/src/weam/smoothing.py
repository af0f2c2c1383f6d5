"""Turning a predicted word distribution into the next decoder input.

Four feeding regimes are supported:

``teacher_forcing``  the ground-truth embedding ``M[target]``
``weam``             the expected embedding ``p @ M``
``rweam``            the expected embedding under ``p ** (1/tau)`` renormalised
``mweam``            the expected embedding under a margin-masked ``p``, with a
                     scheduled-sampling warm-up and a gold-threshold warm-up

Distributions are tensors of shape ``(V,)`` or ``(batch, V)``; masks are
constant boolean arrays, so gradients flow through the renormalised masses but
not through the threshold comparison.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError, DimensionError, VocabularyError
from .layers import EmbeddingTable, embed

MODES = ("teacher_forcing", "weam", "rweam", "mweam")
LOG_FLOOR = math.log(1e-10)


@dataclass
class SmoothingConfig:
    mode: str = "mweam"
    epsilon: float = 1.0
    tau: float = 0.5
    xi: float = 0.5
    use_reestimated_loss: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"unknown smoothing mode {self.mode!r}")
        if self.epsilon < 0:
            raise ConfigurationError("epsilon must be >= 0")
        if not 0 < self.tau <= 1:
            raise ConfigurationError("tau must be in (0, 1]")
        if self.mode == "rweam" and self.tau < 0.5:
            raise ConfigurationError("rweam needs tau >= 0.5")
        if not 0 <= self.xi <= 1:
            raise ConfigurationError("xi must be in [0, 1]")


@dataclass
class SchedulerState:
    """Warm-up progress plus two independent random streams.

    ``rng`` drives the ground-truth/mixture choice, ``gold_rng`` the choice of
    threshold reference.
    """

    max_steps: int
    steps: int = 0
    seed: int = 0
    rng: np.random.Generator = field(init=False, repr=False)
    gold_rng: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        if self.max_steps < 1:
            raise ConfigurationError("max_steps must be >= 1")
        self.rng, self.gold_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(self.seed).spawn(2))

    @property
    def progress(self) -> float:
        return min(max(self.steps / self.max_steps, 0.0), 1.0)

    def advance(self, n: int = 1) -> None:
        self.steps = min(self.steps + n, self.max_steps)

    def get_state(self) -> dict:
        return {
            "steps": self.steps,
            "max_steps": self.max_steps,
            "seed": self.seed,
            "rng": self.rng.bit_generator.state,
            "gold_rng": self.gold_rng.bit_generator.state,
        }

    @classmethod
    def from_state(cls, state: dict) -> "SchedulerState":
        out = cls(max_steps=state["max_steps"], steps=state["steps"], seed=state["seed"])
        out.rng.bit_generator.state = state["rng"]
        out.gold_rng.bit_generator.state = state["gold_rng"]
        return out


@dataclass
class MaskedDistribution:
    """A renormalised distribution restricted to ``mask``.

    ``log_probs`` is only meaningful on the support.
    """

    mask: np.ndarray
    probs: Tensor
    log_probs: Tensor | None = None

    def log_on_support(self) -> Tensor:
        if self.log_probs is not None:
            return self.log_probs
        safe = ad.where(self.mask, self.probs, 1.0)
        return ad.log(safe)


def _tensor(p) -> Tensor:
    return p if isinstance(p, Tensor) else Tensor(p)


def mix_embedding(p, table: EmbeddingTable) -> Tensor:
    """Expected embedding ``sum_w p(w) M[w]``."""
    p = _tensor(p)
    if p.shape[-1] != table.vocab_size:
        raise DimensionError(f"distribution over {p.shape[-1]} words vs vocabulary of {table.vocab_size}")
    if p.ndim == 1:
        return ad.reshape(ad.matmul(ad.reshape(p, (1, p.shape[0])), table.matrix), (table.d,))
    return ad.matmul(p, table.matrix)


def _renormalize(q: Tensor) -> Tensor:
    z = ad.sum(q, axis=-1, keepdims=True)
    return ad.div(q, ad.expand(z, q.shape))


def rescale(p, tau: float) -> Tensor:
    """Sharpen ``p`` to ``p ** (1/tau)`` and renormalise."""
    if tau <= 0:
        raise ConfigurationError("tau must be > 0")
    p = _tensor(p)
    if tau == 1.0:
        return p
    # dividing by the row max first keeps the power from underflowing;
    # the renormalised result does not depend on that constant
    peak = p.data.max(axis=-1, keepdims=True)
    q = ad.power(ad.div(p, Tensor(np.broadcast_to(peak, p.shape), dtype=p.dtype)), 1.0 / tau)
    return _renormalize(q)


def _masked(p: Tensor, mask: np.ndarray, log_p: Tensor | None = None) -> MaskedDistribution:
    probs = _renormalize(ad.mul(p, Tensor(mask, dtype=p.dtype)))
    log_probs = None
    if log_p is not None:
        kept = ad.sum(ad.mul(p, Tensor(mask, dtype=p.dtype)), axis=-1, keepdims=True)
        log_probs = ad.sub(log_p, ad.expand(ad.log(kept), p.shape))
    return MaskedDistribution(mask, probs, log_probs)


def _threshold_mask(p: np.ndarray, reference: np.ndarray, epsilon: float) -> np.ndarray:
    # >= keeps the reference word itself even at epsilon == 0
    return p >= math.exp(-epsilon) * reference


def margin_mask(p, epsilon: float, log_p: Tensor | None = None) -> MaskedDistribution:
    """Keep words with ``p(w) >= exp(-epsilon) * max p`` and renormalise."""
    p = _tensor(p)
    mask = _threshold_mask(p.data, p.data.max(axis=-1, keepdims=True), epsilon)
    return _masked(p, mask, log_p)


def gold_threshold_mask(p, target, epsilon: float, r, log_p: Tensor | None = None) -> MaskedDistribution:
    """Threshold from the target's mass when ``r == 0``, from the max when ``r == 1``.

    ``target`` and ``r`` are scalars for a single distribution or per-row
    arrays for a batch.
    """
    p = _tensor(p)
    vocab = p.shape[-1]
    target = np.asarray(target, dtype=np.int64)
    if np.any(target < 0) or np.any(target >= vocab):
        raise VocabularyError(f"target id out of range for vocabulary of {vocab}")
    r = np.asarray(r, dtype=bool)
    pd = p.data
    gold = np.take_along_axis(pd, target.reshape(pd.shape[:-1] + (1,)), axis=-1)
    ref = np.where(r.reshape(pd.shape[:-1] + (1,)), pd.max(axis=-1, keepdims=True), gold)
    mask = _threshold_mask(pd, ref, epsilon)
    return _masked(p, mask, log_p)


def bernoulli_schedule(state: SchedulerState, lowerbound: float = 0.0, size=None, rng=None):
    """Draw bits with probability ``max(steps / max_steps, lowerbound)``."""
    prob = min(max(state.steps / state.max_steps, lowerbound), 1.0)
    prob = max(prob, 0.0)
    rng = state.rng if rng is None else rng
    draw = rng.random(size)
    return draw < prob if size is not None else int(draw < prob)


@dataclass
class StepFeed:
    """Result of :func:`next_input` for one decode step."""

    v: Tensor
    p_for_loss: MaskedDistribution
    used_mixture: np.ndarray
    reestimated: np.ndarray
    fallback: np.ndarray


def next_input(
    cfg: SmoothingConfig,
    p,
    target,
    table: EmbeddingTable,
    state: SchedulerState | None = None,
    log_p: Tensor | None = None,
) -> StepFeed:
    """Next-step input embedding and the distribution to score the loss with.

    ``p`` is ``(V,)`` or ``(batch, V)``; ``log_p``, when given, is the matching
    log-softmax and is used to keep the loss numerically stable.
    """
    p = _tensor(p)
    target = np.asarray(target, dtype=np.int64)
    lead = p.shape[:-1]
    full = np.ones(p.shape, dtype=bool)
    plain = MaskedDistribution(full, p, log_p)
    no = np.zeros(lead, dtype=bool)

    if cfg.mode == "teacher_forcing":
        return StepFeed(embed(target, table), plain, no, no, no)
    if cfg.mode == "weam":
        return StepFeed(mix_embedding(p, table), plain, ~no, no, no)
    if cfg.mode == "rweam":
        return StepFeed(mix_embedding(rescale(p, cfg.tau), table), plain, ~no, no, no)

    if state is None:
        raise ConfigurationError("mweam needs a SchedulerState")
    t = np.asarray(bernoulli_schedule(state, 0.0, size=lead if lead else None), dtype=bool)
    r = np.asarray(bernoulli_schedule(state, cfg.xi, size=lead if lead else None, rng=state.gold_rng), dtype=bool)
    gt = embed(target, table)
    if not t.any():
        return StepFeed(gt, plain, t, no, no)

    masked = gold_threshold_mask(p, target, cfg.epsilon, r, log_p)
    mixed = mix_embedding(masked.probs, table)
    if t.all():
        v = mixed
    else:
        v = ad.where(np.broadcast_to(t[..., None], mixed.shape), mixed, gt)

    if not cfg.use_reestimated_loss:
        return StepFeed(v, plain, t, no, no)

    tgt_kept = np.take_along_axis(masked.mask, target.reshape(lead + (1,)), axis=-1).reshape(lead)
    fallback = t & ~tgt_kept
    use = t & tgt_kept
    if not use.any():
        return StepFeed(v, plain, t, use, fallback)
    row = np.broadcast_to(use[..., None], p.shape)
    mask = np.where(row, masked.mask, True)
    probs = ad.where(row, masked.probs, p)
    logs = None
    if log_p is not None:
        logs = ad.where(row, masked.log_probs, log_p)
    return StepFeed(v, MaskedDistribution(mask, probs, logs), t, use, fallback)
