"""Optimiser, learning-rate schedule and the training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .errors import ConfigurationError, DivergenceError
from .losses import smoothed_cross_entropy, total_loss  # noqa: F401  (re-exported)
from .model import Seq2SeqVAE, forward_loss, translate
from .smoothing import SchedulerState, SmoothingConfig

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    max_lr: float = 1e-3
    warmup: int = 200
    max_steps: int | None = None
    label_smoothing: float = 0.1
    batch_size: int = 32
    epochs: int = 20
    seed: int = 0
    clip_norm: float = 5.0
    kl_anneal: bool = True
    valid_every: int = 0  # steps; 0 means once per epoch
    smoothing: SmoothingConfig = field(default_factory=SmoothingConfig)

    def __post_init__(self):
        if self.warmup < 1:
            raise ConfigurationError("warmup must be >= 1")
        if not 0 <= self.label_smoothing < 1:
            raise ConfigurationError("label smoothing must be in [0, 1)")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigurationError("batch_size must be >= 1 and epochs >= 0")


def lr_at(step: int, warmup: int, max_lr: float = 1e-3) -> float:
    """Linear warm-up to ``max_lr`` at ``warmup``, then inverse-square-root decay."""
    step = max(step, 1)
    return max_lr * min(step / warmup, math.sqrt(warmup / step))


def kl_weight_at(step: int, warmup: int, anneal: bool = True) -> float:
    return min(step / warmup, 1.0) if anneal else 1.0


class AdamState:
    def __init__(self, params: dict, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}


def adam_step(state: AdamState, params: dict, grads: dict, lr: float) -> bool:
    """Bias-corrected Adam update in place.

    Returns False (and leaves everything untouched) if any gradient is
    non-finite.
    """
    for g in grads.values():
        if g is not None and not np.all(np.isfinite(g)):
            return False
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.data.dtype)
    return True


def clip_grad_norm(grads: dict, max_norm: float) -> float:
    """Scale gradients in place so their global norm is at most ``max_norm``."""
    norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values() if g is not None))
    if norm > max_norm:
        f = max_norm / (norm + 1e-12)
        for g in grads.values():
            if g is not None:
                g *= f
    return norm


def streams(seed: int, *names: str) -> dict:
    """Independent named generators derived from one seed."""
    from .config import substream

    return {n: substream(seed, n) for n in names}


@dataclass
class TrainResult:
    log: list[str]
    best_bleu: float
    best_params: dict
    final_step: int
    skipped: int = 0
    adam: AdamState | None = None
    scheduler: SchedulerState | None = None


def _fmt(x: float) -> str:
    return f"{x:.6g}"


def _snapshot(params: dict) -> dict:
    return {k: p.data.copy() for k, p in params.items()}


def evaluate_bleu(model: Seq2SeqVAE, batches, vocab_tgt=None) -> float:
    from .evaluation import bleu

    hyps, refs = [], []
    for b in batches:
        out = translate(model, b.src, b.src_mask)
        hyps.extend(out)
        for row, m in zip(b.tgt, b.tgt_mask):
            refs.append([int(t) for t in row[m] if t != 2])
    return bleu(hyps, refs)


def fit(
    model: Seq2SeqVAE,
    train_pairs,
    vocab_src,
    vocab_tgt,
    cfg: TrainConfig,
    valid_pairs=None,
    on_record: Callable[[str], None] | None = None,
    adam: AdamState | None = None,
    scheduler: SchedulerState | None = None,
) -> TrainResult:
    """Train ``model`` in place and return the log plus the best validation snapshot.

    Each step: forward loss, backward, global-norm clip, Adam.  Validation
    BLEU is measured once per epoch (or every ``valid_every`` steps) and the
    best parameters are kept.  Aborts with :class:`DivergenceError` if the CE
    stays above ten times its first value for 100 consecutive steps.
    """
    from .data import make_batches

    if not train_pairs:
        raise ConfigurationError("empty training corpus")
    rngs = streams(cfg.seed, "data", "dropout", "latent", "scheduler")
    params = dict(model.named_parameters())
    adam = adam or AdamState(params)
    max_len = model.config.max_len
    per_epoch = math.ceil(len(train_pairs) / cfg.batch_size)
    total_steps = cfg.max_steps or max(per_epoch * cfg.epochs, 1)
    sched = scheduler or SchedulerState(total_steps, seed=int(rngs["scheduler"].integers(2**31)))
    valid_batches = make_batches(valid_pairs, vocab_src, vocab_tgt, 64, max_len) if valid_pairs else None

    records: list[str] = []

    def emit(line: str) -> None:
        records.append(line)
        if on_record:
            on_record(line)

    best_bleu, best = -1.0, _snapshot(params)
    initial_ce, bad, skipped, step = None, 0, 0, adam.step

    def validate(epoch: int) -> None:
        nonlocal best_bleu, best
        if valid_batches is None:
            return
        score = evaluate_bleu(model, valid_batches)
        if score > best_bleu:
            best_bleu, best = score, _snapshot(params)
        emit(f"step={step} epoch={epoch} valid_bleu={_fmt(score)} best_bleu={_fmt(best_bleu)}")

    model.train()
    for epoch in range(1, cfg.epochs + 1):
        for batch in make_batches(train_pairs, vocab_src, vocab_tgt, cfg.batch_size, max_len, rngs["data"]):
            if cfg.max_steps and step >= cfg.max_steps:
                break
            out = forward_loss(
                model, batch, cfg.smoothing, sched, cfg.label_smoothing, rngs["dropout"], rngs["latent"]
            )
            kl_w = kl_weight_at(step + 1, cfg.warmup, cfg.kl_anneal)
            loss = total_loss(out.ce, out.kl, kl_w)
            for p in params.values():
                p.grad = None
            ad.backward(loss)
            grads = {k: p.grad for k, p in params.items()}
            norm = clip_grad_norm(grads, cfg.clip_norm)
            lr = lr_at(step + 1, cfg.warmup, cfg.max_lr)
            if not adam_step(adam, params, grads, lr):
                skipped += 1
                log.warning("non-finite gradient at step %d, batch skipped", step + 1)
                emit(f"step={step + 1} skipped=nonfinite_grad")
                continue
            step = adam.step
            sched.advance()
            ce = out.ce.item()
            emit(
                f"step={step} epoch={epoch} lr={_fmt(lr)} ce={_fmt(ce)} kl={_fmt(out.kl.item())} "
                f"kl_weight={_fmt(kl_w)} grad_norm={_fmt(norm)} mixture={out.mixture_steps} "
                f"reestimated={out.reestimated} fallback={out.fallback}"
            )
            if initial_ce is None:
                initial_ce = ce
            bad = bad + 1 if ce > 10 * initial_ce else 0
            if bad >= 100:
                raise DivergenceError(f"ce above 10x its initial value ({initial_ce:.4g}) for 100 steps")
            if cfg.valid_every and step % cfg.valid_every == 0:
                validate(epoch)
        if not cfg.valid_every:
            validate(epoch)
    model.eval()
    if valid_batches is None:
        best = _snapshot(params)
    return TrainResult(records, best_bleu, best, step, skipped, adam, sched)
