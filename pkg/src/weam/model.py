"""Variational encoder-decoder with attention and smoothed decoder inputs."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError
from .layers import (
    AttentionMemory,
    EmbeddingTable,
    LatentHead,
    Linear,
    Module,
    MultiHopAttention,
    RecurrentBlock,
    attend,
    dropout,
    embed,
    kl_to_standard_normal,
    latent,
    layer_norm,
    recurrent_block_forward,
    recurrent_block_step,
    reparameterize,
)
from .losses import smoothed_cross_entropy
from .smoothing import SchedulerState, SmoothingConfig, next_input

PAD, UNK, EOS = 0, 1, 2


@dataclass
class ModelConfig:
    src_vocab_size: int
    tgt_vocab_size: int
    d: int = 256
    layers: int = 3
    dropout: float = 0.3
    hops: int = 2
    latent_dim: int | None = None
    max_len: int = 64

    @property
    def d_z(self) -> int:
        return self.latent_dim or self.d


class Seq2SeqVAE(Module):
    """Bidirectional encoder, Gaussian latent seed, causal decoder.

    The target embedding table doubles as the output classifier.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        d, n = cfg.d, cfg.layers
        self.config = cfg
        self.src_embed = EmbeddingTable(cfg.src_vocab_size, d, rng)
        self.tgt_embed = EmbeddingTable(cfg.tgt_vocab_size, d, rng)
        self.encoder = [RecurrentBlock(d, d, rng, cfg.dropout, bidirectional=True) for _ in range(n)]
        self.latent_head = LatentHead(2 * d, cfg.d_z, rng)
        self.seed_proj = Linear(cfg.d_z, 2 * n * d, rng)
        self.decoder = [RecurrentBlock(d, d, rng, cfg.dropout) for _ in range(n)]
        self.attention = MultiHopAttention(d, rng, cfg.hops, cfg.dropout)


def _batch_ids(ids) -> np.ndarray:
    ids = np.asarray(ids, dtype=np.int64)
    return ids.reshape(1, -1) if ids.ndim == 1 else ids


def encode(model: Seq2SeqVAE, src_ids, src_mask=None, rng=None):
    """Returns ``(memory, mu, logvar)``; memory is ``(batch, M, d)``."""
    src = _batch_ids(src_ids)
    if src.shape[1] == 0:
        raise ContractError("empty source sentence")
    if src_mask is not None:
        src_mask = np.asarray(src_mask, dtype=bool).reshape(src.shape)
        if not src_mask[:, 0].all():
            raise ContractError("every source row needs at least one token")
    x = embed(src, model.src_embed)
    finals = None
    for block in model.encoder:
        x, finals = recurrent_block_forward(block, x, src_mask, rng if model.training else None)
    (h_fwd, _), (h_bwd, _) = finals
    mu, logvar = latent(model.latent_head, ad.concat([h_fwd, h_bwd], axis=1))
    return x, mu, logvar


def initial_states(model: Seq2SeqVAE, c: Tensor) -> list[tuple[Tensor, Tensor]]:
    d = model.config.d
    y = model.seed_proj(c)
    return [(y[:, (2 * i) * d : (2 * i + 1) * d], y[:, (2 * i + 1) * d : (2 * i + 2) * d]) for i in range(model.config.layers)]


@dataclass
class DecodeContext:
    memory: AttentionMemory
    classifier: Tensor  # transposed target table, (d, |V|)
    rng: np.random.Generator | None = None


def make_context(model: Seq2SeqVAE, memory: Tensor, src_mask=None, rng=None) -> DecodeContext:
    return DecodeContext(
        AttentionMemory(model.attention, memory, src_mask),
        ad.transpose(model.tgt_embed.matrix),
        rng if model.training else None,
    )


def decoder_step(model: Seq2SeqVAE, v: Tensor, states, ctx: DecodeContext):
    """One decoder step: LSTM stack, wrapped attention, tied classifier."""
    x = v
    new_states = []
    for block, st in zip(model.decoder, states):
        x, st = recurrent_block_step(block, x, st, ctx.rng)
        new_states.append(st)
    att = model.attention
    y = dropout(attend(att, x, ctx.memory), att.dropout, ctx.rng)
    y = layer_norm(att.norm, ad.add(y, x))
    return ad.matmul(y, ctx.classifier), new_states


def _eos_input(model: Seq2SeqVAE, batch: int) -> Tensor:
    return embed(np.full(batch, EOS), model.tgt_embed)


@dataclass
class DecodeOutput:
    probs: list = field(default_factory=list)
    log_probs: list = field(default_factory=list)
    feeds: list = field(default_factory=list)
    inputs: list = field(default_factory=list)


def decode_train(
    model: Seq2SeqVAE,
    c: Tensor,
    memory: Tensor,
    target_ids,
    cfg: SmoothingConfig,
    state: SchedulerState | None = None,
    src_mask=None,
    rng=None,
) -> DecodeOutput:
    """Unroll the decoder over ``target_ids`` (each row ends with EOS, then pads).

    The whole unroll is one differentiable graph; in the mixture modes each
    step's input depends on the previous step's distribution.
    """
    tgt = _batch_ids(target_ids)
    n = tgt.shape[1]
    if n > model.config.max_len:
        raise ContractError(f"target length {n} exceeds max_len {model.config.max_len}")
    lengths = (tgt != PAD).sum(axis=1)
    if np.any(lengths == 0) or np.any(tgt[np.arange(len(tgt)), lengths - 1] != EOS):
        raise ContractError("every target row must end with EOS")
    ctx = make_context(model, memory, src_mask, rng)
    states = initial_states(model, c)
    v = _eos_input(model, tgt.shape[0])
    out = DecodeOutput()
    for j in range(n):
        out.inputs.append(v)
        logits, states = decoder_step(model, v, states, ctx)
        logp = ad.log_softmax(logits, axis=-1)
        p = ad.exp(logp)
        feed = next_input(cfg, p, tgt[:, j], model.tgt_embed, state, log_p=logp)
        out.probs.append(p)
        out.log_probs.append(logp)
        out.feeds.append(feed)
        v = feed.v
    return out


def greedy_decode(
    model: Seq2SeqVAE,
    c: Tensor,
    memory: Tensor,
    max_len: int,
    src_mask=None,
    noise_sigma: float = 0.0,
    noise_rng: np.random.Generator | None = None,
) -> list[list[int]]:
    """Argmax decoding that always feeds the exact embedding of the chosen word.

    With ``noise_sigma > 0`` Gaussian noise is added to every decoder input
    embedding.  Returned sequences exclude the final EOS.
    """
    if max_len < 1:
        raise ContractError("max_len must be >= 1")
    with ad.no_grad():
        batch = c.shape[0]
        ctx = make_context(model, memory, src_mask)
        ctx.rng = None
        states = initial_states(model, c)
        v = _eos_input(model, batch)
        done = np.zeros(batch, dtype=bool)
        outs: list[list[int]] = [[] for _ in range(batch)]
        for _ in range(max_len):
            if noise_sigma > 0:
                v = Tensor(v.data + noise_rng.normal(0.0, noise_sigma, v.shape).astype(v.dtype), dtype=v.dtype)
            logits, states = decoder_step(model, v, states, ctx)
            ids = logits.data.argmax(axis=-1)
            for b in np.flatnonzero(~done):
                if ids[b] == EOS:
                    done[b] = True
                else:
                    outs[b].append(int(ids[b]))
            if done.all():
                break
            v = embed(ids, model.tgt_embed)
    return outs


def translate(model: Seq2SeqVAE, src, src_mask=None, max_len: int | None = None, noise_sigma=0.0, noise_rng=None):
    """Eval-mode encode with the posterior mean as seed, then greedy decode."""
    was_training = model.training
    model.eval()
    try:
        with ad.no_grad():
            memory, mu, _ = encode(model, src, src_mask)
            return greedy_decode(model, mu, memory, max_len or model.config.max_len, src_mask, noise_sigma, noise_rng)
    finally:
        model.train(was_training)


@dataclass
class LossOutput:
    ce: Tensor
    kl: Tensor
    tokens: int
    mixture_steps: int = 0
    reestimated: int = 0
    fallback: int = 0


def forward_loss(
    model: Seq2SeqVAE,
    batch,
    cfg: SmoothingConfig,
    state: SchedulerState | None = None,
    label_smoothing: float = 0.1,
    rng: np.random.Generator | None = None,
    latent_rng: np.random.Generator | None = None,
) -> LossOutput:
    """Token-mean label-smoothed CE over non-pad target positions, and batch-mean KL.

    ``rng`` drives dropout, ``latent_rng`` the reparameterisation noise (the
    posterior mean is used when it is None).
    """
    tgt_mask = np.asarray(batch.tgt_mask, dtype=bool)
    tokens = int(tgt_mask.sum())
    if batch.src.shape[0] == 0 or tokens == 0:
        raise ContractError("batch has no target tokens")
    memory, mu, logvar = encode(model, batch.src, batch.src_mask, rng)
    if latent_rng is None:
        c = mu
    else:
        c = reparameterize(mu, logvar, latent_rng.standard_normal(mu.shape))
    out = decode_train(model, c, memory, batch.tgt, cfg, state, batch.src_mask, rng)

    total = None
    mix = rest = fall = 0
    for j, feed in enumerate(out.feeds):
        w = tgt_mask[:, j]
        if not w.any():
            continue
        row = smoothed_cross_entropy(feed.p_for_loss, batch.tgt[:, j], label_smoothing)
        step = ad.sum(ad.mul(row, Tensor(w, dtype=row.dtype)))
        total = step if total is None else ad.add(total, step)
        mix += int((feed.used_mixture & w).sum())
        rest += int((feed.reestimated & w).sum())
        fall += int((feed.fallback & w).sum())
    ce = ad.scale(total, 1.0 / tokens)
    kl = ad.scale(kl_to_standard_normal(mu, logvar), 1.0 / mu.shape[0])
    return LossOutput(ce, kl, tokens, mix, rest, fall)
