"""Neural building blocks for the encoder-decoder.

Parameters live in small :class:`Module` containers; the forward computations
are plain functions over those containers.  Shapes are batch-first:
``(batch, d)`` for one step and ``(batch, time, d)`` for sequences.
"""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError, ContractError, DimensionError, VocabularyError

INIT_SCALE = 0.1
LN_EPS = 1e-5
NEG_INF = -1e9


class Module:
    """Walks attributes to find parameters and submodules."""

    training = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, list):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)


def _param(rng: np.random.Generator, shape, scale: float = INIT_SCALE) -> Tensor:
    return Tensor(rng.uniform(-scale, scale, size=shape), requires_grad=True)


def _zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``rng`` is None or rate is zero."""
    if rng is None or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return ad.mul(x, Tensor(keep, dtype=x.dtype))


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = _param(rng, (d_in, d_out))
        self.bias = _zeros((d_out,)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ad.linear(x, self.weight, self.bias)


class EmbeddingTable(Module):
    """Word embedding matrix ``M`` of shape ``(|V|, d)``.

    For the target side the same matrix scores hidden states, so row ``w`` is
    both the input vector of ``w`` and its classifier weight.
    """

    def __init__(self, vocab_size: int, d: int, rng: np.random.Generator):
        self.matrix = _param(rng, (vocab_size, d))

    @property
    def vocab_size(self) -> int:
        return self.matrix.shape[0]

    @property
    def d(self) -> int:
        return self.matrix.shape[1]

    def logits(self, h: Tensor) -> Tensor:
        return ad.matmul(h, ad.transpose(self.matrix))


def embed(ids, table: EmbeddingTable) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.vocab_size):
        raise VocabularyError(f"token id out of range for vocabulary of {table.vocab_size}")
    if ids.size == 0:
        return Tensor(np.zeros(ids.shape + (table.d,)), dtype=table.matrix.dtype)
    return ad.take_rows(table.matrix, ids)


class LSTMCellParams(Module):
    """Gate weights laid out as ``[input | forget | output | candidate]``."""

    def __init__(self, d_in: int, d_h: int, rng: np.random.Generator):
        self.d_in, self.d_h = d_in, d_h
        self.w_x = _param(rng, (d_in, 4 * d_h))
        self.w_h = _param(rng, (d_h, 4 * d_h))
        b = np.zeros(4 * d_h)
        b[d_h : 2 * d_h] = 1.0
        self.bias = Tensor(b, requires_grad=True)


def lstm_input_projection(p: LSTMCellParams, x: Tensor) -> Tensor:
    """Input-side gate pre-activations; precomputable for a whole sequence."""
    if x.shape[-1] != p.d_in:
        raise DimensionError(f"lstm input width {x.shape[-1]} != {p.d_in}")
    return ad.linear(x, p.w_x, p.bias)


def lstm_step(p: LSTMCellParams, x: Tensor | None, state, x_proj: Tensor | None = None):
    """One LSTM step; returns ``(h', c')``.

    ``x_proj`` may carry a precomputed :func:`lstm_input_projection`.
    """
    h, c = state
    if h.shape[-1] != p.d_h or c.shape != h.shape:
        raise DimensionError(f"lstm state shapes {h.shape}/{c.shape} do not match d_h={p.d_h}")
    if x_proj is None:
        x_proj = lstm_input_projection(p, x)
    z = ad.add(x_proj, ad.matmul(h, p.w_h))
    n = p.d_h
    gates = ad.sigmoid(z[..., : 3 * n])
    i, f, o = gates[..., :n], gates[..., n : 2 * n], gates[..., 2 * n :]
    g = ad.tanh(z[..., 3 * n :])
    c_new = ad.add(ad.mul(f, c), ad.mul(i, g))
    h_new = ad.mul(o, ad.tanh(c_new))
    return h_new, c_new


class LayerNorm(Module):
    def __init__(self, d: int):
        self.gain = Tensor(np.ones(d), requires_grad=True)
        self.bias = _zeros((d,))


def normalize(x: Tensor) -> Tensor:
    """Zero-mean, unit-variance over the last axis (no gain/bias)."""
    mu = ad.mean(x, axis=-1, keepdims=True)
    xc = ad.sub(x, ad.expand(mu, x.shape))
    var = ad.mean(ad.mul(xc, xc), axis=-1, keepdims=True)
    inv = ad.power(ad.shift(var, LN_EPS), -0.5)
    return ad.mul(xc, ad.expand(inv, x.shape))


def layer_norm(ln: LayerNorm, x: Tensor) -> Tensor:
    y = normalize(x)
    return ad.add(ad.mul(y, ad.expand(ln.gain, x.shape)), ad.expand(ln.bias, x.shape))


class RecurrentBlock(Module):
    """LSTM -> dropout -> residual -> layer norm.

    A bidirectional block runs two LSTMs, concatenates their outputs and
    projects back to ``d`` before the dropout/residual/norm wrapper.
    """

    def __init__(
        self,
        d_in: int,
        d: int,
        rng: np.random.Generator,
        dropout: float = 0.3,
        bidirectional: bool = False,
        residual: bool = True,
    ):
        if residual and d_in != d:
            raise ConfigurationError(f"residual block needs d_in == d_h, got {d_in} and {d}")
        self.d = d
        self.dropout = dropout
        self.residual = residual
        self.bidirectional = bidirectional
        self.fwd = LSTMCellParams(d_in, d, rng)
        if bidirectional:
            self.bwd = LSTMCellParams(d_in, d, rng)
            self.proj = Linear(2 * d, d, rng)
        self.norm = LayerNorm(d)


def _zero_state(batch: int, d: int, dtype) -> tuple[Tensor, Tensor]:
    z = np.zeros((batch, d), dtype=dtype)
    return Tensor(z, dtype=dtype), Tensor(z, dtype=dtype)


def _run_direction(p: LSTMCellParams, x: Tensor, mask: np.ndarray | None, reverse: bool):
    batch, steps = x.shape[0], x.shape[1]
    proj = lstm_input_projection(p, x)
    h, c = _zero_state(batch, p.d_h, x.dtype)
    outs: list[Tensor | None] = [None] * steps
    order = range(steps - 1, -1, -1) if reverse else range(steps)
    for t in order:
        h_new, c_new = lstm_step(p, None, (h, c), x_proj=proj[:, t])
        if mask is not None and not mask[:, t].all():
            # padded rows keep their previous state
            m = np.broadcast_to(mask[:, t : t + 1], h.shape)
            h_new, c_new = ad.where(m, h_new, h), ad.where(m, c_new, c)
        h, c = h_new, c_new
        outs[t] = h
    return ad.stack(outs, axis=1), (h, c)


def _wrap(block: RecurrentBlock, x: Tensor, y: Tensor, rng) -> Tensor:
    y = dropout(y, block.dropout, rng if block.training else None)
    if block.residual:
        y = ad.add(y, x)
    return layer_norm(block.norm, y)


def recurrent_block_forward(
    block: RecurrentBlock,
    inputs: Tensor,
    mask: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
    direction: str | None = None,
):
    """Run a block over ``inputs`` of shape ``(batch, time, d_in)``.

    Returns ``(outputs, finals)`` where ``finals`` holds the last ``(h, c)`` of
    each direction run.  Dropout is active only when the block is in training
    mode and ``rng`` is given.
    """
    direction = direction or ("bidirectional" if block.bidirectional else "forward")
    if direction == "bidirectional" and not block.bidirectional:
        raise ConfigurationError("block was built unidirectional")
    batch, steps = inputs.shape[0], inputs.shape[1]
    if steps == 0:
        return Tensor(np.zeros((batch, 0, block.d)), dtype=inputs.dtype), []
    if direction == "bidirectional":
        fw, f_fin = _run_direction(block.fwd, inputs, mask, reverse=False)
        bw, b_fin = _run_direction(block.bwd, inputs, mask, reverse=True)
        y = block.proj(ad.concat([fw, bw], axis=2))
        finals = [f_fin, b_fin]
    else:
        y, fin = _run_direction(block.fwd, inputs, mask, reverse=direction == "backward")
        finals = [fin]
    return _wrap(block, inputs, y, rng), finals


def recurrent_block_step(block: RecurrentBlock, x: Tensor, state, rng=None):
    """Single causal step of a unidirectional block; returns ``(output, (h, c))``."""
    if block.bidirectional:
        raise ConfigurationError("a bidirectional block cannot be stepped causally")
    h, c = lstm_step(block.fwd, x, state)
    return _wrap(block, x, h, rng), (h, c)


class MultiHopAttention(Module):
    def __init__(self, d: int, rng: np.random.Generator, hops: int = 2, dropout: float = 0.3):
        self.d = d
        self.hops = hops
        self.dropout = dropout
        self.query = [Linear(d, d, rng, bias=False) for _ in range(hops)]
        self.key = [Linear(d, d, rng, bias=False) for _ in range(hops)]
        self.value = [Linear(d, d, rng, bias=False) for _ in range(hops)]
        self.out = Linear(d, d, rng)
        self.norm = LayerNorm(d)


class AttentionMemory:
    """Per-hop keys (transposed) and values, computed once per source batch."""

    def __init__(self, att: MultiHopAttention, memory: Tensor, mask: np.ndarray | None = None):
        if memory.ndim == 2:
            memory = ad.reshape(memory, (1,) + memory.shape)
        if memory.shape[1] == 0:
            raise ContractError("attention over an empty memory")
        batch, length = memory.shape[0], memory.shape[1]
        self.keys_t = [ad.transpose(k(memory)) for k in att.key]
        self.values = [v(memory) for v in att.value]
        if mask is None:
            self.bias = None
        else:
            bias = np.where(np.asarray(mask, bool), 0.0, NEG_INF).reshape(batch, 1, length)
            self.bias = Tensor(bias, dtype=memory.dtype)


def attend(att: MultiHopAttention, query: Tensor, memory, mask=None, return_weights: bool = False):
    """Multi-hop scaled dot-product attention.

    ``memory`` is either a ``(batch, M, d)`` tensor or a prepared
    :class:`AttentionMemory`.  Each hop's context is added to the query for the
    next hop; the last context goes through the output projection.
    """
    mem = memory if isinstance(memory, AttentionMemory) else AttentionMemory(att, memory, mask)
    single = query.ndim == 1
    q = ad.reshape(query, (1, 1, att.d)) if single else ad.reshape(query, (query.shape[0], 1, att.d))
    weights = []
    inv_sqrt = 1.0 / math.sqrt(att.d)
    ctx = None
    for i in range(att.hops):
        qi = att.query[i](q)
        scores = ad.scale(ad.matmul(qi, mem.keys_t[i]), inv_sqrt)
        if mem.bias is not None:
            scores = ad.add(scores, mem.bias)
        w = ad.softmax(scores, axis=-1)
        weights.append(w)
        ctx = ad.matmul(w, mem.values[i])
        q = ad.add(q, ctx)
    out = att.out(ctx)
    out = ad.reshape(out, (att.d,)) if single else ad.reshape(out, (out.shape[0], att.d))
    if return_weights:
        return out, [w.data.reshape(w.shape[0], -1) for w in weights]
    return out


class LatentHead(Module):
    def __init__(self, d_in: int, d_z: int, rng: np.random.Generator):
        self.d_z = d_z
        self.mu = Linear(d_in, d_z, rng)
        self.logvar = Linear(d_in, d_z, rng)


def latent(head: LatentHead, s: Tensor):
    """Affine map to ``(mu, logvar)`` with logvar clamped to [-10, 10]."""
    return head.mu(s), ad.clamp(head.logvar(s), -10.0, 10.0)


def reparameterize(mu: Tensor, logvar: Tensor, noise) -> Tensor:
    noise = np.asarray(noise)
    if noise.shape != mu.shape:
        raise DimensionError(f"noise shape {noise.shape} != mu shape {mu.shape}")
    std = ad.exp(ad.scale(logvar, 0.5))
    return ad.add(mu, ad.mul(std, Tensor(noise, dtype=mu.dtype)))


def kl_to_standard_normal(mu: Tensor, logvar: Tensor) -> Tensor:
    """KL(N(mu, exp(logvar)) || N(0, 1)) summed over all coordinates."""
    if mu.shape != logvar.shape:
        raise DimensionError(f"mu {mu.shape} vs logvar {logvar.shape}")
    terms = ad.sub(ad.add(ad.mul(mu, mu), ad.exp(logvar)), ad.shift(logvar, 1.0))
    return ad.scale(ad.sum(terms), 0.5)
