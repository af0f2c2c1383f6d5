"""Label-smoothed cross-entropy over (possibly masked) distributions, and the
combined objective."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import VocabularyError
from .smoothing import LOG_FLOOR, MaskedDistribution


def _as_masked(p) -> MaskedDistribution:
    if isinstance(p, MaskedDistribution):
        return p
    p = p if isinstance(p, Tensor) else Tensor(p)
    return MaskedDistribution(p.data > 0, p)


def smoothed_cross_entropy(p_for_loss, target, rate: float = 0.1) -> Tensor:
    """``-sum_w q(w) log p(w)`` with ``q = (1 - rate) onehot(target) + rate / |V|``.

    Words outside the support of a masked distribution score ``log(1e-10)``, so
    they carry no gradient.  Returns one value per row (a 0-d tensor for a
    single distribution).
    """
    dist = _as_masked(p_for_loss)
    vocab = dist.mask.shape[-1]
    target = np.asarray(target, dtype=np.int64)
    if np.any(target < 0) or np.any(target >= vocab):
        raise VocabularyError(f"target id out of range for vocabulary of {vocab}")
    logq = ad.where(dist.mask, dist.log_on_support(), LOG_FLOOR)
    q = np.full(dist.mask.shape, rate / vocab, dtype=logq.dtype)
    np.put_along_axis(q, target.reshape(q.shape[:-1] + (1,)), 1.0 - rate + rate / vocab, axis=-1)
    return ad.scale(ad.sum(ad.mul(logq, Tensor(q, dtype=logq.dtype)), axis=-1), -1.0)


def total_loss(ce: Tensor, kl: Tensor, kl_weight: float = 1.0) -> Tensor:
    if kl_weight == 0.0:
        return ce
    return ad.add(ce, ad.scale(kl, kl_weight))
