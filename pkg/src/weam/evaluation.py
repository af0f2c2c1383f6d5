"""Sequence-level metrics and the input-noise sensitivity sweep.

All scores are percentages in [0, 100].  Sentences are token sequences (any
hashable tokens, e.g. strings or ids).
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ContractError


def ngrams(tokens: Sequence, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu_stats(hypotheses, references, max_n: int = 4):
    """Clipped match counts, hypothesis n-gram totals, and the two corpus lengths."""
    matches, totals = [0] * max_n, [0] * max_n
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, max_n + 1):
            h, r = ngrams(hyp, n), ngrams(ref, n)
            matches[n - 1] += sum(min(c, r[g]) for g, c in h.items())
            totals[n - 1] += max(len(hyp) - n + 1, 0)
    return matches, totals, hyp_len, ref_len


def bleu_precisions(matches, totals) -> list[float]:
    """Modified precisions; orders above 1 with no matches use ``1 / (total + 1)``."""
    out = []
    for n, (m, t) in enumerate(zip(matches, totals), 1):
        if m == 0 and n > 1:
            out.append(1.0 / (t + 1))
        else:
            out.append(m / t if t else 0.0)
    return out


def bleu(hypotheses, references, max_n: int = 4) -> float:
    """Corpus BLEU with brevity penalty and add-one smoothing of empty higher orders."""
    if len(hypotheses) != len(references):
        raise ContractError(f"{len(hypotheses)} hypotheses vs {len(references)} references")
    if not hypotheses:
        raise ContractError("BLEU of an empty corpus")
    matches, totals, c, r = bleu_stats(hypotheses, references, max_n)
    precisions = bleu_precisions(matches, totals)
    if c == 0 or min(precisions) == 0.0:
        return 0.0
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    return 100.0 * bp * math.exp(sum(math.log(p) for p in precisions) / max_n)


def _f1(overlap: int, hyp_total: int, ref_total: int) -> tuple[float, float, float]:
    p = overlap / hyp_total if hyp_total else 0.0
    r = overlap / ref_total if ref_total else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f


def rouge_n_prf(hyp, ref, n: int) -> tuple[float, float, float]:
    if not ref:
        raise ContractError("ROUGE needs a nonempty reference")
    h, r = ngrams(hyp, n), ngrams(ref, n)
    overlap = sum(min(c, r[g]) for g, c in h.items())
    return _f1(overlap, sum(h.values()), sum(r.values()))


def rouge_n(hyp, ref, n: int = 1) -> float:
    return 100.0 * rouge_n_prf(hyp, ref, n)[2]


def lcs_length(a: Sequence, b: Sequence) -> int:
    row = [0] * (len(b) + 1)
    for x in a:
        prev = 0
        for j, y in enumerate(b, 1):
            cur = row[j]
            row[j] = prev + 1 if x == y else max(row[j], row[j - 1])
            prev = cur
    return row[-1]


def rouge_l(hyp, ref) -> float:
    if not ref:
        raise ContractError("ROUGE needs a nonempty reference")
    return 100.0 * _f1(lcs_length(hyp, ref), len(hyp), len(ref))[2]


def corpus_rouge(hypotheses, references) -> dict[str, float]:
    """Macro-averaged per-sentence ROUGE-1/2/L F1."""
    if len(hypotheses) != len(references) or not hypotheses:
        raise ContractError("ROUGE needs equally sized nonempty corpora")
    k = len(hypotheses)
    return {
        "rouge1": sum(rouge_n(h, r, 1) for h, r in zip(hypotheses, references)) / k,
        "rouge2": sum(rouge_n(h, r, 2) for h, r in zip(hypotheses, references)) / k,
        "rougeL": sum(rouge_l(h, r) for h, r in zip(hypotheses, references)) / k,
    }


def distinct_n(hypotheses, n: int = 1) -> float:
    """Unique n-grams over total n-grams across the corpus, in percent."""
    if not hypotheses:
        raise ContractError("distinct-n of an empty corpus")
    grams = [g for h in hypotheses for g in ngrams(h, n).elements()]
    return 100.0 * len(set(grams)) / len(grams) if grams else 0.0


@dataclass
class EvalReport:
    bleu: float
    rouge1: float
    rouge2: float
    rougeL: float
    distinct1: float
    distinct2: float
    precisions: list[float] = field(default_factory=list)
    sensitivity: list[tuple[float, float]] = field(default_factory=list)

    def to_text(self) -> str:
        lines = [
            f"bleu={self.bleu:.4f}",
            f"rouge1={self.rouge1:.4f}",
            f"rouge2={self.rouge2:.4f}",
            f"rougeL={self.rougeL:.4f}",
            f"distinct1={self.distinct1:.4f}",
            f"distinct2={self.distinct2:.4f}",
        ]
        lines += [f"precision{n}={100 * p:.4f}" for n, p in enumerate(self.precisions, 1)]
        return "\n".join(lines) + "\n"


def evaluate_corpus(hypotheses, references) -> EvalReport:
    matches, totals, _, _ = bleu_stats(hypotheses, references)
    rg = corpus_rouge(hypotheses, references)
    return EvalReport(
        bleu=bleu(hypotheses, references),
        rouge1=rg["rouge1"],
        rouge2=rg["rouge2"],
        rougeL=rg["rougeL"],
        distinct1=distinct_n(hypotheses, 1),
        distinct2=distinct_n(hypotheses, 2),
        precisions=bleu_precisions(matches, totals),
    )


def decode_batches(model, batches, noise_sigma: float = 0.0, noise_rng=None):
    """Greedy hypotheses and EOS-stripped references (as id lists) for batches."""
    from .model import EOS, translate

    hyps, refs = [], []
    for b in batches:
        hyps.extend(translate(model, b.src, b.src_mask, noise_sigma=noise_sigma, noise_rng=noise_rng))
        for row, m in zip(b.tgt, b.tgt_mask):
            refs.append([int(t) for t in row[m] if t != EOS])
    return hyps, refs


def parse_sigmas(text: str) -> list[float]:
    """``start:stop:step`` (inclusive) or a comma list."""
    if ":" in text:
        start, stop, step = (float(x) for x in text.split(":"))
        count = int(round((stop - start) / step)) + 1
        return [round(start + i * step, 10) for i in range(count)]
    return [float(x) for x in text.split(",") if x.strip()]


def sensitivity_sweep(model, batches, sigmas, seed: int = 0) -> list[tuple[float, float]]:
    """BLEU under Gaussian noise on decoder input embeddings, one point per sigma.

    Each sigma gets its own noise stream derived from ``(seed, index)``.
    """
    sigmas = list(sigmas)
    if not sigmas or sigmas[0] != 0 or any(b < a for a, b in zip(sigmas, sigmas[1:])):
        raise ContractError("sigmas must be nondecreasing and start at 0")
    curve = []
    for i, sigma in enumerate(sigmas):
        rng = np.random.default_rng([seed, i])
        hyps, refs = decode_batches(model, batches, sigma, rng)
        curve.append((sigma, bleu(hyps, refs)))
    return curve


def curve_to_csv(curve) -> str:
    return "sigma,bleu\n" + "".join(f"{s:.2f},{b:.4f}\n" for s, b in curve)
