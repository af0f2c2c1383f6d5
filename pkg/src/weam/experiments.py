"""Small end-to-end experiments on the synthetic synonym task.

These are the in-process counterparts of ``weam train`` / ``weam sensitivity``
used by the runners in ``scripts/`` and by the acceptance tests.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

from . import autodiff as ad
from .config import RunConfig, substream
from .data import SyntheticTaskSpec, build_vocab, gen_synthetic
from .evaluation import sensitivity_sweep
from .model import Seq2SeqVAE
from .cli import ordered_batches, substream_seed
from .training import TrainResult, fit


def toy_run_config(**overrides) -> RunConfig:
    """Desk-scale model: one layer of width 128, 20 epochs."""
    base = dict(d=128, layers=1, max_len=32, batch_size=32, epochs=20, warmup=200)
    base.update(overrides)
    return RunConfig(**base)


@dataclass
class ToyConfig:
    spec: SyntheticTaskSpec = field(default_factory=SyntheticTaskSpec)
    run: RunConfig = field(default_factory=toy_run_config)


@dataclass
class ToyOutcome:
    mode: str
    seed: int
    model: Seq2SeqVAE
    result: TrainResult
    seconds: float
    test_batches: list

    @property
    def valid_bleu(self) -> float:
        return self.result.best_bleu


def train_toy(cfg: ToyConfig, mode: str | None = None, seed: int | None = None, on_record=None) -> ToyOutcome:
    """Train one model on the synthetic corpus; the model holds its best parameters."""
    run = replace(cfg.run, mode=mode or cfg.run.mode, seed=cfg.run.seed if seed is None else seed)
    corpus = gen_synthetic(cfg.spec)
    vs = build_vocab((s for s, _ in corpus["train"]), run.min_freq)
    vt = build_vocab((t for _, t in corpus["train"]), run.min_freq)
    start = time.perf_counter()
    with ad.precision(run.precision):
        model = Seq2SeqVAE(run.model_config(len(vs), len(vt)), substream(run.seed, "init"))
        result = fit(model, corpus["train"], vs, vt, run.train_config(), corpus["valid"], on_record=on_record)
    seconds = time.perf_counter() - start
    for name, p in model.named_parameters():
        p.data = result.best_params[name].copy()
    model.eval()
    test = ordered_batches(corpus["test"], vs, vt, 64, model.config.max_len)
    return ToyOutcome(run.mode, run.seed, model, result, seconds, test)


def sensitivity(outcome: ToyOutcome, sigmas) -> list[tuple[float, float]]:
    """Test-split BLEU under decoder-input noise for a trained toy model."""
    return sensitivity_sweep(outcome.model, outcome.test_batches, sigmas, seed=substream_seed(outcome.seed, "sensitivity"))
