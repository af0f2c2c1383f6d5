"""Command-line entry point: ``make-data``, ``train``, ``eval``, ``sensitivity``.

Configuration precedence is built-in defaults < ``--config`` file <
``WEAM_OUTPUT_DIR`` (output directory only) < command-line flags.  Flags are
the :class:`~weam.config.RunConfig` field names in kebab case.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig, parse_kv, substream
from .data import SyntheticTaskSpec, Vocab, build_vocab, encode_batch, gen_synthetic, load_parallel, write_parallel
from .errors import ConfigurationError, DivergenceError, WeamError
from .evaluation import EvalReport, curve_to_csv, decode_batches, evaluate_corpus, parse_sigmas, sensitivity_sweep
from .model import Seq2SeqVAE
from .training import fit

log = logging.getLogger("weam")

OUTPUT_ENV = "WEAM_OUTPUT_DIR"
CHECKPOINT_NAME = "checkpoint.bin"
SPLITS = ("train", "valid", "test")


# --------------------------------------------------------------------------
# configuration


def resolve_config(config_file=None, overrides: dict | None = None, env=None) -> RunConfig:
    cfg = RunConfig()
    if config_file:
        path = Path(config_file)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        cfg.update(parse_kv(path.read_text(encoding="utf-8")))
    env = os.environ if env is None else env
    if env.get(OUTPUT_ENV):
        cfg.output_dir = env[OUTPUT_ENV]
    if overrides:
        cfg.update(overrides)
    return cfg


def echo_config(cfg: RunConfig, name: str = "config.txt") -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / name
    path.write_text(cfg.to_text(), encoding="utf-8")
    return path


def _dtype(cfg: RunConfig):
    if cfg.precision not in ("float32", "float64"):
        raise ConfigurationError(f"precision must be float32 or float64, got {cfg.precision!r}")
    return np.dtype(cfg.precision)


def _split_paths(cfg: RunConfig, prefix: str) -> tuple[Path, Path]:
    base = Path(cfg.data_dir)
    return base / f"{prefix}.src", base / f"{prefix}.tgt"


def _require(paths) -> None:
    for p in paths:
        if not Path(p).is_file():
            raise FileNotFoundError(f"corpus file not found: {p}")


def _checkpoint_path(cfg: RunConfig) -> Path:
    return Path(cfg.checkpoint) if cfg.checkpoint else Path(cfg.output_dir) / CHECKPOINT_NAME


# --------------------------------------------------------------------------
# checkpoints <-> models


def build_checkpoint(params: dict, cfg: RunConfig, vocab_src: Vocab, vocab_tgt: Vocab, result=None):
    state = {}
    adam_m, adam_v = {}, {}
    if result is not None:
        state = {"final_step": result.final_step, "best_bleu": result.best_bleu, "skipped": result.skipped}
        if result.adam is not None:
            state["adam_step"] = result.adam.step
            adam_m, adam_v = result.adam.m, result.adam.v
        if result.scheduler is not None:
            state["scheduler"] = result.scheduler.get_state()
    meta = {
        "config": cfg.to_text(),
        "vocab_src": vocab_src.to_text(),
        "vocab_tgt": vocab_tgt.to_text(),
        "state": json.dumps(state, sort_keys=True),
    }
    return Checkpoint(dict(params), meta, dict(adam_m), dict(adam_v))


def restore_model(ckpt: Checkpoint):
    """Rebuild ``(model, config, vocab_src, vocab_tgt)`` from a checkpoint."""
    cfg = RunConfig.from_text(ckpt.meta["config"])
    vs, vt = Vocab.from_text(ckpt.meta["vocab_src"]), Vocab.from_text(ckpt.meta["vocab_tgt"])
    dtype = next(iter(ckpt.params.values())).dtype if ckpt.params else np.float32
    with ad.precision(dtype):
        model = Seq2SeqVAE(cfg.model_config(len(vs), len(vt)), np.random.default_rng(0))
    params = dict(model.named_parameters())
    if set(params) != set(ckpt.params):
        missing = sorted(set(params) ^ set(ckpt.params))
        raise ConfigurationError(f"checkpoint parameters do not match the model: {missing[:5]}")
    for name, p in params.items():
        if p.shape != ckpt.params[name].shape:
            raise ConfigurationError(f"shape mismatch for {name}: {p.shape} vs {ckpt.params[name].shape}")
        p.data = ckpt.params[name].copy()
    return model.eval(), cfg, vs, vt


def ordered_batches(pairs, vs: Vocab, vt: Vocab, batch_size: int, max_len: int):
    """Batches in corpus order, so hypotheses line up with the input file."""
    return [encode_batch(pairs[i : i + batch_size], vs, vt, max_len) for i in range(0, len(pairs), batch_size)]


# --------------------------------------------------------------------------
# commands


def cmd_make_data(spec_file=None, out_dir=None, overrides: dict | None = None) -> list[Path]:
    """Write ``{train,valid,test}.{src,tgt}`` plus ``spec.txt`` for a synthetic task."""
    text = ""
    if spec_file:
        path = Path(spec_file)
        if not path.is_file():
            raise FileNotFoundError(f"spec file not found: {path}")
        text = path.read_text(encoding="utf-8")
    if overrides:
        text += "".join(f"{k}={v}\n" for k, v in overrides.items())
    spec = SyntheticTaskSpec.from_text(text)
    out = Path(out_dir or os.environ.get(OUTPUT_ENV) or "data")
    out.mkdir(parents=True, exist_ok=True)
    (out / "spec.txt").write_text(spec.to_text(), encoding="utf-8")
    corpus = gen_synthetic(spec)
    written = []
    for split in SPLITS:
        src, tgt = out / f"{split}.src", out / f"{split}.tgt"
        write_parallel(corpus[split], src, tgt)
        written += [src, tgt]
    log.info("wrote %d files to %s", len(written), out)
    return written


def cmd_train(cfg: RunConfig):
    """Train from ``data_dir`` and write the best checkpoint and ``train.log``."""
    train_paths = _split_paths(cfg, cfg.train_prefix)
    _require(train_paths)
    valid_paths = _split_paths(cfg, cfg.valid_prefix)
    dtype = _dtype(cfg)
    out = Path(cfg.output_dir)
    echo_config(cfg)

    train = load_parallel(*train_paths)
    valid = load_parallel(*valid_paths) if all(p.is_file() for p in valid_paths) else None
    vs = build_vocab((s for s, _ in train), cfg.min_freq)
    vt = build_vocab((t for _, t in train), cfg.min_freq)
    log_path = out / "train.log"
    with ad.precision(dtype), log_path.open("w", encoding="utf-8") as fh:

        def record(line: str) -> None:
            fh.write(line + "\n")
            fh.flush()
            if "valid_bleu" in line:
                log.info(line)

        model = Seq2SeqVAE(cfg.model_config(len(vs), len(vt)), substream(cfg.seed, "init"))
        result = fit(model, train, vs, vt, cfg.train_config(), valid, on_record=record)
        fh.write(f"done steps={result.final_step} best_bleu={result.best_bleu:.6g} skipped={result.skipped}\n")

    ckpt_path = _checkpoint_path(cfg)
    ckpt_path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ckpt_path, build_checkpoint(result.best_params, cfg, vs, vt, result))
    return result, ckpt_path


def _load_for_eval(cfg: RunConfig):
    ckpt_path = _checkpoint_path(cfg)
    model, saved, vs, vt = restore_model(load_checkpoint(ckpt_path))
    paths = _split_paths(cfg, cfg.test_prefix)
    _require(paths)
    pairs = load_parallel(*paths)
    batches = ordered_batches(pairs, vs, vt, 64, model.config.max_len)
    return model, vs, vt, pairs, batches


def cmd_eval(cfg: RunConfig) -> EvalReport:
    """Greedy-decode the test split; write ``report.txt`` and ``hyps.txt``."""
    echo_config(cfg)
    model, vs, vt, pairs, batches = _load_for_eval(cfg)
    hyps, refs = decode_batches(model, batches)
    report = evaluate_corpus(hyps, refs)
    out = Path(cfg.output_dir)
    (out / "report.txt").write_text(report.to_text(), encoding="utf-8")
    (out / "hyps.txt").write_text("".join(" ".join(vt.decode(h)) + "\n" for h in hyps), encoding="utf-8")
    return report


def cmd_sensitivity(cfg: RunConfig) -> list[tuple[float, float]]:
    """BLEU under decoder-input noise for each sigma; write ``sensitivity.csv``."""
    echo_config(cfg)
    sigmas = parse_sigmas(cfg.sigmas)
    model, vs, vt, pairs, batches = _load_for_eval(cfg)
    curve = sensitivity_sweep(model, batches, sigmas, seed=substream_seed(cfg.seed, "sensitivity"))
    (Path(cfg.output_dir) / "sensitivity.csv").write_text(curve_to_csv(curve), encoding="utf-8")
    return curve


def substream_seed(seed: int, name: str) -> int:
    return int(substream(seed, name).integers(2**31))


# --------------------------------------------------------------------------
# argument parsing


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value config file")
    for f in fields(RunConfig):
        p.add_argument("--" + f.name.replace("_", "-"), dest=f.name, default=argparse.SUPPRESS, metavar=f.name.upper())


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="weam", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    md = sub.add_parser("make-data", help="generate a synthetic synonym corpus")
    md.add_argument("--spec", help="key=value task spec file")
    md.add_argument("--out", help="output directory (default: $%s or ./data)" % OUTPUT_ENV)
    md.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a spec key")

    for name, helptext in (
        ("train", "train a model"),
        ("eval", "evaluate a checkpoint on the test split"),
        ("sensitivity", "BLEU under Gaussian noise on decoder inputs"),
    ):
        _add_run_flags(sub.add_parser(name, help=helptext))
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "make-data":
            overrides = {}
            for item in args.set:
                if "=" not in item:
                    raise ConfigurationError(f"--set expects KEY=VALUE, got {item!r}")
                k, v = item.split("=", 1)
                overrides[k.strip()] = v.strip()
            for path in cmd_make_data(args.spec, args.out, overrides):
                print(path)
            return 0
        opts = {k: v for k, v in vars(args).items() if k not in ("command", "config", "verbose")}
        cfg = resolve_config(args.config, opts)
        if args.command == "train":
            result, path = cmd_train(cfg)
            print(f"best_bleu={result.best_bleu:.4f} steps={result.final_step} checkpoint={path}")
        elif args.command == "eval":
            sys.stdout.write(cmd_eval(cfg).to_text())
        else:
            sys.stdout.write(curve_to_csv(cmd_sensitivity(cfg)))
        return 0
    except DivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return 3
    except (WeamError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


__all__ = [
    "build_checkpoint",
    "cmd_eval",
    "cmd_make_data",
    "cmd_sensitivity",
    "cmd_train",
    "main",
    "resolve_config",
    "restore_model",
]
