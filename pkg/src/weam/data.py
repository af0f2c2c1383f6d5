"""Vocabularies, parallel corpora, batching and the synthetic synonym tasks."""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import AlignmentError, ConfigurationError, EncodingError

log = logging.getLogger(__name__)

PAD, UNK, EOS = "<pad>", "<unk>", "<eos>"
RESERVED = (PAD, UNK, EOS)
PAD_ID, UNK_ID, EOS_ID = 0, 1, 2


class Vocab:
    def __init__(self, tokens: Sequence[str] = (), min_freq: int = 1):
        self.min_freq = min_freq
        self.itos = list(RESERVED) + [t for t in tokens if t not in RESERVED]
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ConfigurationError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.itos == other.itos

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.stoi.get(t, UNK_ID) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.itos[i] for i in ids]

    def to_text(self) -> str:
        return "".join(t + "\n" for t in self.itos[len(RESERVED) :])

    @classmethod
    def from_text(cls, text: str) -> "Vocab":
        return cls([line for line in text.split("\n") if line])

    def save(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


def build_vocab(sentences: Iterable[Sequence[str]], min_freq: int = 1) -> Vocab:
    """Tokens seen at least ``min_freq`` times, by descending count then lexicographically."""
    counts = Counter(t for s in sentences for t in s)
    kept = [t for t, n in counts.items() if n >= min_freq and t not in RESERVED]
    kept.sort(key=lambda t: (-counts[t], t))
    return Vocab(kept, min_freq)


@dataclass(frozen=True)
class ParallelCorpus:
    """Aligned (source, target) token lists per split."""

    splits: dict = field(default_factory=dict)

    def __getitem__(self, split: str) -> list[tuple[list[str], list[str]]]:
        return self.splits[split]

    def pairs(self, split: str = "train"):
        return self.splits[split]


@dataclass
class Batch:
    src: np.ndarray
    src_mask: np.ndarray
    tgt: np.ndarray
    tgt_mask: np.ndarray
    truncated: int = 0

    @property
    def size(self) -> int:
        return self.src.shape[0]


def _pad(rows: list[list[int]]) -> tuple[np.ndarray, np.ndarray]:
    width = max(len(r) for r in rows)
    ids = np.full((len(rows), width), PAD_ID, dtype=np.int64)
    for i, r in enumerate(rows):
        ids[i, : len(r)] = r
    return ids, ids != PAD_ID


def encode_batch(pairs, vocab_src: Vocab, vocab_tgt: Vocab, max_len: int = 64) -> Batch:
    """Right-padded id arrays; targets get EOS appended and count against ``max_len``."""
    if not pairs:
        raise ConfigurationError("cannot batch zero pairs")
    srcs, tgts, cut = [], [], 0
    for src, tgt in pairs:
        s = vocab_src.encode(src)
        t = vocab_tgt.encode(tgt)
        if len(s) > max_len:
            s, cut = s[:max_len], cut + 1
        if len(t) + 1 > max_len:
            t, cut = t[: max_len - 1], cut + 1
        srcs.append(s)
        tgts.append(t + [EOS_ID])
    if cut:
        log.info("truncated %d sentences to max_len=%d", cut, max_len)
    src, src_mask = _pad(srcs)
    tgt, tgt_mask = _pad(tgts)
    return Batch(src, src_mask, tgt, tgt_mask, cut)


def make_batches(pairs, vocab_src, vocab_tgt, batch_size: int, max_len: int = 64, rng=None) -> list[Batch]:
    """Length-bucketed batches; with ``rng`` the batch order is shuffled."""
    order = sorted(range(len(pairs)), key=lambda i: (len(pairs[i][0]), len(pairs[i][1]), i))
    chunks = [order[i : i + batch_size] for i in range(0, len(order), batch_size)]
    if rng is not None:
        chunks = [chunks[i] for i in rng.permutation(len(chunks))]
    return [encode_batch([pairs[i] for i in c], vocab_src, vocab_tgt, max_len) for c in chunks]


# --------------------------------------------------------------------------
# synthetic tasks


@dataclass
class SyntheticTaskSpec:
    """Copy/reverse task over a vocabulary partly grouped into synonym classes.

    A source word fixes the synonym class of its target word; ``selector``
    picks the member: ``context`` by the id of the previous target word,
    ``position`` by the target position, ``random`` uniformly per token.  The first two are
    deterministic functions of the source, so the task stays learnable while
    every class member still occurs for a given source word.
    """

    task: str = "reverse"
    vocab_size: int = 50
    num_classes: int = 10
    class_size: int = 3
    min_len: int = 4
    max_len: int = 10
    train: int = 2000
    valid: int = 200
    test: int = 200
    seed: int = 0
    selector: str = "context"

    def __post_init__(self):
        if self.task not in ("copy", "reverse"):
            raise ConfigurationError(f"unknown task {self.task!r}")
        if self.selector not in ("context", "position", "random"):
            raise ConfigurationError(f"unknown selector {self.selector!r}")
        if self.class_size < 1 or self.num_classes < 0:
            raise ConfigurationError("synonym classes must be nonempty")
        if self.num_classes * self.class_size > self.vocab_size:
            raise ConfigurationError("synonym classes need more tokens than the vocabulary has")
        if not 1 <= self.min_len <= self.max_len:
            raise ConfigurationError("need 1 <= min_len <= max_len")

    def tokens(self) -> list[str]:
        width = len(str(self.vocab_size - 1))
        return [f"w{i:0{width}d}" for i in range(self.vocab_size)]

    def classes(self) -> list[list[str]]:
        """Synonym classes partitioning the vocabulary (leftovers are singletons)."""
        toks = self.tokens()
        k = self.class_size
        grouped = [toks[i * k : (i + 1) * k] for i in range(self.num_classes)]
        return grouped + [[t] for t in toks[self.num_classes * k :]]

    def to_text(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)}\n" for f in fields(self))

    @classmethod
    def from_text(cls, text: str) -> "SyntheticTaskSpec":
        known = {f.name: f.type for f in fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigurationError(f"line {lineno}: expected key=value, got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            key = key.replace("-", "_")
            if key not in known:
                raise ConfigurationError(f"unknown spec key {key!r}")
            values[key] = value if key in ("task", "selector") else _int(key, value)
        return cls(**values)


def _int(key: str, value: str) -> int:
    try:
        return int(value)
    except ValueError:
        raise ConfigurationError(f"spec key {key!r} needs an integer, got {value!r}") from None


def synonym_target(spec: SyntheticTaskSpec, source: Sequence[str], rng=None) -> list[str]:
    lookup = {t: cls for cls in spec.classes() for t in cls}
    index = {t: i for i, t in enumerate(spec.tokens())}
    order = list(reversed(source)) if spec.task == "reverse" else list(source)
    out: list[str] = []
    for j, tok in enumerate(order):
        members = lookup[tok]
        if spec.selector == "random":
            shift = int(rng.integers(len(members)))
        elif spec.selector == "context":
            shift = index[out[-1]] if out else 0
        else:
            shift = j
        out.append(members[shift % len(members)])
    return out


def gen_synthetic(spec: SyntheticTaskSpec) -> ParallelCorpus:
    """Deterministic corpus; no source sentence appears in more than one split."""
    rng = np.random.default_rng(spec.seed)
    toks = spec.tokens()
    seen: set[tuple[str, ...]] = set()
    splits = {}
    for name, count in (("train", spec.train), ("valid", spec.valid), ("test", spec.test)):
        pairs = []
        attempts = 0
        while len(pairs) < count:
            attempts += 1
            if attempts > 100 * (count + 1):
                raise ConfigurationError("cannot draw enough distinct sentences for this spec")
            n = int(rng.integers(spec.min_len, spec.max_len + 1))
            src = tuple(toks[i] for i in rng.integers(0, len(toks), size=n))
            if src in seen:
                continue
            seen.add(src)
            pairs.append((list(src), synonym_target(spec, src, rng)))
        splits[name] = pairs
    return ParallelCorpus(splits)


# --------------------------------------------------------------------------
# files


def _read_lines(path: Path) -> list[str]:
    try:
        text = path.read_bytes().decode("utf-8")
    except UnicodeDecodeError as exc:
        raise EncodingError(f"{path}: invalid UTF-8 at byte {exc.start}") from None
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    return lines


def load_parallel(src_path, tgt_path) -> list[tuple[list[str], list[str]]]:
    """Whitespace-tokenised pairs from two line-aligned UTF-8 files."""
    src_path, tgt_path = Path(src_path), Path(tgt_path)
    src, tgt = _read_lines(src_path), _read_lines(tgt_path)
    if len(src) != len(tgt):
        raise AlignmentError(f"{src_path} has {len(src)} lines but {tgt_path} has {len(tgt)}")
    pairs = []
    for i, (s, t) in enumerate(zip(src, tgt), 1):
        s_tok, t_tok = s.split(), t.split()
        if not s_tok or not t_tok:
            which = src_path if not s_tok else tgt_path
            raise AlignmentError(f"{which}:{i}: blank line")
        pairs.append((s_tok, t_tok))
    return pairs


def write_parallel(pairs, src_path, tgt_path) -> None:
    Path(src_path).write_text("".join(" ".join(s) + "\n" for s, _ in pairs), encoding="utf-8")
    Path(tgt_path).write_text("".join(" ".join(t) + "\n" for _, t in pairs), encoding="utf-8")
