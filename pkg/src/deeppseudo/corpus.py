"""Corpus loading, tokenisation, vocabularies, splitting and batching."""

from __future__ import annotations

import random
import re
import statistics
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

PAD, SOS, EOS, UNK, NUM, STR = "<pad>", "<sos>", "<eos>", "<unk>", "<NUM>", "<STR>"
SPECIALS = (PAD, SOS, EOS, UNK, NUM, STR)
PAD_ID, SOS_ID, EOS_ID, UNK_ID, NUM_ID, STR_ID = range(6)

# longest first so that e.g. '**=' wins over '**'
_OPERATORS = sorted(
    ["**=", "//=", ">>=", "<<=", "...", "==", "!=", "<=", ">=", "**", "//", "<<", ">>", "+=", "-=",
     "*=", "/=", "%=", "&=", "|=", "^=", "->", ":=", "<>"],
    key=len, reverse=True,
)
_NUMBER = re.compile(
    r"0[xX][0-9a-fA-F_]+[lL]?"
    r"|0[oO][0-7_]+|0[bB][01_]+"
    r"|(?:\d[\d_]*\.?[\d_]*|\.\d[\d_]*)(?:[eE][+-]?\d+)?[jJlL]?"
)
_STRING_PREFIX = re.compile(r"(?i)^(?:r|u|b|f|br|rb|fr|rf)$")


def _scan_string(line: str, i: int) -> int:
    """Return the index just past the string literal starting at ``line[i]``."""
    quote = line[i]
    delim = quote * 3 if line.startswith(quote * 3, i) else quote
    j = i + len(delim)
    while j < len(line):
        if line[j] == "\\":
            j += 2
            continue
        if line.startswith(delim, j):
            return j + len(delim)
        j += 1
    return len(line)


def preprocess_code(line: str) -> list[str]:
    """Tokenise one line of Python.

    Numbers become ``<NUM>``, quoted strings ``<STR>``, identifiers are
    lowercased and split on ``_``, operators and punctuation stay as tokens.
    ``#`` comments are dropped. Already-present ``<NUM>``/``<STR>`` tags are
    kept, which makes the function idempotent on its own joined output.
    """
    tokens: list[str] = []
    i, n = 0, len(line)
    prev_kind = "start"
    while i < n:
        ch = line[i]
        if ch.isspace():
            i += 1
            continue
        if ch == "#":
            break
        if line.startswith(NUM, i) or line.startswith(STR, i):
            tokens.append(line[i:i + 5])
            i += 5
            prev_kind = "atom"
            continue
        if ch in "'\"":
            i = _scan_string(line, i)
            tokens.append(STR)
            prev_kind = "atom"
            continue
        if ch.isdigit() or (ch == "." and i + 1 < n and line[i + 1].isdigit() and prev_kind != "atom"):
            m = _NUMBER.match(line, i)
            i = m.end()
            tokens.append(NUM)
            prev_kind = "atom"
            continue
        if ch.isalpha() or ch == "_":
            j = i
            while j < n and (line[j].isalnum() or line[j] == "_"):
                j += 1
            word = line[i:j]
            if j < n and line[j] in "'\"" and _STRING_PREFIX.match(word):
                i = _scan_string(line, j)
                tokens.append(STR)
            else:
                for part in word.split("_"):
                    if part[:1].isdigit():
                        # "_0" or "conv_2d": a bare digit run would read as a number next time
                        tokens.extend(preprocess_code(part))
                    elif part:
                        tokens.append(part.lower())
                i = j
            prev_kind = "atom"
            continue
        for op in _OPERATORS:
            if line.startswith(op, i):
                tokens.append(op)
                i += len(op)
                break
        else:
            tokens.append(ch)
            i += 1
        prev_kind = "atom" if ch in ")]}" else "op"
    return tokens


_TRAILING_PUNCT = ".,;:!?"


def preprocess_pseudo(line: str) -> list[str]:
    """Lowercase, split on whitespace, detach trailing punctuation."""
    tokens: list[str] = []
    for word in line.lower().split():
        tail: list[str] = []
        while len(word) > 1 and word[-1] in _TRAILING_PUNCT:
            tail.append(word[-1])
            word = word[:-1]
        tokens.append(word)
        tokens.extend(reversed(tail))
    return tokens


class Vocabulary:
    """Token <-> id map with the six specials at ids 0..5."""

    def __init__(self, tokens: Iterable[str] = (), min_frequency: int = 1):
        self.min_frequency = min_frequency
        self.itos: list[str] = list(SPECIALS)
        for tok in tokens:
            if tok not in SPECIALS:
                self.itos.append(tok)
        self.stoi = {tok: i for i, tok in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK_ID)

    def token(self, idx: int) -> str:
        return self.itos[idx]

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.itos) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls.from_list(lines)

    @classmethod
    def from_list(cls, itos: Sequence[str]) -> "Vocabulary":
        if tuple(itos[:len(SPECIALS)]) != SPECIALS:
            raise ValueError("vocabulary must start with the special tokens " + " ".join(SPECIALS))
        return cls(itos[len(SPECIALS):])


def build_vocab(sequences: Iterable[Sequence[str]], min_frequency: int = 2) -> Vocabulary:
    """Specials first, then tokens seen at least ``min_frequency`` times by
    descending frequency, ties broken lexicographically."""
    counts: Counter[str] = Counter()
    seen_any = False
    for seq in sequences:
        seen_any = True
        counts.update(tok for tok in seq if tok not in SPECIALS)
    if not seen_any:
        raise ValueError("cannot build a vocabulary from no sequences")
    kept = sorted((tok for tok, c in counts.items() if c >= min_frequency), key=lambda t: (-counts[t], t))
    return Vocabulary(kept, min_frequency=min_frequency)


def encode(tokens: Sequence[str], vocab: Vocabulary, add_sos_eos: bool = False) -> list[int]:
    ids = [vocab.id(t) for t in tokens]
    return [SOS_ID] + ids + [EOS_ID] if add_sos_eos else ids


def decode(ids: Iterable[int], vocab: Vocabulary) -> list[str]:
    """Map ids back to tokens, dropping PAD/SOS/EOS."""
    return [vocab.token(int(i)) for i in ids if int(i) not in (PAD_ID, SOS_ID, EOS_ID)]


@dataclass(frozen=True)
class RawPair:
    code_line: str
    pseudo_line: str
    index: int


@dataclass
class EncodedPair:
    code: list[int]
    pseudo: list[int]
    index: int = -1


@dataclass
class ParallelCorpus:
    train: list[EncodedPair]
    valid: list[EncodedPair]
    test: list[EncodedPair]
    src_vocab: Vocabulary
    tgt_vocab: Vocabulary
    raw: dict[str, list[RawPair]] = field(default_factory=dict)

    def split(self, name: str) -> list[EncodedPair]:
        return {"train": self.train, "valid": self.valid, "test": self.test}[name]


def read_pairs(code_path: str | Path, anno_path: str | Path) -> list[RawPair]:
    code_lines = Path(code_path).read_text(encoding="utf-8").splitlines()
    anno_lines = Path(anno_path).read_text(encoding="utf-8").splitlines()
    if len(code_lines) != len(anno_lines):
        raise ValueError(f"{code_path} has {len(code_lines)} lines but {anno_path} has {len(anno_lines)}")
    pairs = []
    for i, (c, a) in enumerate(zip(code_lines, anno_lines)):
        if c.strip() and a.strip():
            pairs.append(RawPair(c.rstrip("\n"), a.rstrip("\n"), i))
    return pairs


_SPLIT_NAMES = ("train", "valid", "test")


def find_corpus_files(corpus_dir: str | Path) -> dict:
    """Locate either pre-split ``{train,valid,test}.{code,anno}`` files or an
    aligned ``code.txt``/``anno.txt`` pair (``all.code``/``all.anno`` also accepted)."""
    d = Path(corpus_dir)
    if not d.is_dir():
        raise FileNotFoundError(f"corpus directory {d} does not exist")
    presplit = {s: (d / f"{s}.code", d / f"{s}.anno") for s in _SPLIT_NAMES}
    if all(c.exists() and a.exists() for c, a in presplit.values()):
        return {"presplit": presplit}
    for code_name, anno_name in (("code.txt", "anno.txt"), ("all.code", "all.anno")):
        if (d / code_name).exists() and (d / anno_name).exists():
            return {"single": (d / code_name, d / anno_name)}
    raise FileNotFoundError(f"{d} has neither code.txt/anno.txt nor {{train,valid,test}}.{{code,anno}}")


def split_pairs(pairs: Sequence, ratios=(0.8, 0.1, 0.1), seed: int = 0) -> tuple[list, list, list]:
    """Seeded shuffle then cut into train/valid/test by rounded ratios."""
    if len(pairs) < 3:
        raise ValueError(f"need at least 3 pairs to split, got {len(pairs)}")
    if abs(sum(ratios) - 1.0) > 1e-9 or any(r < 0 for r in ratios):
        raise ValueError(f"split ratios must be non-negative and sum to 1, got {ratios}")
    order = list(range(len(pairs)))
    random.Random(seed).shuffle(order)
    n = len(pairs)
    n_train = int(round(ratios[0] * n))
    n_valid = int(round(ratios[1] * n))
    shuffled = [pairs[i] for i in order]
    return shuffled[:n_train], shuffled[n_train:n_train + n_valid], shuffled[n_train + n_valid:]


def _encode_split(pairs: Sequence[RawPair], src_vocab: Vocabulary, tgt_vocab: Vocabulary) -> list[EncodedPair]:
    return [EncodedPair(encode(preprocess_code(p.code_line), src_vocab),
                        encode(preprocess_pseudo(p.pseudo_line), tgt_vocab, add_sos_eos=True), p.index)
            for p in pairs]


def split_corpus(pairs: Sequence[RawPair], ratios=(0.8, 0.1, 0.1), seed: int = 0,
                 min_frequency: int = 2, presplit: dict | None = None) -> ParallelCorpus:
    """Split raw pairs and build vocabularies from the training part only.

    ``presplit`` (name -> list of RawPair) bypasses the seeded shuffle.
    """
    if presplit is not None:
        train, valid, test = (list(presplit[s]) for s in _SPLIT_NAMES)
    else:
        train, valid, test = split_pairs(pairs, ratios, seed)
    src_vocab = build_vocab((preprocess_code(p.code_line) for p in train), min_frequency)
    tgt_vocab = build_vocab((preprocess_pseudo(p.pseudo_line) for p in train), min_frequency)
    return ParallelCorpus(
        _encode_split(train, src_vocab, tgt_vocab),
        _encode_split(valid, src_vocab, tgt_vocab),
        _encode_split(test, src_vocab, tgt_vocab),
        src_vocab, tgt_vocab,
        raw={"train": list(train), "valid": list(valid), "test": list(test)},
    )


def load_corpus(corpus_dir: str | Path, ratios=(0.8, 0.1, 0.1), seed: int = 0,
                min_frequency: int = 2) -> ParallelCorpus:
    """Read a corpus directory; pre-split train/valid/test files take precedence."""
    found = find_corpus_files(corpus_dir)
    if "presplit" in found:
        presplit = {s: read_pairs(*found["presplit"][s]) for s in _SPLIT_NAMES}
        return split_corpus([], seed=seed, min_frequency=min_frequency, presplit=presplit)
    return split_corpus(read_pairs(*found["single"]), ratios, seed, min_frequency)


@dataclass
class LengthStats:
    avg: float
    mode: int
    median: float
    under_20: float
    under_50: float
    under_100: float

    def as_row(self) -> dict:
        return {"avg": round(self.avg, 2), "mode": self.mode, "median": self.median,
                "<20": f"{100 * self.under_20:.2f}%", "<50": f"{100 * self.under_50:.2f}%",
                "<100": f"{100 * self.under_100:.2f}%"}


def corpus_stats(token_lists: Sequence[Sequence[str]]) -> LengthStats:
    """Length statistics of tokenised sequences; ties for the mode go to the shorter length."""
    lengths = [len(t) for t in token_lists]
    if not lengths:
        raise ValueError("no sequences to summarise")
    counts = Counter(lengths)
    top = max(counts.values())
    mode = min(length for length, c in counts.items() if c == top)
    n = len(lengths)
    return LengthStats(
        avg=sum(lengths) / n,
        mode=mode,
        median=statistics.median(lengths),
        under_20=sum(x < 20 for x in lengths) / n,
        under_50=sum(x < 50 for x in lengths) / n,
        under_100=sum(x < 100 for x in lengths) / n,
    )


@dataclass
class Batch:
    src: np.ndarray
    src_pad: np.ndarray
    tgt: np.ndarray
    tgt_pad: np.ndarray

    @property
    def size(self) -> int:
        return self.src.shape[0]


def pad_batch(seqs: Sequence[Sequence[int]], pad_id: int = PAD_ID, max_len: int | None = None):
    """Right-pad id lists into a matrix; returns (ids, mask) with mask True at pads."""
    if max_len is not None:
        seqs = [list(s)[:max_len] for s in seqs]
    width = max((len(s) for s in seqs), default=0)
    ids = np.full((len(seqs), width), pad_id, dtype=np.int64)
    mask = np.ones((len(seqs), width), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, :len(s)] = s
        mask[i, :len(s)] = False
    return ids, mask


def truncate_target(ids: Sequence[int], max_len: int) -> list[int]:
    """Cut an SOS ... EOS sequence to ``max_len`` while keeping the final EOS."""
    ids = list(ids)
    if len(ids) <= max_len:
        return ids
    return ids[:max_len - 1] + [EOS_ID]


def batch_iterator(split: Sequence[EncodedPair], batch_size: int = 12, max_src_len: int = 50,
                   max_tgt_len: int = 60, pad_id: int = PAD_ID, seed: int | None = 0,
                   epoch: int = 0) -> Iterator[Batch]:
    """Yield padded batches; order is shuffled per (seed, epoch) unless seed is None."""
    order = list(range(len(split)))
    if seed is not None:
        random.Random(f"{seed}:{epoch}").shuffle(order)
    for start in range(0, len(order), batch_size):
        chunk = [split[i] for i in order[start:start + batch_size]]
        src, src_pad = pad_batch([p.code[:max_src_len] or [UNK_ID] for p in chunk], pad_id)
        tgt, tgt_pad = pad_batch([truncate_target(p.pseudo, max_tgt_len) for p in chunk], pad_id)
        yield Batch(src, src_pad, tgt, tgt_pad)
