"""Corpus-level BLEU, METEOR, ROUGE-L and CIDEr, plus a finite-population sample size."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

from nltk.stem import PorterStemmer

Tokens = Sequence[str]

METEOR_ALPHA = 0.9
METEOR_GAMMA = 0.5
METEOR_BETA = 3.0
ROUGE_BETA = 1.2


@dataclass(frozen=True)
class EvalPair:
    candidate: tuple[str, ...]
    references: tuple[tuple[str, ...], ...]

    def __post_init__(self):
        if not self.references:
            raise ValueError("every candidate needs at least one reference")


def make_pairs(candidates: Sequence[Tokens | str], references: Sequence) -> list[EvalPair]:
    """Align candidates with references.

    A string is one whitespace-separated sentence and a list of strings is one
    token list. Several references per candidate are given as a tuple of
    sentences or a list of token lists, e.g. ``("a b", "a c")`` or
    ``[["a", "b"], ["a", "c"]]``.
    """
    if len(candidates) != len(references):
        raise ValueError(f"{len(candidates)} candidates but {len(references)} references")

    def toks(s) -> tuple[str, ...]:
        return tuple(s.split()) if isinstance(s, str) else tuple(s)

    pairs = []
    for cand, refs in zip(candidates, references):
        if isinstance(refs, str) or (isinstance(refs, list) and all(isinstance(t, str) for t in refs)):
            refs = [refs]
        pairs.append(EvalPair(toks(cand), tuple(toks(r) for r in refs)))
    return pairs


def _as_pairs(pairs) -> list[EvalPair]:
    pairs = list(pairs)
    if not pairs:
        raise ValueError("empty corpus")
    return pairs


def ngrams(tokens: Tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


# ---------------------------------------------------------------- BLEU


def brevity_penalty(candidate_len: int, reference_len: int) -> float:
    if candidate_len > reference_len:
        return 1.0
    if candidate_len == 0:
        return 0.0
    return math.exp(1.0 - reference_len / candidate_len)


def modified_precisions(pairs: Iterable[EvalPair], max_n: int = 4) -> list[tuple[int, int]]:
    """(clipped matches, candidate n-grams) per order, summed over the corpus."""
    totals = [[0, 0] for _ in range(max_n)]
    for pair in pairs:
        for n in range(1, max_n + 1):
            cand = ngrams(pair.candidate, n)
            ceiling: Counter = Counter()
            for ref in pair.references:
                ceiling |= ngrams(ref, n)
            totals[n - 1][0] += sum(min(c, ceiling[g]) for g, c in cand.items())
            totals[n - 1][1] += sum(cand.values())
    return [(m, t) for m, t in totals]


def _closest_ref_len(pair: EvalPair) -> int:
    c = len(pair.candidate)
    return min((abs(len(r) - c), len(r)) for r in pair.references)[1]


def bleu(pairs: Iterable[EvalPair], max_n: int = 4) -> float:
    """Corpus BLEU with uniform weights and no smoothing, in [0, 1]."""
    pairs = _as_pairs(pairs)
    cand_len = sum(len(p.candidate) for p in pairs)
    if cand_len == 0:
        return 0.0
    ref_len = sum(_closest_ref_len(p) for p in pairs)
    precisions = modified_precisions(pairs, max_n)
    if any(m == 0 for m, _ in precisions):
        return 0.0
    log_p = sum(math.log(m / t) for m, t in precisions) / max_n
    return brevity_penalty(cand_len, ref_len) * math.exp(log_p)


# ---------------------------------------------------------------- METEOR

_stemmer = PorterStemmer()


@lru_cache(maxsize=65536)
def stem(token: str) -> str:
    return _stemmer.stem(token)


def align(candidate: Tokens, reference: Tokens) -> list[tuple[int, int]]:
    """Unigram alignment: exact matches first, then stem matches on what is left.

    Each candidate token takes the leftmost free reference token it matches.
    Returns (candidate index, reference index) pairs sorted by candidate index.
    """
    used_c: set[int] = set()
    used_r: set[int] = set()
    links = []
    for key in (lambda t: t, stem):
        ref_keys = [key(t) for t in reference]
        for i, tok in enumerate(candidate):
            if i in used_c:
                continue
            k = key(tok)
            for j, rk in enumerate(ref_keys):
                if j not in used_r and rk == k:
                    links.append((i, j))
                    used_c.add(i)
                    used_r.add(j)
                    break
    return sorted(links)


def count_chunks(links: Sequence[tuple[int, int]]) -> int:
    """Runs of alignments adjacent in both the candidate and the reference."""
    chunks = 0
    prev = None
    for i, j in links:
        if prev is None or i != prev[0] + 1 or j != prev[1] + 1:
            chunks += 1
        prev = (i, j)
    return chunks


def meteor_sentence(candidate: Tokens, reference: Tokens, alpha: float = METEOR_ALPHA,
                    gamma: float = METEOR_GAMMA, beta: float = METEOR_BETA) -> float:
    links = align(candidate, reference)
    m = len(links)
    if m == 0:
        return 0.0
    precision = m / len(candidate)
    recall = m / len(reference)
    f_mean = precision * recall / (alpha * precision + (1 - alpha) * recall)
    penalty = gamma * (count_chunks(links) / m) ** beta
    return (1 - penalty) * f_mean


def meteor(pairs: Iterable[EvalPair], alpha: float = METEOR_ALPHA) -> float:
    """Mean sentence METEOR (best reference per sentence), in [0, 1]."""
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    pairs = _as_pairs(pairs)
    return sum(max(meteor_sentence(p.candidate, r, alpha) for r in p.references) for p in pairs) / len(pairs)


# ---------------------------------------------------------------- ROUGE-L


def lcs_length(a: Tokens, b: Tokens) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l_sentence(candidate: Tokens, reference: Tokens, beta: float = ROUGE_BETA) -> float:
    lcs = lcs_length(candidate, reference)
    if lcs == 0:
        return 0.0
    p = lcs / len(reference)
    r = lcs / len(candidate)
    return (beta ** 2 + 1) * r * p / (r + beta ** 2 * p)


def rouge_l(pairs: Iterable[EvalPair], beta: float = ROUGE_BETA) -> float:
    """Mean sentence ROUGE-L F-measure (max over references), in [0, 1]."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    pairs = _as_pairs(pairs)
    return sum(max(rouge_l_sentence(p.candidate, r, beta) for r in p.references) for p in pairs) / len(pairs)


# ---------------------------------------------------------------- CIDEr


def document_frequencies(pairs: Sequence[EvalPair], n: int) -> Counter:
    """Number of pairs whose reference set contains each n-gram."""
    df: Counter = Counter()
    for p in pairs:
        seen = set()
        for ref in p.references:
            seen.update(ngrams(ref, n))
        df.update(seen)
    return df


def tfidf(tokens: Tokens, n: int, df: Counter, n_docs: int) -> dict:
    counts = ngrams(tokens, n)
    total = sum(counts.values())
    return {g: (c / total) * math.log(n_docs / max(1, df[g])) for g, c in counts.items()}


def cosine(u: dict, v: dict) -> float:
    nu = math.sqrt(sum(x * x for x in u.values()))
    nv = math.sqrt(sum(x * x for x in v.values()))
    if nu == 0 or nv == 0:
        return 0.0
    return sum(x * v.get(g, 0.0) for g, x in u.items()) / (nu * nv)


def cider_scores(pairs: Iterable[EvalPair], max_n: int = 4) -> list[float]:
    """Per-pair CIDEr: mean over n of the reference-averaged tf-idf cosine."""
    pairs = _as_pairs(pairs)
    n_docs = len(pairs)
    per_pair = [0.0] * n_docs
    for n in range(1, max_n + 1):
        df = document_frequencies(pairs, n)
        for i, p in enumerate(pairs):
            g_c = tfidf(p.candidate, n, df, n_docs)
            sim = sum(cosine(g_c, tfidf(r, n, df, n_docs)) for r in p.references) / len(p.references)
            per_pair[i] += sim / max_n
    return per_pair


def cider(pairs: Iterable[EvalPair], max_n: int = 4) -> float:
    """Corpus CIDEr, raw scale (no x10 factor)."""
    scores = cider_scores(pairs, max_n)
    return sum(scores) / len(scores)


# ---------------------------------------------------------------- sample size


def sample_size(e: float, z: float, population: int) -> int:
    """Minimum sample for proportion estimates (p = 0.5) with finite-population correction."""
    if not 0 < e < 1:
        raise ValueError("margin of error must lie in (0, 1)")
    if population < 1:
        raise ValueError("population must be >= 1")
    n0 = z * z * 0.25 / (e * e)
    return int(math.floor(n0 / (1 + (n0 - 1) / population) + 0.5))


# ---------------------------------------------------------------- reports


@dataclass(frozen=True)
class MetricReport:
    """Fractions in [0, 1] for BLEU/METEOR/ROUGE-L, raw CIDEr."""

    bleu: float
    meteor: float
    rouge_l: float
    cider: float
    n: int = 0

    HEADERS = ("BLEU(%)", "METEOR(%)", "ROUGE-L(%)", "CIDER")

    def row(self) -> tuple[float, float, float, float]:
        return (100 * self.bleu, 100 * self.meteor, 100 * self.rouge_l, self.cider)

    def to_tsv(self) -> str:
        values = "\t".join(f"{v:.3f}" for v in self.row())
        return "\t".join(self.HEADERS) + "\n" + values + "\n"

    def write_tsv(self, path: str | Path) -> None:
        Path(path).write_text(self.to_tsv(), encoding="utf-8")


def evaluate_corpus(model_outputs: Sequence, references: Sequence) -> MetricReport:
    """All four metrics for aligned candidates and references."""
    if len(model_outputs) != len(references):
        raise ValueError(f"{len(model_outputs)} outputs but {len(references)} references")
    if not model_outputs:
        raise ValueError("empty outputs list")
    pairs = make_pairs(model_outputs, references)
    return MetricReport(bleu(pairs), meteor(pairs), rouge_l(pairs), cider(pairs), len(pairs))


def read_lines(path: str | Path) -> list[str]:
    return Path(path).read_text(encoding="utf-8").splitlines()
