"""Corpus-level BLEU-1..4, METEOR (exact match), ROUGE-L and CIDEr.

Every metric takes a list of ``EvalPair``; strings are tokenized with the
same normalization as the model vocabulary (lowercase, punctuation split).
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass
from functools import lru_cache
from typing import Sequence

from .tokenizer import tokenize

ROUGE_BETA = 1.2
METEOR_ALPHA = 0.9
METEOR_BETA = 3.0
METEOR_GAMMA = 0.5


@dataclass(frozen=True)
class EvalPair:
    candidate: tuple
    references: tuple

    def __post_init__(self):
        cand = tokenize(self.candidate) if isinstance(self.candidate, str) else list(self.candidate)
        refs = [tokenize(r) if isinstance(r, str) else list(r) for r in self.references]
        if not refs:
            raise ValueError("each pair needs at least one reference")
        object.__setattr__(self, "candidate", tuple(cand))
        object.__setattr__(self, "references", tuple(tuple(r) for r in refs))


def make_pairs(candidates: Sequence, references: Sequence) -> list[EvalPair]:
    """Pair candidates with references; a reference entry may be one string or a list."""
    if len(candidates) != len(references):
        raise ValueError("%d candidates but %d reference sets" % (len(candidates), len(references)))
    return [EvalPair(c, (r,) if isinstance(r, str) else tuple(r)) for c, r in zip(candidates, references)]


def ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


# -- BLEU ---------------------------------------------------------------------

def bleu(pairs: Sequence[EvalPair], n: int = 4) -> float:
    """Unsmoothed corpus BLEU-n on a 0-100 scale."""
    if not pairs:
        raise ValueError("empty candidate corpus")
    if not 1 <= n <= 4:
        raise ValueError("n must be between 1 and 4")
    clipped = [0] * n
    totals = [0] * n
    cand_len = ref_len = 0
    for pair in pairs:
        cand = pair.candidate
        cand_len += len(cand)
        ref_len += min((abs(len(r) - len(cand)), len(r)) for r in pair.references)[1]
        for k in range(1, n + 1):
            counts = ngrams(cand, k)
            max_ref = Counter()
            for r in pair.references:
                max_ref |= ngrams(r, k)
            clipped[k - 1] += sum(min(c, max_ref[g]) for g, c in counts.items())
            totals[k - 1] += max(len(cand) - k + 1, 0)
    if min(clipped) == 0:
        return 0.0
    log_precision = sum(math.log(c / t) for c, t in zip(clipped, totals)) / n
    brevity = min(1.0, math.exp(1 - ref_len / cand_len))
    return 100.0 * brevity * math.exp(log_precision)


# -- ROUGE-L ------------------------------------------------------------------

def lcs_length(a: Sequence, b: Sequence) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l_pair(candidate: Sequence, references: Sequence[Sequence], beta: float = ROUGE_BETA) -> float:
    best = 0.0
    for ref in references:
        lcs = lcs_length(candidate, ref)
        if lcs == 0:
            continue
        p, r = lcs / len(candidate), lcs / len(ref)
        best = max(best, (1 + beta ** 2) * p * r / (r + beta ** 2 * p))
    return best


def rouge_l(pairs: Sequence[EvalPair]) -> float:
    if not pairs:
        raise ValueError("empty candidate corpus")
    return sum(rouge_l_pair(p.candidate, p.references) for p in pairs) / len(pairs)


# -- METEOR -------------------------------------------------------------------

def meteor_alignment(candidate: Sequence[str], reference: Sequence[str]) -> tuple[int, int]:
    """(matches, chunks) of the maximum exact-match alignment with fewest chunks.

    A chunk is a run of matches adjacent in both sentences. Among all
    one-to-one alignments with the maximum number of matches, the one that
    links the most adjacent pairs is found by memoized search.
    """
    cand, ref = tuple(candidate), tuple(reference)
    c_count, r_count = Counter(cand), Counter(ref)
    need = {w: min(c_count[w], r_count[w]) for w in c_count}
    m = sum(need.values())
    if m == 0:
        return 0, 0
    spare = {w: c_count[w] - need[w] for w in c_count}
    ref_pos = {w: [j for j, x in enumerate(ref) if x == w] for w in r_count}

    @lru_cache(maxsize=None)
    def best(i: int, prev: int, used: int, skipped: tuple) -> float:
        if i == len(cand):
            return 0
        w = cand[i]
        out = -math.inf
        k = _word_index[w]
        if skipped[k] < spare[w]:
            nxt = skipped[:k] + (skipped[k] + 1,) + skipped[k + 1:]
            out = best(i + 1, -1, used, nxt)
        for j in ref_pos.get(w, ()):
            if used >> j & 1:
                continue
            link = 1 if prev >= 0 and j == prev + 1 else 0
            out = max(out, link + best(i + 1, j, used | 1 << j, skipped))
        return out

    _word_index = {w: k for k, w in enumerate(c_count)}
    links = best(0, -1, 0, (0,) * len(c_count))
    return m, m - int(links)


def meteor_pair(candidate, references, alpha=METEOR_ALPHA, beta=METEOR_BETA, gamma=METEOR_GAMMA) -> float:
    best = 0.0
    for ref in references:
        m, chunks = meteor_alignment(candidate, ref)
        if m == 0:
            continue
        p, r = m / len(candidate), m / len(ref)
        f_mean = p * r / (alpha * p + (1 - alpha) * r)
        penalty = gamma * (chunks / m) ** beta
        best = max(best, f_mean * (1 - penalty))
    return best


def meteor(pairs: Sequence[EvalPair]) -> float:
    if not pairs:
        raise ValueError("empty candidate corpus")
    return sum(meteor_pair(p.candidate, p.references) for p in pairs) / len(pairs)


# -- CIDEr --------------------------------------------------------------------

def cider(pairs: Sequence[EvalPair], n: int = 4) -> float:
    """CIDEr over 1..n-grams on a 0-10 scale, IDF from the reference corpus."""
    if len(pairs) < 2:
        raise ValueError("corpus too small for IDF (need at least 2 pairs)")
    log_docs = math.log(len(pairs))
    df = Counter()
    for pair in pairs:
        seen = set()
        for ref in pair.references:
            for k in range(1, n + 1):
                seen.update(ngrams(ref, k))
        df.update(seen)

    def tfidf(tokens, k):
        return {g: c * (log_docs - math.log(max(1, df[g]))) for g, c in ngrams(tokens, k).items()}

    def norm(vec):
        return math.sqrt(sum(v * v for v in vec.values()))

    total = 0.0
    for pair in pairs:
        per_n = 0.0
        for k in range(1, n + 1):
            cvec = tfidf(pair.candidate, k)
            cnorm = norm(cvec)
            sims = 0.0
            for ref in pair.references:
                rvec = tfidf(ref, k)
                rnorm = norm(rvec)
                if cnorm == 0 or rnorm == 0:
                    continue
                dot = sum(min(v, rvec[g]) * rvec[g] for g, v in cvec.items() if g in rvec)
                sims += dot / (cnorm * rnorm)
            per_n += sims / len(pair.references)
        total += 10.0 * per_n / n
    return total / len(pairs)


# -- report -------------------------------------------------------------------

@dataclass
class ScoreReport:
    bleu1: float
    bleu2: float
    bleu3: float
    bleu4: float
    meteor: float
    rouge_l: float
    cider: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    def csv_header(self) -> str:
        return ",".join(asdict(self))

    def csv_row(self) -> str:
        return ",".join("%.6f" % v for v in asdict(self).values())


def evaluate(pairs: Sequence[EvalPair]) -> ScoreReport:
    return ScoreReport(bleu(pairs, 1), bleu(pairs, 2), bleu(pairs, 3), bleu(pairs, 4),
                       meteor(pairs), rouge_l(pairs), cider(pairs))
