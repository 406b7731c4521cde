"""BLEU, ROUGE-L and CIDEr over whitespace tokens, plus expert voting.

CIDEr here is the plain variant: per n-gram order, cosine similarity of
TF-IDF vectors, averaged over references and over n = 1..4, times 10.
IDF is ``ln((|C| + 1) / (df + 1))``: an n-gram present in every document of
the IDF corpus carries no weight, and unseen n-grams get ``ln(|C| + 1)``.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Sequence


def tokens(text) -> list:
    return text.split() if isinstance(text, str) else list(text)


def ngrams(toks: Sequence, n: int) -> Counter:
    return Counter(tuple(toks[i:i + n]) for i in range(len(toks) - n + 1))


def ngram_profile(text, n_max: int = 4) -> dict:
    toks = tokens(text)
    return {n: ngrams(toks, n) for n in range(1, n_max + 1)}


@dataclass
class IdfTable:
    df: Counter
    n_docs: int

    def __call__(self, gram: tuple) -> float:
        return math.log((self.n_docs + 1) / (self.df.get(gram, 0) + 1))

    @classmethod
    def from_corpus(cls, texts: Sequence, n_max: int = 4) -> "IdfTable":
        df = Counter()
        for t in texts:
            prof = ngram_profile(t, n_max)
            for n in prof:
                df.update(prof[n].keys())
        return cls(df=df, n_docs=len(texts))


def _tfidf(counts: Counter, idf: IdfTable) -> dict:
    return {g: c * idf(g) for g, c in counts.items()}


def _cosine(a: dict, b: dict) -> float:
    dot = sum(v * b[g] for g, v in a.items() if g in b)
    na = sum(v * v for v in a.values())
    nb = sum(v * v for v in b.values())
    if na == 0 or nb == 0:
        return 0.0
    # sqrt(x*x) == x exactly, so identical vectors give exactly 1
    return dot / math.sqrt(na * nb)


def cider(candidate, references: Sequence, idf: IdfTable, n_max: int = 4) -> float:
    cand = ngram_profile(candidate, n_max)
    refs = [ngram_profile(r, n_max) for r in references]
    total = 0.0
    for n in range(1, n_max + 1):
        vc = _tfidf(cand[n], idf)
        total += sum(_cosine(vc, _tfidf(r[n], idf)) for r in refs) / len(refs)
    return 10.0 * total / n_max


def corpus_cider(candidates: Sequence, references: Sequence, idf: IdfTable | None = None) -> float:
    """Mean per-sample CIDEr; ``references[i]`` is a text or list of texts.
    IDF defaults to the reference corpus."""
    refs = [[r] if isinstance(r, str) else list(r) for r in references]
    if idf is None:
        idf = IdfTable.from_corpus([t for rs in refs for t in rs])
    return sum(cider(c, r, idf) for c, r in zip(candidates, refs)) / len(candidates)


def bleu(candidates: Sequence, references: Sequence, n_max: int = 4) -> float:
    """Corpus BLEU-``n_max``: clipped n-gram precision, geometric mean, brevity
    penalty.  ``references[i]`` is a text or a list of texts."""
    if len(candidates) == 0:
        raise ValueError("bleu: empty corpus")
    if len(candidates) != len(references):
        raise ValueError("bleu: candidate and reference lists differ in length")
    matched = [0] * n_max
    total = [0] * n_max
    c_len = r_len = 0
    for cand, ref in zip(candidates, references):
        ct = tokens(cand)
        rts = [tokens(ref)] if isinstance(ref, str) else [tokens(r) for r in ref]
        c_len += len(ct)
        # closest reference length, shorter wins ties
        r_len += min((abs(len(r) - len(ct)), len(r)) for r in rts)[1]
        for n in range(1, n_max + 1):
            cg = ngrams(ct, n)
            best = Counter()
            for r in rts:
                best |= ngrams(r, n)
            matched[n - 1] += sum(min(c, best[g]) for g, c in cg.items())
            total[n - 1] += max(len(ct) - n + 1, 0)
    if min(matched) == 0:
        return 0.0
    log_p = sum(math.log(m / t) for m, t in zip(matched, total)) / n_max
    bp = 1.0 if c_len >= r_len else math.exp(1 - r_len / c_len)
    return bp * math.exp(log_p)


def sentence_bleu(candidate, reference, n_max: int = 4) -> float:
    """Single-pair BLEU with add-one smoothing for n >= 2 (diagnostics)."""
    ct, rt = tokens(candidate), tokens(reference)
    if not ct:
        return 0.0
    log_p = 0.0
    for n in range(1, n_max + 1):
        cg, rg = ngrams(ct, n), ngrams(rt, n)
        m = sum(min(c, rg[g]) for g, c in cg.items())
        t = max(len(ct) - n + 1, 0)
        if n > 1:
            m, t = m + 1, t + 1
        if m == 0:
            return 0.0
        log_p += math.log(m / t)
    bp = 1.0 if len(ct) >= len(rt) else math.exp(1 - len(rt) / len(ct))
    return bp * math.exp(log_p / n_max)


def lcs_length(a: Sequence, b: Sequence) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate, reference, beta: float = 1.2) -> float:
    ct, rt = tokens(candidate), tokens(reference)
    lcs = lcs_length(ct, rt)
    if lcs == 0:
        return 0.0
    p, r = lcs / len(ct), lcs / len(rt)
    return (1 + beta ** 2) * p * r / (r + beta ** 2 * p)


def corpus_rouge_l(candidates: Sequence, references: Sequence) -> float:
    return sum(rouge_l(c, r) for c, r in zip(candidates, references)) / len(candidates)


def vote(reports: Sequence) -> tuple:
    """Consensus vote: each report scores the sum of its CIDEr against every
    other report, with IDF taken from the reports themselves.  Returns
    ``(winner, scores)``; ties go to the lowest index."""
    M = len(reports)
    if M == 0:
        raise ValueError("vote: no reports")
    if M == 1:
        return 0, [0.0]
    idf = IdfTable.from_corpus(reports)
    scores = [sum(cider(reports[i], [reports[j]], idf) for j in range(M) if j != i)
              for i in range(M)]
    winner = max(range(M), key=lambda i: (scores[i], -i))
    return winner, scores
