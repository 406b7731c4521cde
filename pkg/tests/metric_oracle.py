"""Brute-force metric oracles, written independently of ``metx.metrics``.

Everything is explicit loops over token lists: no Counters, no shared
helpers.  ``python tests/metric_oracle.py`` regenerates the golden file.
"""

import json
import math
import os

GOLDEN = os.path.join(os.path.dirname(__file__), "golden", "metrics_golden.json")

PAIRS = [
    ("a b c", "a b d"),
    ("the cat sat", "the cat ran"),
    ("a b c d", "a c d"),
    ("there is a red disc in the upper left .", "there is a red ring in the upper left ."),
    ("the upper left is clear .", "the upper left is clear ."),
    ("there is a blue square in the lower right .", "the lower right is clear ."),
    ("x y z", "p q r"),
    ("a a a a", "a a"),
    ("a b a b a b", "b a b a"),
    ("one two three four five six", "one two three four five six seven"),
    ("the lower left is clear . the lower right is clear .",
     "the lower right is clear . the lower left is clear ."),
    ("green cross", "there is a green cross in the upper right ."),
    ("there is a green cross in the upper right .", "green cross"),
    ("a b c d e f g h", "h g f e d c b a"),
    ("red red blue", "red blue blue"),
    ("there is a red square in the upper left . the upper right is clear .",
     "there is a red square in the upper left . there is a blue disc in the upper right ."),
    ("is clear", "the upper left is clear ."),
    ("a", "a"),
    ("a b", "b a"),
    ("the the the the the", "the cat is on the mat"),
]


def grams(toks, n):
    out = []
    for i in range(len(toks) - n + 1):
        out.append(tuple(toks[i:i + n]))
    return out


def count(items, g):
    c = 0
    for x in items:
        if x == g:
            c += 1
    return c


def idf_oracle(corpus_texts, g):
    n_docs = len(corpus_texts)
    df = 0
    for t in corpus_texts:
        if g in grams(t.split(), len(g)):
            df += 1
    return math.log((n_docs + 1) / (df + 1))


def cider_oracle(cand, ref, corpus_texts):
    c, r = cand.split(), ref.split()
    total = 0.0
    for n in range(1, 5):
        cg, rg = grams(c, n), grams(r, n)
        keys = []
        for g in cg + rg:
            if g not in keys:
                keys.append(g)
        vc = [count(cg, g) * idf_oracle(corpus_texts, g) for g in keys]
        vr = [count(rg, g) * idf_oracle(corpus_texts, g) for g in keys]
        dot = sum(a * b for a, b in zip(vc, vr))
        nc = math.sqrt(sum(a * a for a in vc))
        nr = math.sqrt(sum(b * b for b in vr))
        total += dot / (nc * nr) if nc > 0 and nr > 0 else 0.0
    return 10.0 * total / 4


def bleu_oracle(cands, refs, n_max=4):
    log_sum = 0.0
    c_len = sum(len(c.split()) for c in cands)
    r_len = sum(len(r.split()) for r in refs)
    for n in range(1, n_max + 1):
        m = t = 0
        for cand, ref in zip(cands, refs):
            cg, rg = grams(cand.split(), n), grams(ref.split(), n)
            seen = []
            for g in cg:
                if g in seen:
                    continue
                seen.append(g)
                m += min(count(cg, g), count(rg, g))
            t += len(cg)
        if m == 0:
            return 0.0
        log_sum += math.log(m / t)
    bp = 1.0 if c_len >= r_len else math.exp(1 - r_len / c_len)
    return bp * math.exp(log_sum / n_max)


def lcs_oracle(a, b):
    table = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            if a[i - 1] == b[j - 1]:
                table[i][j] = table[i - 1][j - 1] + 1
            else:
                table[i][j] = max(table[i - 1][j], table[i][j - 1])
    return table[-1][-1]


def rouge_oracle(cand, ref, beta=1.2):
    c, r = cand.split(), ref.split()
    lcs = lcs_oracle(c, r)
    if lcs == 0:
        return 0.0
    p, rec = lcs / len(c), lcs / len(r)
    return (1 + beta ** 2) * p * rec / (rec + beta ** 2 * p)


def golden_values():
    corpus = [t for pair in PAIRS for t in pair]
    rows = []
    for cand, ref in PAIRS:
        rows.append({
            "candidate": cand, "reference": ref,
            "cider": cider_oracle(cand, ref, corpus),
            "bleu1": bleu_oracle([cand], [ref], 1),
            "bleu4": bleu_oracle([cand], [ref], 4),
            "rouge_l": rouge_oracle(cand, ref),
        })
    cands, refs = [p[0] for p in PAIRS], [p[1] for p in PAIRS]
    return {"pairs": rows, "corpus_bleu4": bleu_oracle(cands, refs, 4),
            "corpus_bleu1": bleu_oracle(cands, refs, 1)}


if __name__ == "__main__":
    os.makedirs(os.path.dirname(GOLDEN), exist_ok=True)
    with open(GOLDEN, "w") as fh:
        json.dump(golden_values(), fh, indent=1)
        fh.write("\n")
