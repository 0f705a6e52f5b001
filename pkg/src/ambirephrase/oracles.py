"""Brute-force reference implementations used to cross-check the fast paths.

Nothing here shares code with ``metrics``; each oracle recomputes its quantity
by direct enumeration so that agreement is meaningful.
"""
from __future__ import annotations

import itertools
import math


def _grams(seq, n):
    return [tuple(seq[i : i + n]) for i in range(len(seq) - n + 1)]


def bleu4_oracle(candidate, references, eps=1e-9):
    cand = list(candidate)
    refs = [list(r) for r in references]
    precisions = []
    for n in range(1, 5):
        grams = _grams(cand, n)
        clipped = 0
        for g in set(grams):
            ref_max = max(_grams(r, n).count(g) for r in refs)
            clipped += min(grams.count(g), ref_max)
        num = clipped if clipped > 0 else eps
        den = len(grams) if len(grams) > 0 else eps
        precisions.append(num / den)
    geo = math.exp(sum(math.log(p) for p in precisions) / 4)
    c = len(cand)
    closest = sorted(refs, key=lambda r: (abs(len(r) - c), len(r)))[0]
    bp = 1.0 if c > len(closest) else math.exp(1 - len(closest) / c)
    return bp * geo


def _is_subsequence(sub, seq):
    it = iter(seq)
    return all(any(x == y for y in it) for x in sub)


def lcs_oracle(a, b):
    a, b = list(a), list(b)
    short, long_ = (a, b) if len(a) <= len(b) else (b, a)
    for k in range(len(short), 0, -1):
        for idx in itertools.combinations(range(len(short)), k):
            if _is_subsequence([short[i] for i in idx], long_):
                return k
    return 0


def rouge_l_oracle(candidate, reference, beta=1.2):
    lcs = lcs_oracle(candidate, reference)
    if lcs == 0:
        return 0.0
    p, r = lcs / len(candidate), lcs / len(reference)
    return (1 + beta**2) * r * p / (r + beta**2 * p)


def meteor_lite_oracle(candidate, reference):
    """Enumerate every maximum exact-match alignment and keep the fewest chunks."""
    cand, ref = list(candidate), list(reference)
    per_type = []
    for t in sorted(set(cand) & set(ref), key=repr):
        cpos = [i for i, x in enumerate(cand) if x == t]
        rpos = [j for j, y in enumerate(ref) if y == t]
        k = min(len(cpos), len(rpos))
        options = []
        for cs in itertools.combinations(cpos, k):
            for rs in itertools.permutations(rpos, k):
                options.append(list(zip(cs, rs)))
        per_type.append(options)
    if not per_type:
        return 0.0
    best_chunks = None
    matches = None
    for combo in itertools.product(*per_type):
        pairs = sorted(p for part in combo for p in part)
        matches = len(pairs)
        chunks = 1
        for (c0, r0), (c1, r1) in zip(pairs, pairs[1:]):
            if not (c1 == c0 + 1 and r1 == r0 + 1):
                chunks += 1
        if best_chunks is None or chunks < best_chunks:
            best_chunks = chunks
    p, r = matches / len(cand), matches / len(ref)
    f_mean = 10 * p * r / (r + 9 * p)
    return f_mean * (1 - 0.5 * (best_chunks / matches) ** 3)


def cider_oracle(candidates, references):
    """Mean CIDEr via explicit dense TF-IDF vectors over the corpus vocabulary."""
    n_docs = len(references)
    per_item = [0.0] * n_docs
    for n in range(1, 5):
        vocab = sorted(
            {g for rs in references for r in rs for g in _grams(list(r), n)}
            | {g for c in candidates for g in _grams(list(c), n)},
            key=repr,
        )
        idf = []
        for g in vocab:
            df = sum(1 for rs in references if any(g in _grams(list(r), n) for r in rs))
            idf.append(math.log(n_docs / max(df, 1)))

        def vec(seq):
            grams = _grams(list(seq), n)
            if not grams:
                return None
            return [grams.count(g) / len(grams) * w for g, w in zip(vocab, idf)]

        for i, (cand, rs) in enumerate(zip(candidates, references)):
            vc = vec(cand)
            total = 0.0
            for r in rs:
                vr = vec(r)
                if vc is None or vr is None:
                    continue
                na = math.sqrt(sum(x * x for x in vc))
                nb = math.sqrt(sum(x * x for x in vr))
                if na > 0 and nb > 0:
                    total += sum(x * y for x, y in zip(vc, vr)) / (na * nb)
            per_item[i] += total / len(rs) / 4
    return sum(10.0 * s for s in per_item) / n_docs


def diversity_oracle(questions):
    ordered = sorted(tuple(q) for q in questions)
    return sum(1 for i, q in enumerate(ordered) if i == 0 or q != ordered[i - 1])


def central_difference(f, x, index, step=1e-5):
    """Central finite difference of scalar ``f`` w.r.t. flat coordinate ``index`` of tensor ``x``."""
    flat = x.data.view(-1)
    orig = flat[index].item()
    flat[index] = orig + step
    up = float(f())
    flat[index] = orig - step
    down = float(f())
    flat[index] = orig
    return (up - down) / (2 * step)
