"""Entropy-error statistics and token-level similarity / diversity metrics.

All similarity metrics operate on token sequences (ints or strings) with any
end-of-sequence marker already stripped.  METEOR is an exact-match-only
variant; see ``meteor_lite``.
"""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass
from functools import lru_cache

from .exceptions import DomainError

BLEU_EPSILON = 1e-9
ROUGE_BETA = 1.2
CIDER_MAX_N = 4

METRIC_CONFIG = {
    "bleu": {"max_n": 4, "smoothing": "add-epsilon on zero counts", "epsilon": BLEU_EPSILON},
    "rouge_l": {"beta": ROUGE_BETA},
    "cider": {"max_n": CIDER_MAX_N, "idf": "ln(N / max(df, 1))", "scale": 10.0},
    "meteor_lite": {
        "alpha_weighting": "10PR/(R+9P)",
        "penalty": "0.5*(chunks/matches)^3",
        "deviation": "exact unigram matching only; no stemming or synonym stages",
    },
    "similarity_reference": "source question",
}


def entropy_error_stats(pairs):
    """Mean and population std of ``|E_T - E_G|`` over ``(E_T, E_G)`` pairs."""
    pairs = list(pairs)
    if not pairs:
        raise DomainError("entropy_error_stats needs at least one pair")
    errs = [abs(t - g) for t, g in pairs]
    mean = sum(errs) / len(errs)
    var = sum((e - mean) ** 2 for e in errs) / len(errs)
    return mean, math.sqrt(var)


def ngrams(seq, n):
    return Counter(tuple(seq[i : i + n]) for i in range(len(seq) - n + 1))


def bleu4(candidate, references):
    """Sentence BLEU-4 with add-epsilon smoothing of zero n-gram counts."""
    candidate = list(candidate)
    if not candidate:
        raise DomainError("candidate must be nonempty")
    references = [list(r) for r in references]
    if not references:
        raise DomainError("bleu4 needs at least one reference")
    log_p = 0.0
    for n in range(1, 5):
        cand = ngrams(candidate, n)
        max_ref = Counter()
        for ref in references:
            for g, c in ngrams(ref, n).items():
                max_ref[g] = max(max_ref[g], c)
        clipped = sum(min(c, max_ref[g]) for g, c in cand.items())
        total = sum(cand.values())
        log_p += math.log(clipped or BLEU_EPSILON) - math.log(total or BLEU_EPSILON)
    c = len(candidate)
    r = min((abs(len(ref) - c), len(ref)) for ref in references)[1]
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    return bp * math.exp(log_p / 4)


def lcs_length(a, b):
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(candidate, reference, beta=ROUGE_BETA):
    candidate, reference = list(candidate), list(reference)
    if not candidate or not reference:
        raise DomainError("rouge_l inputs must be nonempty")
    lcs = lcs_length(candidate, reference)
    if lcs == 0:
        return 0.0
    p, r = lcs / len(candidate), lcs / len(reference)
    return (1 + beta**2) * r * p / (r + beta**2 * p)


def _count_chunks(alignment):
    """Chunks in an alignment given as sorted (cand_pos, ref_pos) pairs."""
    chunks = 0
    prev = None
    for ci, ri in alignment:
        if prev is None or ci != prev[0] + 1 or ri != prev[1] + 1:
            chunks += 1
        prev = (ci, ri)
    return chunks


def min_chunk_alignment(candidate, reference):
    """Maximum exact unigram matching with the fewest chunks.

    Returns ``(matches, chunks)``.  Every token type t is matched exactly
    ``min(count_cand(t), count_ref(t))`` times; among those alignments the
    chunk count is minimized by a memoized search over candidate positions.
    """
    cand, ref = tuple(candidate), tuple(reference)
    need = Counter()
    cc, rc = Counter(cand), Counter(ref)
    for t in cc:
        need[t] = min(cc[t], rc[t])
    matches = sum(need.values())
    if matches == 0:
        return 0, 0
    ref_pos = {}
    for j, t in enumerate(ref):
        ref_pos.setdefault(t, []).append(j)
    # candidate positions still to be considered for each token, to know
    # whether skipping a position is still feasible
    remaining = [Counter(cand[i:]) for i in range(len(cand) + 1)]

    @lru_cache(maxsize=None)
    def best(i, used, prev_ref, still_needed):
        # used: frozenset of matched ref positions; prev_ref: ref pos matched at i-1 or -2
        if i == len(cand):
            return 0
        t = cand[i]
        need_left = dict(still_needed)
        result = math.inf
        k = need_left.get(t, 0)
        if k < remaining[i][t]:
            # skipping leaves enough later occurrences of t
            result = best(i + 1, used, -2, still_needed)
        if k > 0:
            new_need = tuple(sorted((tok, c - (tok == t)) for tok, c in still_needed))
            for j in ref_pos[t]:
                if j in used:
                    continue
                cost = 0 if prev_ref >= 0 and j == prev_ref + 1 else 1
                result = min(result, cost + best(i + 1, used | {j}, j, new_need))
        return result

    chunks = best(0, frozenset(), -2, tuple(sorted(need.items())))
    return matches, chunks


def meteor_lite(candidate, reference):
    """Exact-match METEOR: F_mean = 10PR/(R+9P), penalty 0.5*(chunks/matches)^3."""
    candidate, reference = list(candidate), list(reference)
    if not candidate or not reference:
        raise DomainError("meteor_lite inputs must be nonempty")
    matches, chunks = min_chunk_alignment(candidate, reference)
    if matches == 0:
        return 0.0
    p, r = matches / len(candidate), matches / len(reference)
    f_mean = 10 * p * r / (r + 9 * p)
    penalty = 0.5 * (chunks / matches) ** 3
    return f_mean * (1 - penalty)


def _tfidf(counts, df, n_docs):
    total = sum(counts.values())
    return {g: (c / total) * math.log(n_docs / max(df.get(g, 0), 1)) for g, c in counts.items()}


def _cosine(a, b):
    dot = sum(v * b.get(g, 0.0) for g, v in a.items())
    na = math.sqrt(sum(v * v for v in a.values()))
    nb = math.sqrt(sum(v * v for v in b.values()))
    if na == 0 or nb == 0:
        return 0.0
    return dot / (na * nb)


def cider_scores(candidates, references):
    """Per-item CIDEr for parallel lists of candidates and reference lists.

    The corpus is the set of items; document frequency of an n-gram is the
    number of items whose references contain it.
    """
    if len(candidates) != len(references):
        raise DomainError("candidates and references differ in length")
    n_docs = len(references)
    if n_docs < 2:
        raise DomainError("CIDEr needs a corpus of at least 2 items (IDF is zero otherwise)")
    refs = [[list(r) for r in rs] for rs in references]
    scores = [0.0] * n_docs
    for n in range(1, CIDER_MAX_N + 1):
        df = Counter()
        for rs in refs:
            df.update(set().union(*(ngrams(r, n).keys() for r in rs)) if rs else set())
        for i, (cand, rs) in enumerate(zip(candidates, refs)):
            c = ngrams(list(cand), n)
            if not c or not rs:
                continue
            vc = _tfidf(c, df, n_docs)
            sims = [_cosine(vc, _tfidf(ngrams(r, n), df, n_docs)) if len(r) >= n else 0.0 for r in rs]
            scores[i] += sum(sims) / len(rs) / CIDER_MAX_N
    return [10.0 * s for s in scores]


def cider(candidates, references):
    scores = cider_scores(candidates, references)
    return sum(scores) / len(scores)


def diversity(questions):
    return len({tuple(q) for q in questions})


@dataclass
class MetricsReport:
    mean_abs_entropy_error: float
    std_abs_entropy_error: float
    bleu4: float
    cider: float
    meteor_lite: float
    rouge_l: float
    diversity: int
    n_samples: int

    def to_dict(self):
        return {**asdict(self), "metric_config": METRIC_CONFIG}


def evaluate(records):
    """MetricsReport over records with E_T, E_G, source and generated tokens.

    ``records`` items need ``target_entropy``, ``generated_entropy``,
    ``source`` and ``generated`` attributes or keys; token sequences should
    already be stripped of end markers.
    """
    records = list(records)
    get = (lambda r, k: r[k]) if records and isinstance(records[0], dict) else getattr
    mean, std = entropy_error_stats([(get(r, "target_entropy"), get(r, "generated_entropy")) for r in records])
    gens = [list(get(r, "generated")) for r in records]
    srcs = [list(get(r, "source")) for r in records]
    n = len(records)
    # an empty generation (immediate end token) scores zero similarity
    bleu = sum(bleu4(g, [s]) if g else 0.0 for g, s in zip(gens, srcs)) / n
    rouge = sum(rouge_l(g, s) if g else 0.0 for g, s in zip(gens, srcs)) / n
    meteor = sum(meteor_lite(g, s) if g else 0.0 for g, s in zip(gens, srcs)) / n
    cid = cider(gens, [[s] for s in srcs]) if n >= 2 else 0.0
    return MetricsReport(mean, std, bleu, cid, meteor, rouge, diversity(gens), n)
