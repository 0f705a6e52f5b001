"""Fast self-checks run by ``ambirephrase verify``.

Each check returns ``(name, passed, detail)``; none of them needs trained
artifacts, so they can run on a fresh checkout.
"""
from __future__ import annotations

import math

import numpy as np
import torch

from . import metrics, oracles
from .harness import build_delta_samples
from .rephraser import (
    RephraserModel, decode_gumbel, decode_teacher_forced, encode, entropy_loss, sample_gumbel,
    total_loss, vqg_loss,
)
from .training import RephraseSample
from .vqa import VqaModel, entropy, pad_questions, predict


def check_entropy(seed=0):
    worst = 0.0
    for k in (2, 4, 16):
        worst = max(worst, abs(float(entropy(np.full(k, 1.0 / k))) - math.log(k)))
    onehot = float(entropy(np.eye(5)[2]))
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.full(8, 0.5), size=10_000)
    h = entropy(p)
    bounded = bool(np.all(h >= -1e-12) and np.all(h <= math.log(8) + 1e-12))
    ok = worst < 1e-9 and onehot == 0.0 and bounded
    return "entropy", ok, f"max uniform error {worst:.2e}, one-hot {onehot}, bounds {bounded}"


def check_loss_identities():
    l_vqg = torch.tensor(0.7, dtype=torch.float64)
    l_ent = torch.tensor(0.3, dtype=torch.float64)
    ok = float(total_loss(l_vqg, l_ent, 0.0)) == float(l_vqg)
    a, b = torch.tensor([0.2, 1.5]), torch.tensor([1.1, 0.4])
    ok &= bool(torch.equal(entropy_loss(a, b), entropy_loss(b, a)))
    logits = torch.full((1, 3, 5), -1e4, dtype=torch.float64)
    target = torch.tensor([[1, 2, 4]])
    logits[0, torch.arange(3), target[0]] = 1e4
    ok &= float(vqg_loss(logits, target, torch.tensor([3]))) == 0.0
    return "loss identities", bool(ok), "lambda=0 reduction, symmetry, zero NLL on certain targets"


def check_metric_oracles(seed=0, n_pairs=50):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_pairs):
        c = list(rng.integers(0, 5, size=rng.integers(1, 8)))
        r = list(rng.integers(0, 5, size=rng.integers(1, 8)))
        worst = max(worst,
                    abs(metrics.bleu4(c, [r]) - oracles.bleu4_oracle(c, [r])),
                    abs(metrics.rouge_l(c, r) - oracles.rouge_l_oracle(c, r)),
                    abs(metrics.meteor_lite(c, r) - oracles.meteor_lite_oracle(c, r)))
    cands = [list(rng.integers(0, 6, size=rng.integers(3, 8))) for _ in range(10)]
    refs = [[list(rng.integers(0, 6, size=rng.integers(3, 8)))] for _ in range(10)]
    worst = max(worst, abs(metrics.cider(cands, refs) - oracles.cider_oracle(cands, refs)))
    qs = [tuple(rng.integers(0, 3, size=3)) for _ in range(40)]
    div_ok = metrics.diversity(qs) == oracles.diversity_oracle(qs)
    return "metric oracles", worst < 1e-9 and div_ok, f"max abs deviation {worst:.2e}"


def check_delta_filter(seed=0, n=500):
    rng = np.random.default_rng(seed)
    samples = [RephraseSample(0, (4, 2), float(e)) for e in rng.uniform(0, math.log(16), size=n)]
    grid = sorted(rng.uniform(-2, 2, size=9)) + [0.0]
    counts = []
    ok = True
    for d in sorted(grid):
        kept = build_delta_samples(samples, d)
        counts.append(len(kept))
        ok &= len(kept) == sum(1 for s in samples if s.source_entropy + d >= 0)
        if d >= 0:
            ok &= len(kept) == n
    ok &= counts == sorted(counts)
    return "delta filter", bool(ok), f"counts {counts}"


def check_gradient(seed=0, n_coords=20):
    """Finite-difference check of dL/d(out_proj) on a float64 miniature model."""
    torch.manual_seed(seed)
    vocab, n_answers = 8, 4
    vqa = VqaModel(vocab, n_answers, embed_dim=6, hidden_size=8, attention_dim=6, mlp_size=8).double()
    vqa.freeze()
    model = RephraserModel(vocab, math.log(n_answers), hidden_size=16, embed_dim=6, max_length=5).double()
    img = torch.randn(2, 9, vqa.feature_dim, dtype=torch.float64)
    src, src_len = pad_questions([(4, 5, 2), (6, 2)])
    tgt, tgt_len = pad_questions([(5, 4, 2), (7, 6, 2)])
    e_t = torch.tensor([0.3, 1.0], dtype=torch.float64)
    noise = sample_gumbel((2, model.max_length, vocab), torch.Generator().manual_seed(seed), torch.float64)
    lam, tau = 0.7, 0.5

    def loss():
        enc = encode(model, img, src, e_t, vqa, src_len)
        l_vqg = vqg_loss(decode_teacher_forced(model, enc, tgt, tgt_len), tgt, tgt_len)
        soft = decode_gumbel(model, enc, tau, noise=noise)
        probs, _ = predict(vqa, img, soft.rows, soft.lengths)
        return total_loss(l_vqg, entropy_loss(e_t, entropy(probs)).mean(), lam)

    model.zero_grad()
    loss().backward()
    params = [model.out_proj.weight, model.out_proj.bias]
    rng = np.random.default_rng(seed)
    worst = 0.0
    with torch.no_grad():
        for _ in range(n_coords):
            p = params[int(rng.integers(2))]
            idx = int(rng.integers(p.numel()))
            fd = oracles.central_difference(loss, p, idx, 1e-6)
            an = float(p.grad.view(-1)[idx])
            worst = max(worst, abs(an - fd) / max(abs(an), abs(fd), 1e-8))
    return "gradient", worst < 1e-3, f"max relative error {worst:.2e}"


CHECKS = (check_entropy, check_loss_identities, check_metric_oracles, check_delta_filter, check_gradient)


def run_all():
    return [check() for check in CHECKS]
