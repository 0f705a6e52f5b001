import math

import numpy as np
import pytest
import torch

from ambirephrase.exceptions import ContractError, DomainError, ShapeError
from ambirephrase.oracles import central_difference
from ambirephrase.rephraser import (
    RephraserModel, decode_greedy, decode_gumbel, decode_teacher_forced, encode, entropy_loss,
    gumbel_softmax, load_rephraser, restore_optimizer, sample_gumbel, save_rephraser, total_loss,
    vqg_loss,
)
from ambirephrase.synthworld import END
from ambirephrase.vqa import VqaModel, entropy, pad_questions, predict

V, A = 12, 5


def _vqa(seed=0, dtype=torch.float32):
    torch.manual_seed(seed)
    return VqaModel(V, A, embed_dim=6, hidden_size=8, attention_dim=6, mlp_size=8).to(dtype).freeze()


def _rephraser(seed=1, use_attention=True, dtype=torch.float32, max_length=6, hidden=16):
    torch.manual_seed(seed)
    return RephraserModel(V, math.log(A), hidden_size=hidden, embed_dim=6,
                          use_attention=use_attention, max_length=max_length).to(dtype)


def _inputs(b=3, seed=0):
    g = torch.Generator().manual_seed(seed)
    img = torch.randn(b, 9, 11, generator=g)
    src, lengths = pad_questions([(4, 5, 6, END), (7, END), (8, 9, END)][:b])
    return img, src, lengths


def test_encode_requires_frozen_vqa():
    vqa = VqaModel(V, A)
    img, src, lengths = _inputs()
    with pytest.raises(ContractError):
        encode(_rephraser(), img, src, 0.5, vqa, lengths)


@pytest.mark.parametrize("e_t", [-0.1, math.log(A) + 0.01])
def test_encode_entropy_range(e_t):
    img, src, lengths = _inputs()
    with pytest.raises(DomainError):
        encode(_rephraser(), img, src, e_t, _vqa(), lengths)


def test_encode_is_pure_and_conditioned():
    m, vqa = _rephraser(), _vqa()
    img, src, lengths = _inputs()
    a = encode(m, img, src, 0.3, vqa, lengths).hidden
    b = encode(m, img, src, 0.3, vqa, lengths).hidden
    assert torch.equal(a, b)
    lo = encode(m, img, src, 0.0, vqa, lengths).hidden
    hi = encode(m, img, src, math.log(A), vqa, lengths).hidden
    assert not torch.allclose(lo, hi)


def test_no_attention_ignores_vqa():
    m = _rephraser(use_attention=False)
    img, src, lengths = _inputs()
    a = encode(m, img, src, 0.3, _vqa(0), lengths).hidden
    b = encode(m, img, src, 0.3, _vqa(5), lengths).hidden
    assert torch.equal(a, b)
    with_att = _rephraser(use_attention=True)
    c = encode(with_att, img, src, 0.3, _vqa(0), lengths).hidden
    d = encode(with_att, img, src, 0.3, _vqa(5), lengths).hidden
    assert not torch.equal(c, d)


def test_gumbel_softmax_examples():
    logits = torch.tensor([1.0, 1.1, -0.5, 0.3])
    noise = torch.zeros(4)
    y = gumbel_softmax(logits, 0.01, noise)
    assert abs(float(y.sum()) - 1) < 1e-6
    assert float(y[1]) > 0.999
    flat = gumbel_softmax(logits, 1e6, noise)
    assert torch.allclose(flat, torch.full((4,), 0.25), atol=1e-5)
    with pytest.raises(DomainError):
        gumbel_softmax(logits, 0.0, noise)


def test_straight_through_forward_hard_backward_soft():
    logits = torch.tensor([0.2, 1.0, -0.3], requires_grad=True)
    noise = torch.zeros(3)
    y = gumbel_softmax(logits, 0.5, noise, straight_through=True)
    assert y.tolist() == [0.0, 1.0, 0.0]
    (y * torch.tensor([1.0, 2.0, 3.0])).sum().backward()
    soft = torch.softmax(logits.detach() / 0.5, -1)
    c = torch.tensor([1.0, 2.0, 3.0])
    expected = soft * (c - (soft * c).sum()) / 0.5
    assert torch.allclose(logits.grad, expected, atol=1e-6)


def test_teacher_forcing_shape_and_causality():
    m, vqa = _rephraser(), _vqa()
    img, src, lengths = _inputs()
    enc = encode(m, img, src, 0.5, vqa, lengths)
    tgt = torch.tensor([[4, 5, 6, 7, END]] * 3)
    out = decode_teacher_forced(m, enc, tgt)
    assert out.shape == (3, 5, V)
    assert torch.equal(out, decode_teacher_forced(m, enc, tgt))
    changed = tgt.clone()
    changed[:, 2] = 9
    out2 = decode_teacher_forced(m, enc, changed)
    assert torch.equal(out[:, :3], out2[:, :3])
    assert not torch.allclose(out[:, 3:], out2[:, 3:])
    with pytest.raises(DomainError):
        decode_teacher_forced(m, enc, torch.ones(3, 7, dtype=torch.long))


def test_gumbel_decoding_rows_and_determinism():
    m, vqa = _rephraser(), _vqa()
    img, src, lengths = _inputs()
    enc = encode(m, img, src, 0.5, vqa, lengths)
    a = decode_gumbel(m, enc, 0.5, torch.Generator().manual_seed(3))
    b = decode_gumbel(m, enc, 0.5, torch.Generator().manual_seed(3))
    assert torch.equal(a.rows, b.rows) and torch.equal(a.lengths, b.lengths)
    assert torch.allclose(a.rows.sum(-1), torch.ones(a.rows.shape[:2]), atol=1e-6)
    assert int(a.lengths.max()) <= m.max_length
    assert m.gumbel_calls == 2


def test_low_temperature_rows_are_peaked():
    m, vqa = _rephraser(), _vqa()
    img, src, lengths = _inputs()
    enc = encode(m, img, src, 0.5, vqa, lengths)
    noise = sample_gumbel((3, m.max_length, V), torch.Generator().manual_seed(0))
    soft = decode_gumbel(m, enc, 0.01, noise=noise)
    # recompute each step's perturbed logits by replaying the fed inputs
    state = m.initial_state(enc)
    inputs = m.start_inputs(3)
    for t in range(soft.rows.size(1)):
        out, state = m.decoder(inputs, state)
        z = (m.out_proj(out.squeeze(1)) + noise[:, t]).detach()
        top2 = z.topk(2, dim=-1).values
        peaked = soft.rows[:, t].max(-1).values
        for i in range(3):
            if t < soft.lengths[i] and t < m.max_length - 1 and top2[i, 0] - top2[i, 1] >= 0.1:
                assert peaked[i] > 0.999
        inputs = (soft.rows[:, t] @ m.dec_embed.weight).unsqueeze(1)


def test_greedy_terminates_and_matches_zero_noise_gumbel():
    m, vqa = _rephraser(max_length=8), _vqa()
    img, src, lengths = _inputs()
    enc = encode(m, img, src, 0.5, vqa, lengths)
    greedy = decode_greedy(m, enc)
    assert greedy == decode_greedy(m, enc)
    assert all(1 <= len(g) <= m.max_length and g[-1] == END for g in greedy)
    soft = decode_gumbel(m, enc, 1e-4, noise=torch.zeros(3, m.max_length, V))
    for i, g in enumerate(greedy):
        n = len(g) if len(g) < m.max_length else m.max_length
        assert tuple(soft.rows[i, :n].argmax(-1).tolist()) == g[:n]


def test_vqg_loss_examples():
    target = torch.tensor([[1, 2]])
    certain = torch.full((1, 2, 4), -1e4, dtype=torch.float64)
    certain[0, 0, 1] = certain[0, 1, 2] = 1e4
    assert float(vqg_loss(certain, target)) == 0.0
    uniform = torch.zeros(1, 3, 10)
    assert abs(float(vqg_loss(uniform, torch.tensor([[0, 5, 9]]))) - math.log(10)) < 1e-6
    probs = torch.tensor([[[0.5, 0.5, 0.0], [0.2, 0.8, 0.0]]], dtype=torch.float64)
    logits = torch.log(probs.clamp_min(1e-300))
    got = float(vqg_loss(logits, torch.tensor([[0, 0]])))
    assert abs(got - (0.693147 + 1.609438) / 2) < 1e-6
    with pytest.raises(ShapeError):
        vqg_loss(uniform, torch.tensor([[0, 5]]))


def test_vqg_loss_ignores_padding():
    logits = torch.randn(2, 4, V)
    tgt, lengths = pad_questions([(4, 5, 6, END), (7, END)])
    a = vqg_loss(logits, tgt, lengths)
    logits2 = logits.clone()
    logits2[1, 2:] = 100.0
    assert torch.equal(a, vqg_loss(logits2, tgt, lengths))


def test_entropy_and_total_loss_examples():
    assert float(entropy_loss(torch.tensor(1.3), torch.tensor(1.3))) == 0.0
    assert abs(float(entropy_loss(2.0, 1.5)) - 0.25) < 1e-15
    assert abs(entropy_loss(0.899, 4.601) - 13.704804) < 1e-6
    assert total_loss(2.0, 3.0, 1.0) == 5.0
    assert abs(total_loss(0.0, 0.01, 100.0) - 1.0) < 1e-12
    l_vqg = torch.tensor(0.37)
    assert total_loss(l_vqg, torch.tensor(float("nan")), 0.0) is l_vqg
    with pytest.raises(DomainError):
        total_loss(1.0, 1.0, -0.5)


def test_gradient_through_gumbel_path_matches_finite_differences():
    """dL/d(out_proj) for L = L_VQG + lambda * L_Ent, vocab 8, hidden 16, float64, fixed noise."""
    torch.manual_seed(0)
    vocab, n_ans = 8, 4
    vqa = VqaModel(vocab, n_ans, embed_dim=6, hidden_size=8, attention_dim=6, mlp_size=8).double().freeze()
    m = RephraserModel(vocab, math.log(n_ans), hidden_size=16, embed_dim=6, max_length=5).double()
    img = torch.randn(2, 9, 11, dtype=torch.float64)
    src, src_len = pad_questions([(4, 5, END), (6, END)])
    tgt, tgt_len = pad_questions([(5, 4, END), (7, 6, END)])
    e_t = torch.tensor([0.3, 1.0], dtype=torch.float64)
    noise = sample_gumbel((2, 5, vocab), torch.Generator().manual_seed(1), torch.float64)

    def loss():
        enc = encode(m, img, src, e_t, vqa, src_len)
        l_vqg = vqg_loss(decode_teacher_forced(m, enc, tgt, tgt_len), tgt, tgt_len)
        soft = decode_gumbel(m, enc, 0.5, noise=noise)
        probs, _ = predict(vqa, img, soft.rows, soft.lengths)
        return total_loss(l_vqg, entropy_loss(e_t, entropy(probs)).mean(), 1.0)

    m.zero_grad()
    loss().backward()
    rng = np.random.default_rng(0)
    params = [m.out_proj.weight, m.out_proj.bias]
    with torch.no_grad():
        for _ in range(20):
            p = params[int(rng.integers(2))]
            i = int(rng.integers(p.numel()))
            fd = central_difference(loss, p, i, 1e-5)
            an = float(p.grad.view(-1)[i])
            assert abs(an - fd) / max(abs(an), abs(fd), 1e-8) < 1e-3


def test_entropy_gradient_reaches_decoder():
    m, vqa = _rephraser(), _vqa()
    img, src, lengths = _inputs()
    enc = encode(m, img, src, 0.5, vqa, lengths)
    soft = decode_gumbel(m, enc, 0.5, torch.Generator().manual_seed(0))
    probs, _ = predict(vqa, img, soft.rows, soft.lengths)
    entropy_loss(torch.tensor(0.5), entropy(probs)).mean().backward()
    assert m.out_proj.weight.grad.abs().sum() > 0
    assert all(p.grad is None for p in vqa.parameters())


def test_checkpoint_roundtrip_with_optimizer(tmp_path):
    m, vqa = _rephraser(), _vqa()
    opt = torch.optim.Adam(m.parameters(), lr=1e-3)
    img, src, lengths = _inputs()
    enc = encode(m, img, src, 0.5, vqa, lengths)
    vqg_loss(decode_teacher_forced(m, enc, src, lengths), src, lengths).backward()
    opt.step()
    save_rephraser(m, tmp_path / "r", opt, {"regime": "pretrain"})
    back, optim_state, manifest = load_rephraser(tmp_path / "r")
    assert back.digest() == m.digest()
    assert manifest["metadata"]["regime"] == "pretrain"
    opt2 = torch.optim.Adam(back.parameters(), lr=1e-3)
    restore_optimizer(opt2, back, optim_state)
    for (n, p), p2 in zip(m.named_parameters(), back.parameters()):
        s1, s2 = opt.state[p], opt2.state[p2]
        assert float(s1["step"]) == float(s2["step"])
        assert torch.equal(s1["exp_avg"], s2["exp_avg"])
