"""Desk-scale attention VQA model and answer-distribution entropy.

The model encodes a question with an LSTM, attends over image regions with
``softmax_r(w . tanh(W_v v_r + W_q q))`` and predicts answer logits with a
two-layer perceptron on ``[context; q]``.  Questions may be hard token ids or
soft token distributions; soft rows are multiplied into the embedding table so
generated (Gumbel-Softmax) questions stay differentiable.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from . import checkpoint
from .exceptions import ContractError, CorruptionError, DomainError, ShapeError, TrainingError
from .synthworld import FEATURE_DIM, PAD, Dataset, scene_to_features

PROB_FLOOR = 1e-12


def entropy(probs):
    """Entropy in nats along the last axis, with ``0 ln 0 = 0``.

    Accepts a torch tensor (differentiable) or anything numpy can convert.
    """
    if not isinstance(probs, torch.Tensor):
        arr = np.asarray(probs, dtype=np.float64)
        safe = np.where(arr > PROB_FLOOR, arr, 1.0)
        # 0 - x rather than -x so a certain answer gives +0.0
        return 0.0 - np.where(arr > PROB_FLOOR, arr * np.log(safe), 0.0).sum(axis=-1)
    keep = probs > PROB_FLOOR
    safe = torch.where(keep, probs, torch.ones_like(probs))
    return 0.0 - torch.where(keep, probs * torch.log(safe), torch.zeros_like(probs)).sum(dim=-1)


def entropy_from_logits(logits):
    return entropy(torch.softmax(logits, dim=-1))


def entropy_logit_gradient(logits: np.ndarray) -> np.ndarray:
    """Closed form of dH(softmax(z))/dz = -p * (log p + H)."""
    z = np.asarray(logits, dtype=np.float64)
    p = np.exp(z - z.max(axis=-1, keepdims=True))
    p /= p.sum(axis=-1, keepdims=True)
    logp = np.log(np.clip(p, 1e-300, None))
    h = -(p * logp).sum(axis=-1, keepdims=True)
    return -p * (logp + h)


def pad_questions(questions, device=None):
    """Pad token sequences with PAD; return ``(LongTensor[B, L], lengths)``."""
    lengths = torch.tensor([len(q) for q in questions], dtype=torch.long)
    if (lengths < 1).any():
        raise DomainError("questions must contain at least one token")
    out = torch.full((len(questions), int(lengths.max())), PAD, dtype=torch.long)
    for i, q in enumerate(questions):
        out[i, : len(q)] = torch.as_tensor(q, dtype=torch.long)
    return out, lengths


class VqaModel(nn.Module):
    def __init__(self, n_tokens, n_answers, feature_dim=FEATURE_DIM, embed_dim=32,
                 hidden_size=64, attention_dim=64, mlp_size=128):
        super().__init__()
        self.n_tokens = n_tokens
        self.n_answers = n_answers
        self.feature_dim = feature_dim
        self.dims = dict(n_tokens=n_tokens, n_answers=n_answers, feature_dim=feature_dim,
                         embed_dim=embed_dim, hidden_size=hidden_size,
                         attention_dim=attention_dim, mlp_size=mlp_size)
        self.embed = nn.Embedding(n_tokens, embed_dim)
        self.encoder = nn.LSTM(embed_dim, hidden_size, batch_first=True)
        self.att_v = nn.Linear(feature_dim, attention_dim)
        self.att_q = nn.Linear(hidden_size, attention_dim)
        self.att_w = nn.Linear(attention_dim, 1, bias=False)
        self.mlp = nn.Linear(feature_dim + hidden_size, mlp_size)
        self.head = nn.Linear(mlp_size, n_answers)
        self.frozen = False
        self.frozen_digest = None

    @property
    def max_entropy(self):
        return math.log(self.n_answers)

    def encode_question(self, emb, lengths):
        out, _ = self.encoder(emb)
        idx = (lengths - 1).view(-1, 1, 1).expand(-1, 1, out.size(-1))
        return out.gather(1, idx).squeeze(1)

    def forward(self, image, emb, lengths):
        q = self.encode_question(emb, lengths)
        scores = self.att_w(torch.tanh(self.att_v(image) + self.att_q(q).unsqueeze(1))).squeeze(-1)
        attention = torch.softmax(scores, dim=-1)
        context = torch.bmm(attention.unsqueeze(1), image).squeeze(1)
        logits = self.head(torch.relu(self.mlp(torch.cat([context, q], dim=-1))))
        return logits, attention

    def state_tensors(self):
        return {k: v.detach().clone() for k, v in self.state_dict().items()}

    def digest(self):
        return checkpoint.state_digest(self.state_dict())

    def freeze(self):
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
        self.frozen = True
        self.frozen_digest = self.digest()
        return self

    def assert_unchanged(self):
        if not self.frozen:
            raise ContractError("VQA model is not frozen")
        if self.digest() != self.frozen_digest:
            raise ContractError("frozen VQA parameters were modified")


def predict(model: VqaModel, image, question, lengths=None):
    """Answer distribution and attention map.

    ``image`` is ``[R, D]`` or ``[B, R, D]``.  ``question`` is one of: a token
    sequence (list/tuple of ints), a LongTensor ``[B, L]`` with ``lengths``, or
    a float tensor of soft token rows ``[L, V]`` / ``[B, L, V]``.  Unbatched
    inputs give unbatched outputs.
    """
    image = torch.as_tensor(image, dtype=model.att_v.weight.dtype)
    unbatched = image.dim() == 2
    if unbatched:
        image = image.unsqueeze(0)
    if image.dim() != 3 or image.size(-1) != model.feature_dim:
        raise ShapeError(f"image features {tuple(image.shape)} do not match feature_dim {model.feature_dim}")

    if isinstance(question, torch.Tensor) and question.is_floating_point():
        soft = question.unsqueeze(0) if question.dim() == 2 else question
        if soft.size(-1) != model.n_tokens:
            raise ShapeError("soft question rows do not match the question vocabulary")
        sums = soft.detach().sum(-1)
        if (sums - 1).abs().max() > 1e-6 or (soft.detach() < 0).any():
            raise DomainError("soft question rows must be probability vectors")
        if lengths is None:
            lengths = torch.full((soft.size(0),), soft.size(1), dtype=torch.long)
        emb = soft.to(model.embed.weight.dtype) @ model.embed.weight
    else:
        if not isinstance(question, torch.Tensor):
            question, lengths = pad_questions([question])
        elif lengths is None:
            lengths = torch.full((question.size(0),), question.size(1), dtype=torch.long)
        if question.dim() == 1:
            question = question.unsqueeze(0)
        if question.numel() and (question.min() < 0 or question.max() >= model.n_tokens):
            raise DomainError("question token index out of vocabulary")
        emb = model.embed(question)
    lengths = torch.as_tensor(lengths, dtype=torch.long)
    if image.size(0) != emb.size(0):
        raise ShapeError("image and question batch sizes differ")
    logits, attention = model(image, emb, lengths)
    probs = torch.softmax(logits, dim=-1)
    if unbatched:
        return probs[0], attention[0]
    return probs, attention


class FeatureBank:
    """Region features for every scene of a dataset, indexed by scene id."""

    def __init__(self, dataset: Dataset, dtype=torch.float32):
        ids = [s.scene_id for s in dataset.scenes]
        self.index = {sid: i for i, sid in enumerate(ids)}
        self.features = torch.from_numpy(
            np.stack([scene_to_features(s) for s in dataset.scenes])
        ).to(dtype)

    def __getitem__(self, scene_ids):
        if isinstance(scene_ids, (int, np.integer)):
            return self.features[self.index[int(scene_ids)]]
        return self.features[[self.index[int(s)] for s in scene_ids]]


@dataclass
class VqaTrainConfig:
    embed_dim: int = 32
    hidden_size: int = 64
    attention_dim: int = 64
    mlp_size: int = 128
    learning_rate: float = 0.002
    batch_size: int = 64
    max_iter: int = 5000
    seed: int = 0


def _soft_ce(logits, target):
    return -(target * torch.log_softmax(logits, dim=-1)).sum(-1).mean()


def mean_kl(model: VqaModel, questions, bank: FeatureBank, batch_size=512) -> float:
    """Mean KL(label || prediction) in nats over ``questions``."""
    total = 0.0
    with torch.no_grad():
        for start in range(0, len(questions), batch_size):
            chunk = questions[start : start + batch_size]
            toks, lengths = pad_questions([q.tokens for q in chunk])
            probs, _ = predict(model, bank[[q.scene_id for q in chunk]], toks, lengths)
            labels = torch.tensor([q.label for q in chunk], dtype=torch.float64)
            p = probs.double().clamp_min(1e-30)
            kl = torch.where(labels > 0, labels * (torch.log(labels.clamp_min(1e-30)) - torch.log(p)), 0.0)
            total += float(kl.sum())
    return total / max(len(questions), 1)


def fit_soft_labels(model: VqaModel, images, tokens, lengths, labels, config: VqaTrainConfig, log=None):
    """Minibatch Adam on soft cross-entropy; the answer head starts at zero (uniform output)."""
    nn.init.zeros_(model.head.weight)
    nn.init.zeros_(model.head.bias)
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    rng = np.random.default_rng(config.seed)
    n = images.size(0)
    model.train()
    for it in range(config.max_iter):
        idx = torch.from_numpy(rng.integers(n, size=config.batch_size))
        batch_len = lengths[idx]
        toks = tokens[idx, : int(batch_len.max())]
        logits, _ = model(images[idx], model.embed(toks), batch_len)
        loss = _soft_ce(logits, labels[idx])
        if not torch.isfinite(loss):
            raise TrainingError("VQA training diverged", iteration=it)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if log is not None and it % 500 == 0:
            log(f"vqa iter {it} loss {loss.item():.4f}")
    model.eval()
    return model


def train_vqa(dataset: Dataset, config: VqaTrainConfig | None = None, log=None):
    """Fit a fresh VqaModel to the soft labels of the training split.

    Returns ``(model, report)`` where report holds the held-out mean KL.
    The model is returned unfrozen; call ``freeze()`` before downstream use.
    """
    config = config or VqaTrainConfig()
    train_q, eval_q = dataset.split()
    if not train_q:
        raise DomainError("dataset has no training questions")
    torch.manual_seed(config.seed)
    model = VqaModel(
        len(dataset.vocab.question_vocab), len(dataset.vocab.answer_vocab),
        embed_dim=config.embed_dim, hidden_size=config.hidden_size,
        attention_dim=config.attention_dim, mlp_size=config.mlp_size,
    )
    bank = FeatureBank(dataset)
    labels = torch.tensor([q.label for q in train_q], dtype=torch.float32)
    toks_all, len_all = pad_questions([q.tokens for q in train_q])
    images = bank[[q.scene_id for q in train_q]]
    fit_soft_labels(model, images, toks_all, len_all, labels, config, log)
    model.eval()
    report = {
        "heldout_mean_kl": mean_kl(model, eval_q, bank) if eval_q else float("nan"),
        "train_mean_kl": mean_kl(model, train_q[:2000], bank),
        "config": asdict(config),
    }
    return model, report


def save_model(model: VqaModel, path, extra=None):
    meta = {"kind": "vqa", "dims": model.dims, "frozen": model.frozen,
            "frozen_digest": model.frozen_digest}
    if extra:
        meta.update(extra)
    return checkpoint.save_checkpoint(path, model.state_tensors(), meta)


def load_model(path) -> VqaModel:
    tensors, manifest = checkpoint.load_checkpoint(path)
    meta = manifest["metadata"]
    if meta.get("kind") != "vqa":
        raise CorruptionError(f"{path} is not a VQA checkpoint")
    model = VqaModel(**meta["dims"])
    model.load_state_dict(tensors)
    model.eval()
    if meta.get("frozen"):
        model.freeze()
        if model.frozen_digest != meta.get("frozen_digest"):
            raise CorruptionError("frozen digest in manifest does not match parameters")
    return model
