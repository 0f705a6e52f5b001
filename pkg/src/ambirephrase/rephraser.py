"""Entropy-conditioned encoder-decoder rephraser.

The encoder fuses pooled image features, VQA-attention-pooled image features,
an LSTM encoding of the source question and the normalized target entropy.
The decoder fuses the encoder state with the target entropy again and runs an
LSTM over word embeddings.  Three decoding modes share the same weights:
teacher forcing (for the likelihood loss), Gumbel-Softmax free running (for
the differentiable entropy loss) and greedy argmax (for inference).
"""
from __future__ import annotations

from typing import NamedTuple

import torch
from torch import nn

from . import checkpoint
from .exceptions import ContractError, CorruptionError, DomainError, ShapeError
from .synthworld import END, FEATURE_DIM, START
from .vqa import VqaModel, pad_questions, predict

ENTROPY_SLACK = 1e-9


class Encoded(NamedTuple):
    hidden: torch.Tensor  # [B, H]
    entropy: torch.Tensor  # [B, 1], target entropy scaled to [0, 1]


class SoftTokenSequence(NamedTuple):
    rows: torch.Tensor  # [B, T, V]
    lengths: torch.Tensor  # [B], position of the end token + 1


class RephraserModel(nn.Module):
    def __init__(self, n_tokens, max_entropy, feature_dim=FEATURE_DIM, hidden_size=512,
                 embed_dim=64, use_attention=True, max_length=20):
        super().__init__()
        if max_length < 1:
            raise DomainError("max_length must be >= 1")
        self.n_tokens = n_tokens
        self.max_entropy = float(max_entropy)
        self.feature_dim = feature_dim
        self.use_attention = bool(use_attention)
        self.max_length = max_length
        self.dims = dict(n_tokens=n_tokens, max_entropy=self.max_entropy, feature_dim=feature_dim,
                         hidden_size=hidden_size, embed_dim=embed_dim,
                         use_attention=self.use_attention, max_length=max_length)
        image_dim = feature_dim * (2 if use_attention else 1)
        self.src_embed = nn.Embedding(n_tokens, embed_dim)
        self.src_encoder = nn.LSTM(embed_dim, hidden_size, batch_first=True)
        self.enc_fuse = nn.Linear(image_dim + hidden_size + 1, hidden_size)
        self.dec_fuse = nn.Linear(hidden_size + 1, hidden_size)
        self.dec_embed = nn.Embedding(n_tokens, embed_dim)
        self.decoder = nn.LSTM(embed_dim, hidden_size, batch_first=True)
        self.out_proj = nn.Linear(hidden_size, n_tokens)
        self.gumbel_calls = 0

    def initial_state(self, enc: Encoded):
        h0 = torch.tanh(self.dec_fuse(torch.cat([enc.hidden, enc.entropy], dim=-1)))
        return h0.unsqueeze(0), torch.zeros_like(h0).unsqueeze(0)

    def start_inputs(self, batch):
        start = torch.full((batch, 1), START, dtype=torch.long)
        return self.dec_embed(start)

    def state_tensors(self):
        return {k: v.detach().clone() for k, v in self.state_dict().items()}

    def digest(self):
        return checkpoint.state_digest(self.state_dict())


def _as_tokens(source, lengths):
    if isinstance(source, torch.Tensor):
        if source.dim() == 1:
            source = source.unsqueeze(0)
        if lengths is None:
            lengths = torch.full((source.size(0),), source.size(1), dtype=torch.long)
        return source, torch.as_tensor(lengths, dtype=torch.long)
    if source and isinstance(source[0], int):
        source = [source]
    return pad_questions(source)


def encode(model: RephraserModel, image, source, target_entropy, frozen_vqa: VqaModel, lengths=None):
    """Fuse image, source question and target entropy into a decoder seed.

    ``image`` is ``[B, R, D]`` (or ``[R, D]``), ``source`` a padded LongTensor
    with ``lengths`` or a list of token sequences, ``target_entropy`` nats.
    """
    if not getattr(frozen_vqa, "frozen", False):
        raise ContractError("encode requires a frozen VQA model")
    dtype = model.enc_fuse.weight.dtype
    image = torch.as_tensor(image, dtype=dtype)
    if image.dim() == 2:
        image = image.unsqueeze(0)
    if image.size(-1) != model.feature_dim:
        raise ShapeError("image features do not match the rephraser feature_dim")
    tokens, lengths = _as_tokens(source, lengths)
    e_t = torch.as_tensor(target_entropy, dtype=dtype).reshape(-1)
    if e_t.numel() == 1 and tokens.size(0) > 1:
        e_t = e_t.expand(tokens.size(0))
    if (e_t < 0).any() or (e_t > model.max_entropy + ENTROPY_SLACK).any():
        raise DomainError(f"target entropy must lie in [0, {model.max_entropy:.6f}]")
    if not (image.size(0) == tokens.size(0) == e_t.size(0)):
        raise ShapeError("batch sizes of image, source and target entropy differ")

    parts = [image.mean(dim=1)]
    if model.use_attention:
        with torch.no_grad():
            _, attention = predict(frozen_vqa, image.to(frozen_vqa.att_v.weight.dtype), tokens, lengths)
        parts.append(torch.bmm(attention.to(dtype).unsqueeze(1), image).squeeze(1))
    out, _ = model.src_encoder(model.src_embed(tokens))
    idx = (lengths - 1).view(-1, 1, 1).expand(-1, 1, out.size(-1))
    parts.append(out.gather(1, idx).squeeze(1))
    e_norm = (e_t / model.max_entropy).unsqueeze(-1)
    parts.append(e_norm)
    hidden = torch.tanh(model.enc_fuse(torch.cat(parts, dim=-1)))
    return Encoded(hidden, e_norm)


def sample_gumbel(shape, generator=None, dtype=torch.float32):
    u = torch.rand(shape, generator=generator, dtype=dtype)
    return -torch.log(-torch.log(u + 1e-20) + 1e-20)


def gumbel_softmax(logits, tau, noise, straight_through=False):
    """``softmax((logits + noise) / tau)``; optionally straight-through hard."""
    if not tau > 0:
        raise DomainError("Gumbel-Softmax temperature must be positive")
    y = torch.softmax((logits + noise) / tau, dim=-1)
    if not straight_through:
        return y
    hard = torch.zeros_like(y).scatter_(-1, y.argmax(dim=-1, keepdim=True), 1.0)
    return hard - y.detach() + y


def decode_teacher_forced(model: RephraserModel, enc: Encoded, target, lengths=None):
    """Per-step vocabulary logits ``[B, L, V]`` when feeding the target's prefix."""
    target, lengths = _as_tokens(target, lengths)
    if target.size(1) > model.max_length:
        raise DomainError(f"target longer than max_length={model.max_length}")
    if target.size(1) == 0:
        raise DomainError("target must be nonempty")
    b = target.size(0)
    inputs = torch.cat([torch.full((b, 1), START, dtype=torch.long), target[:, :-1]], dim=1)
    out, _ = model.decoder(model.dec_embed(inputs), model.initial_state(enc))
    return model.out_proj(out)


def _end_row(like):
    row = torch.zeros_like(like)
    row[..., END] = 1.0
    return row


def decode_gumbel(model: RephraserModel, enc: Encoded, tau, generator=None, noise=None,
                  straight_through=False) -> SoftTokenSequence:
    """Free-running decoding through Gumbel-Softmax relaxed tokens.

    Each step feeds the expected embedding of the previous soft row.  A row
    ends the sequence when its argmax is the end token; the last allowed step
    is forced to the end token.  ``noise`` (``[B, max_length, V]``) overrides
    sampling from ``generator``.
    """
    if not tau > 0:
        raise DomainError("Gumbel-Softmax temperature must be positive")
    model.gumbel_calls += 1
    b = enc.hidden.size(0)
    dtype = enc.hidden.dtype
    state = model.initial_state(enc)
    inputs = model.start_inputs(b)
    ended = torch.zeros(b, dtype=torch.bool)
    lengths = torch.full((b,), model.max_length, dtype=torch.long)
    rows = []
    for t in range(model.max_length):
        out, state = model.decoder(inputs, state)
        logits = model.out_proj(out.squeeze(1))
        g = noise[:, t] if noise is not None else sample_gumbel(logits.shape, generator, dtype)
        y = gumbel_softmax(logits, tau, g.to(dtype), straight_through)
        if t == model.max_length - 1:
            y = torch.where(ended.unsqueeze(-1), y, _end_row(y))
        rows.append(y)
        now_ended = (y.detach().argmax(-1) == END) & ~ended
        lengths = torch.where(now_ended, torch.full_like(lengths, t + 1), lengths)
        ended = ended | now_ended
        if bool(ended.all()):
            break
        inputs = (y @ model.dec_embed.weight).unsqueeze(1)
    return SoftTokenSequence(torch.stack(rows, dim=1), lengths)


def decode_greedy(model: RephraserModel, enc: Encoded):
    """Argmax decoding; returns one token tuple per batch row, each ending in END."""
    b = enc.hidden.size(0)
    state = model.initial_state(enc)
    inputs = model.start_inputs(b)
    tokens = [[] for _ in range(b)]
    done = [False] * b
    with torch.no_grad():
        for t in range(model.max_length):
            out, state = model.decoder(inputs, state)
            step = model.out_proj(out.squeeze(1)).argmax(-1)
            if t == model.max_length - 1:
                step = torch.full_like(step, END)
            for i, tok in enumerate(step.tolist()):
                if not done[i]:
                    tokens[i].append(tok)
                    done[i] = tok == END
            if all(done):
                break
            inputs = model.dec_embed(step).unsqueeze(1)
    return [tuple(t) for t in tokens]


def vqg_loss(step_logits, target, lengths=None):
    """Mean over the batch of the per-sequence mean target negative log-likelihood."""
    if step_logits.dim() == 2:
        step_logits = step_logits.unsqueeze(0)
    target, lengths = _as_tokens(target, lengths)
    if step_logits.shape[:2] != target.shape:
        raise ShapeError(f"logits {tuple(step_logits.shape[:2])} and target {tuple(target.shape)} lengths differ")
    logp = torch.log_softmax(step_logits, dim=-1)
    nll = -logp.gather(-1, target.unsqueeze(-1)).squeeze(-1)
    mask = torch.arange(target.size(1)).unsqueeze(0) < lengths.unsqueeze(1)
    per_seq = (nll * mask).sum(1) / lengths.to(nll.dtype)
    return per_seq.mean()


def entropy_loss(target_entropy, generated_entropy):
    """Squared entropy error; elementwise for tensors."""
    return (target_entropy - generated_entropy) ** 2


def total_loss(l_vqg, l_ent, entropy_weight):
    if entropy_weight < 0:
        raise DomainError("entropy weight must be non-negative")
    if entropy_weight == 0:
        return l_vqg
    return l_vqg + entropy_weight * l_ent


# -- checkpoints -----------------------------------------------------------------

OPTIM_PREFIX = "optim."


def save_rephraser(model: RephraserModel, path, optimizer=None, metadata=None):
    tensors = model.state_tensors()
    param_names = sorted(tensors)
    if optimizer is not None:
        names = {id(p): n for n, p in model.named_parameters()}
        for p, st in optimizer.state.items():
            for key, val in st.items():
                tensors[f"{OPTIM_PREFIX}{names[id(p)]}.{key}"] = torch.as_tensor(val, dtype=torch.float32)
    meta = {"kind": "rephraser", "dims": model.dims}
    meta.update(metadata or {})
    return checkpoint.save_checkpoint(path, tensors, meta, param_names=param_names)


def load_rephraser(path):
    """Return ``(model, optimizer_state, manifest)``.

    ``optimizer_state`` maps parameter name -> {state key -> tensor}.
    """
    tensors, manifest = checkpoint.load_checkpoint(path)
    meta = manifest["metadata"]
    if meta.get("kind") != "rephraser":
        raise CorruptionError(f"{path} is not a rephraser checkpoint")
    model = RephraserModel(**meta["dims"])
    params = {k: v for k, v in tensors.items() if not k.startswith(OPTIM_PREFIX)}
    model.load_state_dict(params)
    optim_state = {}
    for k, v in tensors.items():
        if k.startswith(OPTIM_PREFIX):
            pname, key = k[len(OPTIM_PREFIX):].rsplit(".", 1)
            optim_state.setdefault(pname, {})[key] = v.reshape(()) if key == "step" else v
    return model, optim_state, manifest


def restore_optimizer(optimizer, model: RephraserModel, optim_state):
    params = dict(model.named_parameters())
    for name, st in optim_state.items():
        optimizer.state[params[name]] = {k: v.clone() for k, v in st.items()}
