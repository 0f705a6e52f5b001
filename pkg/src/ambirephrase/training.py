"""Target construction (noise / sampling), training regimes and batch rephrasing."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .exceptions import ConfigurationError, ContractError, StrategyError, TrainingError
from .rephraser import (
    RephraserModel,
    decode_greedy,
    decode_gumbel,
    decode_teacher_forced,
    encode,
    entropy_loss,
    load_rephraser,
    restore_optimizer,
    save_rephraser,
    total_loss,
    vqg_loss,
)
from .vqa import FeatureBank, VqaModel, entropy, pad_questions, predict

logger = logging.getLogger(__name__)

REGIMES = ("pretrain", "scratch", "finetune")
STRATEGIES = ("noise", "sampling")
LOSS_LOG_NAME = "loss_log.csv"


@dataclass(frozen=True)
class RephraseSample:
    scene_id: int
    source: tuple
    source_entropy: float
    target: tuple | None = None
    target_entropy: float | None = None
    generated: tuple | None = None
    generated_entropy: float | None = None


@dataclass
class RephraserConfig:
    hidden_size: int = 64
    embed_dim: int = 32
    use_attention: bool = True
    max_length: int = 20
    gumbel_temperature: float = 0.01
    straight_through: bool = False


@dataclass
class TrainRegimeConfig:
    regime: str = "pretrain"
    strategy: str = "sampling"
    entropy_weight: float = 1.0
    batch_size: int = 32
    learning_rate: float = 0.0005
    max_iter: int = 3000
    seed: int = 0
    noise_bound: float = 1.0
    pretrain_checkpoint: str | None = None
    model: RephraserConfig = field(default_factory=RephraserConfig)

    def validate(self):
        if self.regime not in REGIMES:
            raise ConfigurationError(f"regime must be one of {REGIMES}")
        if self.strategy not in STRATEGIES:
            raise ConfigurationError(f"strategy must be one of {STRATEGIES}")
        if self.entropy_weight < 0:
            raise ConfigurationError("entropy_weight must be non-negative")
        if self.model.gumbel_temperature <= 0:
            raise ConfigurationError("gumbel_temperature must be positive")
        if self.regime == "finetune" and not self.pretrain_checkpoint:
            raise ConfigurationError("finetune requires pretrain_checkpoint")

    @property
    def effective_entropy_weight(self):
        return 0.0 if self.regime == "pretrain" else self.entropy_weight


# -- entropies ---------------------------------------------------------------------

def question_entropy(vqa: VqaModel, bank: FeatureBank, scene_id, tokens) -> float:
    """Entropy of the frozen VQA's answer distribution for one visual question."""
    with torch.no_grad():
        probs, _ = predict(vqa, bank[scene_id], tuple(tokens))
    return float(entropy(probs))


def batch_entropies(vqa: VqaModel, bank: FeatureBank, scene_ids, questions, batch_size=256):
    out = []
    with torch.no_grad():
        for start in range(0, len(questions), batch_size):
            toks, lengths = pad_questions(questions[start : start + batch_size])
            probs, _ = predict(vqa, bank[scene_ids[start : start + batch_size]], toks, lengths)
            out.extend(float(e) for e in entropy(probs))
    return out


def make_samples(questions, vqa: VqaModel, bank: FeatureBank):
    """RephraseSamples with E_S computed by the frozen VQA."""
    return [
        RephraseSample(q.scene_id, tuple(q.tokens), question_entropy(vqa, bank, q.scene_id, q.tokens))
        for q in questions
    ]


def build_index(samples):
    """scene_id -> list of that scene's distinct source questions."""
    index = {}
    for s in samples:
        lst = index.setdefault(s.scene_id, [])
        if s.source not in lst:
            lst.append(s.source)
    return index


# -- target strategies -------------------------------------------------------------

def make_noise_target(sample: RephraseSample, rng, noise_bound=1.0, max_entropy=math.inf):
    eps = float(rng.uniform(-noise_bound, noise_bound))
    e_t = min(max(sample.source_entropy + eps, 0.0), max_entropy)
    return replace(sample, target=sample.source, target_entropy=e_t)


def make_sampling_target(sample: RephraseSample, index, vqa: VqaModel, bank: FeatureBank, rng,
                         entropy_cache=None):
    """Draw Q_T uniformly from the scene's other questions; E_T from the frozen VQA."""
    others = [q for q in index.get(sample.scene_id, ()) if q != sample.source]
    if not others:
        raise StrategyError(f"scene {sample.scene_id} has no question other than the source")
    q_t = others[int(rng.integers(len(others)))]
    key = (sample.scene_id, q_t)
    if entropy_cache is not None and key in entropy_cache:
        e_t = entropy_cache[key]
    else:
        e_t = question_entropy(vqa, bank, sample.scene_id, q_t)
    return replace(sample, target=q_t, target_entropy=e_t)


# -- training ----------------------------------------------------------------------

@dataclass
class TrainResult:
    model: RephraserModel
    optimizer: torch.optim.Optimizer
    loss_log: list
    config: TrainRegimeConfig
    gumbel_calls: int
    vqa_digest: str

    def metadata(self):
        cfg = self.config
        return {
            "regime": cfg.regime,
            "strategy": cfg.strategy,
            "entropy_weight": cfg.effective_entropy_weight,
            "gumbel_temperature": cfg.model.gumbel_temperature,
            "straight_through": cfg.model.straight_through,
            "use_attention": cfg.model.use_attention,
            "seed": cfg.seed,
            "iterations": cfg.max_iter,
            "vqa_digest": self.vqa_digest,
            "config": asdict(cfg),
        }

    def save(self, directory):
        directory = Path(directory)
        save_rephraser(self.model, directory, self.optimizer, self.metadata())
        write_loss_log(self.loss_log, directory / LOSS_LOG_NAME)
        return directory


def write_loss_log(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "l_vqg", "l_ent", "total"])
        for r in rows:
            w.writerow([r["iteration"], repr(r["l_vqg"]), repr(r["l_ent"]), repr(r["total"])])


def _new_model(vqa, cfg: RephraserConfig):
    return RephraserModel(vqa.n_tokens, vqa.max_entropy, feature_dim=vqa.feature_dim,
                          hidden_size=cfg.hidden_size, embed_dim=cfg.embed_dim,
                          use_attention=cfg.use_attention, max_length=cfg.max_length)


def train(samples, vqa: VqaModel, bank: FeatureBank, config: TrainRegimeConfig, log_every=0):
    """Optimize L = L_VQG + lambda * L_Ent over ``samples`` (RephraseSamples with E_S).

    Pretrain forces lambda = 0 and never runs the Gumbel path; finetune
    resumes parameters and Adam state from ``config.pretrain_checkpoint``.
    """
    config.validate()
    if not getattr(vqa, "frozen", False):
        raise ContractError("training requires a frozen VQA model")
    if not samples:
        raise ConfigurationError("no training samples")
    digest_before = vqa.digest()
    lam = config.effective_entropy_weight
    mcfg = config.model

    torch.manual_seed(config.seed)
    if config.regime == "finetune":
        ckpt = Path(config.pretrain_checkpoint)
        if not (ckpt / "manifest.json").exists():
            raise ConfigurationError(f"pretrain checkpoint not found: {ckpt}")
        model, optim_state, manifest = load_rephraser(ckpt)
        if model.use_attention != mcfg.use_attention:
            raise ConfigurationError("pretrain checkpoint differs in use_attention")
        optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
        restore_optimizer(optimizer, model, optim_state)
    else:
        model = _new_model(vqa, mcfg)
        optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    model.gumbel_calls = 0
    model.train()

    rng = np.random.default_rng(config.seed)
    noise_gen = torch.Generator().manual_seed(config.seed + 7919)
    index = build_index(samples)
    entropy_cache = {(s.scene_id, s.source): s.source_entropy for s in samples}
    log = []
    for it in range(config.max_iter):
        batch = [samples[i] for i in rng.integers(len(samples), size=config.batch_size)]
        if config.strategy == "noise":
            batch = [make_noise_target(s, rng, config.noise_bound, vqa.max_entropy) for s in batch]
        else:
            batch = [make_sampling_target(s, index, vqa, bank, rng, entropy_cache) for s in batch]
        feats = bank[[s.scene_id for s in batch]]
        src, src_len = pad_questions([s.source for s in batch])
        tgt, tgt_len = pad_questions([s.target for s in batch])
        e_t = torch.tensor([s.target_entropy for s in batch])
        enc = encode(model, feats, src, e_t, vqa, src_len)
        l_vqg = vqg_loss(decode_teacher_forced(model, enc, tgt, tgt_len), tgt, tgt_len)
        l_ent = None
        if lam > 0:
            soft = decode_gumbel(model, enc, mcfg.gumbel_temperature, noise_gen,
                                 straight_through=mcfg.straight_through)
            probs, _ = predict(vqa, feats, soft.rows, soft.lengths)
            l_ent = entropy_loss(e_t, entropy(probs)).mean()
        loss = total_loss(l_vqg, l_ent, lam)
        if not torch.isfinite(loss):
            raise TrainingError("non-finite rephraser loss", iteration=it)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        log.append({
            "iteration": it,
            "l_vqg": float(l_vqg.detach()),
            "l_ent": float(l_ent.detach()) if l_ent is not None else float("nan"),
            "total": float(loss.detach()),
        })
        if log_every and it % log_every == 0:
            logger.info("iter %d l_vqg %.4f l_ent %.4f", it, log[-1]["l_vqg"], log[-1]["l_ent"])
    model.eval()
    if vqa.digest() != digest_before:
        raise ContractError("frozen VQA parameters changed during training")
    return TrainResult(model, optimizer, log, config, model.gumbel_calls, digest_before)


def rephrase_batch(model: RephraserModel, vqa: VqaModel, bank: FeatureBank, samples, batch_size=256):
    """Fill Q_G (greedy decoding) and E_G for samples that carry E_T."""
    if not getattr(vqa, "frozen", False):
        raise ContractError("rephrase_batch requires a frozen VQA model")
    digest_before = vqa.digest()
    out = []
    with torch.no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start : start + batch_size]
            feats = bank[[s.scene_id for s in chunk]]
            src, src_len = pad_questions([s.source for s in chunk])
            e_t = torch.tensor([s.target_entropy for s in chunk], dtype=model.enc_fuse.weight.dtype)
            enc = encode(model, feats, src, e_t, vqa, src_len)
            generated = decode_greedy(model, enc)
            e_g = batch_entropies(vqa, bank, [s.scene_id for s in chunk], generated)
            out.extend(replace(s, generated=g, generated_entropy=e) for s, g, e in zip(chunk, generated, e_g))
    if vqa.digest() != digest_before:
        raise ContractError("frozen VQA parameters changed during rephrasing")
    return out
