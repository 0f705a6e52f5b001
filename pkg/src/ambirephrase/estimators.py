"""scikit-learn style front ends for the VQA model and the entropy-controlled rephraser.

Inputs are visual questions: pairs ``(image_features, tokens)`` where
``image_features`` is an ``[R, D]`` array of region features and ``tokens`` a
sequence of question token ids.
"""
from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .exceptions import ShapeError
from .synthworld import FEATURE_DIM
from .training import RephraserConfig, TrainRegimeConfig, RephraseSample, rephrase_batch, train
from .vqa import VqaModel, VqaTrainConfig, entropy, fit_soft_labels, pad_questions, predict


# -- validation helpers -------------------------------------------------------------

def check_visual_questions(X, feature_dim=None):
    """Validate ``X`` and return ``(images [N, R, D] float32 tensor, list of token tuples)``."""
    if len(X) == 0:
        raise ValueError("X must contain at least one visual question")
    images, questions = [], []
    for i, item in enumerate(X):
        try:
            img, toks = item
        except (TypeError, ValueError):
            raise ShapeError(f"X[{i}] must be an (image_features, tokens) pair") from None
        img = np.asarray(img, dtype=np.float32)
        if img.ndim != 2:
            raise ShapeError(f"X[{i}] image features must be 2-D, got shape {img.shape}")
        if not np.all(np.isfinite(img)):
            raise ValueError(f"X[{i}] image features contain non-finite values")
        toks = tuple(int(t) for t in toks)
        if not toks:
            raise ValueError(f"X[{i}] question is empty")
        images.append(img)
        questions.append(toks)
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise ShapeError(f"inconsistent image feature shapes: {sorted(shapes)}")
    if feature_dim is not None and images[0].shape[1] != feature_dim:
        raise ShapeError(f"expected feature dimension {feature_dim}, got {images[0].shape[1]}")
    return torch.from_numpy(np.stack(images)), questions


def check_label_distributions(y, n_samples, n_answers=None):
    """Accept integer answer ids ``[N]`` or distributions ``[N, A]``; return float32 ``[N, A]``."""
    y = np.asarray(y)
    if y.shape[0] != n_samples:
        raise ShapeError(f"y has {y.shape[0]} rows but X has {n_samples}")
    if y.ndim == 1:
        if not np.issubdtype(y.dtype, np.integer):
            raise ValueError("1-D y must hold integer answer indices")
        n_answers = n_answers or int(y.max()) + 1
        if y.min() < 0 or y.max() >= n_answers:
            raise ValueError("answer index out of range")
        out = np.zeros((n_samples, n_answers), dtype=np.float32)
        out[np.arange(n_samples), y] = 1.0
        return out
    if y.ndim != 2:
        raise ShapeError("y must be 1-D answer ids or 2-D distributions")
    if n_answers is not None and y.shape[1] != n_answers:
        raise ShapeError(f"y has {y.shape[1]} answers, expected {n_answers}")
    y = y.astype(np.float32)
    if (y < 0).any() or not np.allclose(y.sum(1), 1.0, atol=1e-5):
        raise ValueError("rows of y must be probability distributions")
    return y


# -- VQA ----------------------------------------------------------------------------

class VqaClassifier(ClassifierMixin, BaseEstimator):
    """Attention VQA model trained on soft answer labels.

    ``predict_proba`` returns answer distributions; ``entropy`` their
    ambiguity in nats.  After ``fit`` the model is frozen.
    """

    def __init__(self, n_tokens=None, n_answers=None, embed_dim=32, hidden_size=64,
                 attention_dim=64, mlp_size=128, learning_rate=0.002, batch_size=64,
                 max_iter=5000, random_state=0):
        self.n_tokens = n_tokens
        self.n_answers = n_answers
        self.embed_dim = embed_dim
        self.hidden_size = hidden_size
        self.attention_dim = attention_dim
        self.mlp_size = mlp_size
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.max_iter = max_iter
        self.random_state = random_state

    def fit(self, X, y):
        images, questions = check_visual_questions(X)
        labels = check_label_distributions(y, len(questions), self.n_answers)
        n_tokens = self.n_tokens or max(max(q) for q in questions) + 1
        cfg = VqaTrainConfig(self.embed_dim, self.hidden_size, self.attention_dim, self.mlp_size,
                             self.learning_rate, self.batch_size, self.max_iter, int(self.random_state))
        torch.manual_seed(cfg.seed)
        model = VqaModel(n_tokens, labels.shape[1], feature_dim=images.shape[-1],
                         embed_dim=cfg.embed_dim, hidden_size=cfg.hidden_size,
                         attention_dim=cfg.attention_dim, mlp_size=cfg.mlp_size)
        toks, lengths = pad_questions(questions)
        fit_soft_labels(model, images, toks, lengths, torch.from_numpy(labels), cfg)
        model.freeze()
        self.model_ = model
        self.classes_ = np.arange(labels.shape[1])
        self.n_features_in_ = images.shape[-1]
        return self

    @classmethod
    def from_model(cls, model: VqaModel):
        est = cls(n_tokens=model.n_tokens, n_answers=model.n_answers)
        est.model_ = model
        est.classes_ = np.arange(model.n_answers)
        est.n_features_in_ = model.feature_dim
        return est

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        images, questions = check_visual_questions(X, self.n_features_in_)
        toks, lengths = pad_questions(questions)
        with torch.no_grad():
            probs, _ = predict(self.model_, images, toks, lengths)
        return probs.double().numpy()

    def predict(self, X):
        return self.classes_[self.predict_proba(X).argmax(1)]

    def entropy(self, X):
        return entropy(self.predict_proba(X))


# -- rephraser ----------------------------------------------------------------------

class EntropyRephraser(BaseEstimator):
    """Rephrase visual questions toward a requested answer entropy.

    ``fit(X, scene_ids=...)`` trains on visual questions grouped by image
    (the sampling strategy needs sibling questions of the same image).
    ``predict(X, target_entropy)`` returns greedy rephrasings.
    """

    def __init__(self, vqa=None, regime="scratch", strategy="sampling", entropy_weight=1.0,
                 hidden_size=64, embed_dim=32, use_attention=True, gumbel_temperature=0.5,
                 straight_through=True, learning_rate=0.0005, batch_size=32, max_iter=3000,
                 noise_bound=1.0, pretrain_checkpoint=None, random_state=0):
        self.vqa = vqa
        self.regime = regime
        self.strategy = strategy
        self.entropy_weight = entropy_weight
        self.hidden_size = hidden_size
        self.embed_dim = embed_dim
        self.use_attention = use_attention
        self.gumbel_temperature = gumbel_temperature
        self.straight_through = straight_through
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.max_iter = max_iter
        self.noise_bound = noise_bound
        self.pretrain_checkpoint = pretrain_checkpoint
        self.random_state = random_state

    def _frozen_vqa(self):
        vqa = self.vqa.model_ if isinstance(self.vqa, VqaClassifier) else self.vqa
        if not isinstance(vqa, VqaModel):
            raise ValueError("vqa must be a fitted VqaClassifier or a VqaModel")
        if not vqa.frozen:
            vqa.freeze()
        return vqa

    def _config(self):
        model = RephraserConfig(self.hidden_size, self.embed_dim, self.use_attention, 20,
                                self.gumbel_temperature, self.straight_through)
        return TrainRegimeConfig(self.regime, self.strategy, self.entropy_weight, self.batch_size,
                                 self.learning_rate, self.max_iter, int(self.random_state),
                                 self.noise_bound, self.pretrain_checkpoint, model)

    @staticmethod
    def _bank(images, scene_ids):
        if scene_ids is None:
            scene_ids = list(range(len(images)))
        if len(scene_ids) != len(images):
            raise ShapeError("scene_ids must align with X")
        first = {}
        for i, sid in enumerate(scene_ids):
            first.setdefault(int(sid), i)
        return _ArrayBank({sid: images[i] for sid, i in first.items()}), [int(s) for s in scene_ids]

    def fit(self, X, y=None, scene_ids=None):
        vqa = self._frozen_vqa()
        images, questions = check_visual_questions(X, vqa.feature_dim)
        bank, sids = self._bank(images, scene_ids)
        ents = [float(entropy(p)) for p in self._probs(vqa, images, questions)]
        samples = [RephraseSample(s, q, e) for s, q, e in zip(sids, questions, ents)]
        result = train(samples, vqa, bank, self._config())
        self.model_ = result.model
        self.loss_log_ = result.loss_log
        self.n_features_in_ = images.shape[-1]
        return self

    @staticmethod
    def _probs(vqa, images, questions):
        toks, lengths = pad_questions(questions)
        with torch.no_grad():
            probs, _ = predict(vqa, images, toks, lengths)
        return probs

    def rephrase(self, X, target_entropy):
        """RephraseSamples carrying Q_G and E_G for every input."""
        check_is_fitted(self, "model_")
        vqa = self._frozen_vqa()
        images, questions = check_visual_questions(X, self.n_features_in_)
        e_t = np.broadcast_to(np.asarray(target_entropy, dtype=np.float64), (len(questions),))
        ents = [float(entropy(p)) for p in self._probs(vqa, images, questions)]
        bank = _ArrayBank(dict(enumerate(images)))
        samples = [RephraseSample(i, q, e, target_entropy=float(t))
                   for i, (q, e, t) in enumerate(zip(questions, ents, e_t))]
        return rephrase_batch(self.model_, vqa, bank, samples)

    def predict(self, X, target_entropy):
        return [s.generated for s in self.rephrase(X, target_entropy)]

    def score(self, X, target_entropy):
        """Negative mean |E_T - E_G| (higher is better)."""
        out = self.rephrase(X, target_entropy)
        return -float(np.mean([abs(s.target_entropy - s.generated_entropy) for s in out]))


class _ArrayBank:
    """FeatureBank look-alike over an explicit id -> features mapping."""

    def __init__(self, features):
        self.features = features

    def __getitem__(self, scene_ids):
        if isinstance(scene_ids, (int, np.integer)):
            return self.features[int(scene_ids)]
        return torch.stack([self.features[int(s)] for s in scene_ids])


__all__ = ["VqaClassifier", "EntropyRephraser", "check_visual_questions", "check_label_distributions",
           "FEATURE_DIM"]
