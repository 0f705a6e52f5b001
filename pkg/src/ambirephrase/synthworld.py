"""Synthetic shapes-grid world with template questions and soft answer labels.

A scene is a ``G x G`` grid of cells, each either empty or holding one object
with a shape, a colour and a size.  Questions are instantiated from a small set
of templates.  Attribute questions whose description matches ``k`` objects get
mass ``1/k`` per matching object, so ambiguity is encoded directly in the
label; counting and existence questions get one-hot labels.

Datasets serialize to JSON Lines: one manifest record (format version,
generation config, both vocabularies) followed by scene and question records.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .exceptions import ConfigurationError, IntegrityError, ParseError

FORMAT_VERSION = 1

SHAPES = ("circle", "square", "triangle")
COLORS = ("red", "green", "blue", "yellow")
SIZES = ("small", "large")
ORDINALS = ("first", "second", "third", "fourth", "fifth", "sixth", "seventh", "eighth")

PAD, START, END, UNK = 0, 1, 2, 3
SPECIAL_TOKENS = ("<pad>", "<start>", "<end>", "<unk>")

# template -> relative selection weight; ambiguous templates are favoured
TEMPLATES = {
    "color_of_shape": 3,
    "size_of_shape": 2,
    "shape_of_color": 2,
    "color_of_shape_in_row": 1,
    "color_of_shape_in_column": 1,
    "count_shape": 1,
    "count_color": 1,
    "exists": 1,
}

FEATURE_DIM = len(SHAPES) + len(COLORS) + len(SIZES) + 2


@dataclass(frozen=True)
class WorldConfig:
    n_scenes: int = 1200
    grid_size: int = 3
    questions_per_scene: int = 6
    max_objects: int = 4
    same_shape_prob: float = 0.7
    min_objects: int = 2
    eval_fraction: float = 0.2

    def validate(self):
        if self.n_scenes < 1:
            raise ConfigurationError("n_scenes must be >= 1")
        if not 2 <= self.grid_size <= len(ORDINALS):
            raise ConfigurationError(f"grid_size must be in [2, {len(ORDINALS)}]")
        if self.questions_per_scene < 2:
            raise ConfigurationError("questions_per_scene must be >= 2")
        if not 1 <= self.min_objects <= self.max_objects <= self.grid_size**2:
            raise ConfigurationError("need 1 <= min_objects <= max_objects <= grid_size**2")
        if not 0.0 <= self.eval_fraction < 1.0:
            raise ConfigurationError("eval_fraction must be in [0, 1)")


@dataclass(frozen=True)
class Cell:
    shape: str
    color: str
    size: str


@dataclass(frozen=True)
class Scene:
    scene_id: int
    grid_size: int
    cells: tuple  # Cell | None per grid position, row-major

    def objects(self):
        """Yield ``(row, col, cell)`` for every non-empty cell."""
        g = self.grid_size
        for i, cell in enumerate(self.cells):
            if cell is not None:
                yield i // g, i % g, cell


@dataclass(frozen=True)
class VocabPair:
    question_vocab: tuple
    answer_vocab: tuple

    def __post_init__(self):
        if tuple(self.question_vocab[:4]) != SPECIAL_TOKENS:
            raise IntegrityError("special tokens must occupy indices 0-3")
        if len(set(self.question_vocab)) != len(self.question_vocab):
            raise IntegrityError("question vocabulary is not a bijection")
        if len(set(self.answer_vocab)) != len(self.answer_vocab):
            raise IntegrityError("answer vocabulary is not a bijection")

    @property
    def word_index(self):
        return {w: i for i, w in enumerate(self.question_vocab)}

    @property
    def answer_index(self):
        return {a: i for i, a in enumerate(self.answer_vocab)}

    def encode(self, text: str) -> tuple:
        """Tokenize whitespace-separated text and append the end token."""
        index = self.word_index
        return tuple(index.get(w, UNK) for w in text.lower().split()) + (END,)

    def decode(self, tokens: Iterable[int]) -> str:
        words = []
        for t in tokens:
            if t == END:
                break
            if t in (PAD, START):
                continue
            words.append(self.question_vocab[t])
        return " ".join(words)


@dataclass(frozen=True)
class Question:
    question_id: int
    scene_id: int
    template: str
    tokens: tuple
    label: tuple  # answer distribution, sums to 1


@dataclass
class Dataset:
    seed: int
    config: WorldConfig
    vocab: VocabPair
    scenes: list
    questions: list
    _scene_index: dict = field(default=None, init=False, repr=False, compare=False)

    def scene(self, scene_id: int) -> Scene:
        if self._scene_index is None:
            self._scene_index = {s.scene_id: s for s in self.scenes}
        return self._scene_index[scene_id]

    @property
    def eval_scene_ids(self):
        n_eval = int(round(len(self.scenes) * self.config.eval_fraction))
        ids = sorted(s.scene_id for s in self.scenes)
        return frozenset(ids[len(ids) - n_eval :]) if n_eval else frozenset()

    def split(self):
        """Return ``(train_questions, eval_questions)`` split by scene."""
        held_out = self.eval_scene_ids
        train = [q for q in self.questions if q.scene_id not in held_out]
        test = [q for q in self.questions if q.scene_id in held_out]
        return train, test


def build_vocab(config: WorldConfig) -> VocabPair:
    words = set()
    for text in _all_template_words(config):
        words.update(text.split())
    question_vocab = SPECIAL_TOKENS + tuple(sorted(words))
    counts = tuple(str(k) for k in range(config.max_objects + 1))
    answer_vocab = COLORS + SHAPES + SIZES + counts + ("yes", "no")
    return VocabPair(question_vocab, answer_vocab)


def _all_template_words(config):
    yield "what color size shape is the object in row column how many are there is there a"
    yield " ".join(SHAPES) + " " + " ".join(s + "s" for s in SHAPES)
    yield " ".join(COLORS)
    yield " ".join(ORDINALS[: config.grid_size])


def _scene_rng(seed, scene_id):
    return np.random.default_rng(np.random.SeedSequence([seed, scene_id]))


def generate_scene(scene_id: int, config: WorldConfig, rng: np.random.Generator) -> Scene:
    g = config.grid_size
    n_objects = int(rng.integers(config.min_objects, config.max_objects + 1))
    positions = rng.choice(g * g, size=n_objects, replace=False)
    if rng.random() < config.same_shape_prob:
        shapes = [SHAPES[int(rng.integers(len(SHAPES)))]] * n_objects
    else:
        shapes = [SHAPES[int(i)] for i in rng.integers(len(SHAPES), size=n_objects)]
    cells = [None] * (g * g)
    for pos, shape in zip(positions, shapes):
        color = COLORS[int(rng.integers(len(COLORS)))]
        size = SIZES[int(rng.integers(len(SIZES)))]
        cells[int(pos)] = Cell(shape, color, size)
    return Scene(scene_id, g, tuple(cells))


def _uniform_over(values, answer_index, n_answers):
    label = [0.0] * n_answers
    k = len(values)
    for v in values:
        label[answer_index[v]] += 1.0 / k
    return tuple(label)


def _one_hot(value, answer_index, n_answers):
    label = [0.0] * n_answers
    label[answer_index[value]] = 1.0
    return tuple(label)


def candidate_questions(scene: Scene, template: str, vocab: VocabPair):
    """All instantiations of ``template`` that are answerable on ``scene``.

    Returns a list of ``(text, label)`` pairs.
    """
    aidx, n = vocab.answer_index, len(vocab.answer_vocab)
    objs = list(scene.objects())
    out = []
    if template in ("color_of_shape", "size_of_shape"):
        attr = "color" if template == "color_of_shape" else "size"
        for shape in SHAPES:
            hits = [getattr(c, attr) for _, _, c in objs if c.shape == shape]
            if hits:
                out.append((f"what {attr} is the {shape}", _uniform_over(hits, aidx, n)))
    elif template == "shape_of_color":
        for color in COLORS:
            hits = [c.shape for _, _, c in objs if c.color == color]
            if hits:
                out.append((f"what shape is the {color} object", _uniform_over(hits, aidx, n)))
    elif template in ("color_of_shape_in_row", "color_of_shape_in_column"):
        axis = "row" if template.endswith("row") else "column"
        for shape in SHAPES:
            for k in range(scene.grid_size):
                hits = [
                    c.color
                    for r, col, c in objs
                    if c.shape == shape and (r if axis == "row" else col) == k
                ]
                if hits:
                    text = f"what color is the {shape} in the {ORDINALS[k]} {axis}"
                    out.append((text, _uniform_over(hits, aidx, n)))
    elif template == "count_shape":
        for shape in SHAPES:
            k = sum(1 for _, _, c in objs if c.shape == shape)
            out.append((f"how many {shape}s are there", _one_hot(str(k), aidx, n)))
    elif template == "count_color":
        for color in COLORS:
            k = sum(1 for _, _, c in objs if c.color == color)
            out.append((f"how many {color} objects are there", _one_hot(str(k), aidx, n)))
    elif template == "exists":
        for color in COLORS:
            for shape in SHAPES:
                hit = any(c.color == color and c.shape == shape for _, _, c in objs)
                out.append((f"is there a {color} {shape}", _one_hot("yes" if hit else "no", aidx, n)))
    else:
        raise ConfigurationError(f"unknown template {template!r}")
    return out


def _scene_questions(scene, config, vocab, rng):
    """Pick ``questions_per_scene`` distinct questions, balancing templates."""
    pools = {t: candidate_questions(scene, t, vocab) for t in TEMPLATES}
    pools = {t: p for t, p in pools.items() if p}
    chosen, seen = [], set()
    while len(chosen) < config.questions_per_scene and pools:
        names = sorted(pools)
        weights = np.array([TEMPLATES[t] for t in names], dtype=float)
        template = names[int(rng.choice(len(names), p=weights / weights.sum()))]
        pool = pools[template]
        text, label = pool.pop(int(rng.integers(len(pool))))
        if not pool:
            del pools[template]
        if text not in seen:
            seen.add(text)
            chosen.append((template, text, label))
    return chosen


def generate_dataset(seed: int, config: WorldConfig | None = None) -> Dataset:
    """Generate a dataset; a pure function of ``(seed, config)``."""
    config = config or WorldConfig()
    config.validate()
    vocab = build_vocab(config)
    scenes, questions = [], []
    for scene_id in range(config.n_scenes):
        rng = _scene_rng(seed, scene_id)
        scene = generate_scene(scene_id, config, rng)
        scenes.append(scene)
        for template, text, label in _scene_questions(scene, config, vocab, rng):
            questions.append(
                Question(len(questions), scene_id, template, vocab.encode(text), label)
            )
    return Dataset(seed, config, vocab, scenes, questions)


def scene_to_features(scene: Scene) -> np.ndarray:
    """Region feature matrix of shape ``(G*G, FEATURE_DIM)``.

    Each row concatenates one-hot shape, colour and size (all zero for an
    empty cell) with the cell's row and column scaled to [0, 1].
    """
    g = scene.grid_size
    feats = np.zeros((g * g, FEATURE_DIM), dtype=np.float32)
    o_color, o_size, o_pos = len(SHAPES), len(SHAPES) + len(COLORS), FEATURE_DIM - 2
    for i, cell in enumerate(scene.cells):
        feats[i, o_pos] = (i // g) / (g - 1)
        feats[i, o_pos + 1] = (i % g) / (g - 1)
        if cell is not None:
            feats[i, SHAPES.index(cell.shape)] = 1.0
            feats[i, o_color + COLORS.index(cell.color)] = 1.0
            feats[i, o_size + SIZES.index(cell.size)] = 1.0
    return feats


def label_entropy(label) -> float:
    return -sum(p * math.log(p) for p in label if p > 0)


def index_by_scene(questions):
    """Map scene_id to the list of that scene's distinct question token tuples."""
    out = {}
    for q in questions:
        lst = out.setdefault(q.scene_id, [])
        if q.tokens not in lst:
            lst.append(q.tokens)
    return out


# -- serialization ---------------------------------------------------------------

def _dumps(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def dataset_lines(dataset: Dataset):
    yield _dumps({
        "record": "manifest",
        "format_version": FORMAT_VERSION,
        "seed": dataset.seed,
        "config": asdict(dataset.config),
        "question_vocab": list(dataset.vocab.question_vocab),
        "answer_vocab": list(dataset.vocab.answer_vocab),
    })
    for s in dataset.scenes:
        cells = [None if c is None else [c.shape, c.color, c.size] for c in s.cells]
        yield _dumps({"record": "scene", "scene_id": s.scene_id, "grid_size": s.grid_size, "cells": cells})
    for q in dataset.questions:
        yield _dumps({
            "record": "question",
            "question_id": q.question_id,
            "scene_id": q.scene_id,
            "template": q.template,
            "text": dataset.vocab.decode(q.tokens),
            "tokens": list(q.tokens),
            "label": list(q.label),
        })


def write_dataset(dataset: Dataset, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for line in dataset_lines(dataset):
            fh.write(line + "\n")
    return path


def _require(rec, keys, lineno):
    missing = [k for k in keys if k not in rec]
    if missing:
        raise ParseError(f"record missing fields {missing}", lineno)


def read_dataset(path) -> Dataset:
    manifest, scenes, questions = None, [], []
    seen_scenes = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"malformed JSON ({exc.msg})", lineno) from None
            if not isinstance(rec, dict) or "record" not in rec:
                raise ParseError("record without a 'record' field", lineno)
            kind = rec["record"]
            if kind == "manifest":
                if lineno != 1 or manifest is not None:
                    raise ParseError("manifest must be the first record", lineno)
                _require(rec, ("format_version", "seed", "config", "question_vocab", "answer_vocab"), lineno)
                if rec["format_version"] != FORMAT_VERSION:
                    raise ParseError(f"unsupported format_version {rec['format_version']}", lineno)
                config = WorldConfig(**rec["config"])
                vocab = VocabPair(tuple(rec["question_vocab"]), tuple(rec["answer_vocab"]))
                if vocab != build_vocab(config):
                    raise IntegrityError("vocabulary does not match the world config")
                manifest = (rec["seed"], config, vocab)
            elif manifest is None:
                raise ParseError("first record must be the manifest", lineno)
            elif kind == "scene":
                _require(rec, ("scene_id", "grid_size", "cells"), lineno)
                g = rec["grid_size"]
                if len(rec["cells"]) != g * g:
                    raise ParseError("scene cell count does not match grid size", lineno)
                cells = tuple(None if c is None else Cell(*c) for c in rec["cells"])
                if all(c is None for c in cells):
                    raise IntegrityError(f"scene {rec['scene_id']} has no objects (line {lineno})")
                if rec["scene_id"] in seen_scenes:
                    raise IntegrityError(f"duplicate scene_id {rec['scene_id']} (line {lineno})")
                seen_scenes.add(rec["scene_id"])
                scenes.append(Scene(rec["scene_id"], g, cells))
            elif kind == "question":
                _require(rec, ("question_id", "scene_id", "template", "tokens", "label"), lineno)
                _, config, vocab = manifest
                if rec["scene_id"] not in seen_scenes:
                    raise IntegrityError(f"question references unknown scene_id {rec['scene_id']} (line {lineno})")
                tokens = tuple(rec["tokens"])
                if any(not 0 <= t < len(vocab.question_vocab) for t in tokens):
                    raise IntegrityError(f"token index out of vocabulary (line {lineno})")
                if len(rec["label"]) != len(vocab.answer_vocab):
                    raise IntegrityError(f"label length does not match answer vocabulary (line {lineno})")
                if "text" in rec and vocab.decode(tokens) != rec["text"]:
                    raise IntegrityError(f"question text does not match tokens (line {lineno})")
                questions.append(
                    Question(rec["question_id"], rec["scene_id"], rec["template"], tokens, tuple(rec["label"]))
                )
            else:
                raise ParseError(f"unknown record type {kind!r}", lineno)
    if manifest is None:
        raise ParseError("empty dataset file", 1)
    seed, config, vocab = manifest
    return Dataset(seed, config, vocab, scenes, questions)
