"""Experiment orchestration: Delta sweep, lambda sweep, attention ablation, plot data.

An ``Experiment`` owns an output directory::

    <out>/config.json                 effective configuration (provenance)
    <out>/dataset.jsonl               synthetic world
    <out>/vqa/                        frozen VQA checkpoint
    <out>/models/<slug>/              rephraser checkpoints + loss logs
    <out>/sweeps/<name>/rows.csv      one SweepRow per (Delta, configuration)
    <out>/sweeps/<name>/raw.jsonl     per-sample records for plotting
    <out>/sweeps/<name>/summary.json  asymmetry comparison and metric config
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np
import torch

from .config import ExperimentConfig
from .exceptions import ConfigurationError, DomainError
from .metrics import METRIC_CONFIG, evaluate
from .rephraser import load_rephraser
from .synthworld import END, generate_dataset, read_dataset, write_dataset
from .training import RephraseSample, make_samples, rephrase_batch, train
from .vqa import FeatureBank, load_model, save_model, train_vqa

logger = logging.getLogger(__name__)

# Table-style labels for (strategy, regime)
CONFIG_LABELS = {
    ("noise", "pretrain"): "Noise Pretrain",
    ("noise", "scratch"): "Noise",
    ("noise", "finetune"): "Noise-FT",
    ("sampling", "pretrain"): "Sampling Pretrain",
    ("sampling", "scratch"): "Sampling",
    ("sampling", "finetune"): "Sampling-FT",
}
LABEL_CONFIGS = {v: k for k, v in CONFIG_LABELS.items()}
AXIS_MODES = ("eg_minus_et", "eg_minus_es")


@dataclass
class SweepRow:
    delta: float
    label: str
    abs_err_mean: float
    abs_err_std: float
    bleu4: float
    cider: float
    meteor_lite: float
    rouge_l: float
    diversity: int
    n_questions: int


CSV_COLUMNS = [f.name for f in fields(SweepRow)]


def model_slug(strategy, regime, use_attention=True, entropy_weight=None):
    slug = f"{strategy}-{regime}"
    if entropy_weight is not None:
        slug += f"-lambda{entropy_weight:g}"
    if not use_attention:
        slug += "-noatt"
    return slug


def strip_end(tokens):
    tokens = list(tokens)
    return tokens[: tokens.index(END)] if END in tokens else tokens


# -- Delta filtering ----------------------------------------------------------------

def build_delta_samples(samples, delta, max_entropy=float("inf")):
    """Samples with E_T = E_S + delta; those with E_S + delta < 0 are dropped.

    E_T is capped at ``max_entropy`` so it stays a valid entropy.
    """
    out = []
    for s in samples:
        e_t = s.source_entropy + delta
        if e_t < 0:
            continue
        out.append(replace(s, target=None, target_entropy=min(e_t, max_entropy),
                           generated=None, generated_entropy=None))
    return out


# -- records / rows -----------------------------------------------------------------

def sample_record(label, delta, s: RephraseSample):
    return {
        "label": label,
        "delta": delta,
        "scene_id": s.scene_id,
        "source_entropy": s.source_entropy,
        "target_entropy": s.target_entropy,
        "generated_entropy": s.generated_entropy,
        "source": strip_end(s.source),
        "generated": strip_end(s.generated),
    }


def rows_from_records(records, order=None):
    """Aggregate raw records into SweepRows, one per (delta, label)."""
    groups = {}
    for r in records:
        groups.setdefault((r["delta"], r["label"]), []).append(r)
    keys = order if order is not None else sorted(groups)
    rows = []
    for key in keys:
        rep = evaluate(groups[key])
        rows.append(SweepRow(key[0], key[1], rep.mean_abs_entropy_error, rep.std_abs_entropy_error,
                             rep.bleu4, rep.cider, rep.meteor_lite, rep.rouge_l, rep.diversity,
                             rep.n_samples))
    return rows


def write_rows(rows, path, extra_columns=None):
    extra_columns = extra_columns or {}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS + list(extra_columns))
        for row in rows:
            vals = [repr(v) if isinstance(v, float) else v for v in asdict(row).values()]
            w.writerow(vals + [extra_columns[c].get(row.label, "") for c in extra_columns])
    return path


def read_rows(path):
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            rows.append(SweepRow(
                float(rec["delta"]), rec["label"], float(rec["abs_err_mean"]), float(rec["abs_err_std"]),
                float(rec["bleu4"]), float(rec["cider"]), float(rec["meteor_lite"]), float(rec["rouge_l"]),
                int(rec["diversity"]), int(rec["n_questions"]),
            ))
    return rows


def write_records(records, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="\n") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    return path


def read_records(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def asymmetry_summary(rows):
    """Mean error at the largest positive vs largest negative Delta, per label."""
    deltas = sorted({r.delta for r in rows})
    lo, hi = deltas[0], deltas[-1]
    out = {}
    for label in dict.fromkeys(r.label for r in rows):
        err = {r.delta: r.abs_err_mean for r in rows if r.label == label}
        if lo in err and hi in err:
            out[label] = {
                "delta_min": lo, "err_at_delta_min": err[lo],
                "delta_max": hi, "err_at_delta_max": err[hi],
                "increase_harder": err[hi] > err[lo],
            }
    return out


# -- sweeps -------------------------------------------------------------------------

def _resolve_models(models):
    resolved = {}
    for label, m in models.items():
        if isinstance(m, (str, Path)):
            if not (Path(m) / "manifest.json").exists():
                raise ConfigurationError(f"missing checkpoint for configuration {label!r}: {m}")
            m = load_rephraser(m)[0]
            m.eval()
        resolved[label] = m
    return resolved


def run_delta_sweep(models, vqa, bank, eval_samples, delta_grid, out_dir=None, name="delta"):
    """Evaluate every model at every Delta.

    ``models`` maps a configuration label to a RephraserModel or checkpoint
    directory.  Returns ``(rows, records)``; with ``out_dir`` also writes
    ``rows.csv``, ``raw.jsonl`` and ``summary.json`` there.
    """
    models = _resolve_models(models)
    rows, records = [], []
    for delta in delta_grid:
        base = build_delta_samples(eval_samples, delta, vqa.max_entropy)
        for label, model in models.items():
            out = rephrase_batch(model, vqa, bank, base) if base else []
            recs = [sample_record(label, delta, s) for s in out]
            records.extend(recs)
            if recs:
                rows.extend(rows_from_records(recs))
            logger.info("sweep %s delta=%+.3f %s n=%d", name, delta, label, len(recs))
    if out_dir is not None:
        out_dir = Path(out_dir)
        write_rows(rows, out_dir / "rows.csv")
        write_records(records, out_dir / "raw.jsonl")
        summary = {"asymmetry": asymmetry_summary(rows), "metric_config": METRIC_CONFIG,
                   "delta_grid": list(delta_grid), "configurations": list(models)}
        (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return rows, records


# -- box-plot data ------------------------------------------------------------------

def boxplot_values(records, axis_mode):
    if axis_mode not in AXIS_MODES:
        raise DomainError(f"axis_mode must be one of {AXIS_MODES}")
    ref = "target_entropy" if axis_mode == "eg_minus_et" else "source_entropy"
    return [(r["label"], r["delta"], r["generated_entropy"] - r[ref]) for r in records]


def export_boxplot_csv(records, axis_mode, path):
    """Write ``label,delta,value`` rows plus a ``.quartiles.csv`` sidecar."""
    values = boxplot_values(records, axis_mode)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label", "delta", "value"])
        for label, delta, v in values:
            w.writerow([label, repr(delta), repr(v)])
    groups = {}
    for label, delta, v in values:
        groups.setdefault((label, delta), []).append(v)
    sidecar = path.with_suffix(".quartiles.csv")
    with open(sidecar, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label", "delta", "n", "min", "q1", "median", "q3", "max"])
        for (label, delta), vs in groups.items():
            q = np.percentile(np.asarray(vs, dtype=np.float64), [0, 25, 50, 75, 100])
            w.writerow([label, repr(delta), len(vs)] + [repr(float(x)) for x in q])
    return path, sidecar


# -- experiment workspace -----------------------------------------------------------

class Experiment:
    """Lazily materializes dataset, frozen VQA and rephrasers under ``out_dir``."""

    def __init__(self, config: ExperimentConfig, out_dir):
        self.config = config
        self.out = Path(out_dir)
        self._dataset = self._vqa = self._bank = None
        self._train_samples = self._eval_samples = None

    # paths
    @property
    def dataset_path(self):
        return self.out / "dataset.jsonl"

    @property
    def vqa_dir(self):
        return self.out / "vqa"

    def model_dir(self, strategy, regime, use_attention=True, entropy_weight=None):
        return self.out / "models" / model_slug(strategy, regime, use_attention, entropy_weight)

    def sweep_dir(self, name):
        return self.out / "sweeps" / name

    def write_config(self):
        self.out.mkdir(parents=True, exist_ok=True)
        self.config.dump(self.out / "config.json")

    # stages
    def generate_data(self):
        ds = generate_dataset(self.config.seed, self.config.world)
        write_dataset(ds, self.dataset_path)
        self.write_config()
        self._dataset = ds
        return ds

    @property
    def dataset(self):
        if self._dataset is None:
            if not self.dataset_path.exists():
                raise ConfigurationError(f"dataset not found at {self.dataset_path}; run gen-data")
            self._dataset = read_dataset(self.dataset_path)
        return self._dataset

    @property
    def bank(self):
        if self._bank is None:
            self._bank = FeatureBank(self.dataset)
        return self._bank

    def train_vqa(self):
        vqa_cfg = replace(self.config.vqa, seed=self.config.seed)
        model, report = train_vqa(self.dataset, vqa_cfg)
        model.freeze()
        save_model(model, self.vqa_dir, {"report": report})
        self._vqa = model
        return model, report

    @property
    def vqa(self):
        if self._vqa is None:
            if not (self.vqa_dir / "manifest.json").exists():
                raise ConfigurationError(f"VQA checkpoint not found at {self.vqa_dir}; run train-vqa")
            self._vqa = load_model(self.vqa_dir)
        return self._vqa

    @property
    def train_samples(self):
        if self._train_samples is None:
            train_q, _ = self.dataset.split()
            self._train_samples = make_samples(train_q, self.vqa, self.bank)
        return self._train_samples

    @property
    def eval_samples(self):
        if self._eval_samples is None:
            _, eval_q = self.dataset.split()
            eval_q = eval_q[: self.config.sweep.eval_size]
            self._eval_samples = make_samples(eval_q, self.vqa, self.bank)
        return self._eval_samples

    def train_rephraser(self, strategy, regime, use_attention=True, entropy_weight=None,
                        out_dir=None, **overrides):
        """Train one rephraser configuration and checkpoint it."""
        if regime == "finetune" and "pretrain_checkpoint" not in overrides:
            overrides["pretrain_checkpoint"] = str(self.model_dir(strategy, "pretrain", use_attention))
        if entropy_weight is not None:
            overrides["entropy_weight"] = entropy_weight
        cfg = self.config.regime(regime, strategy, model={"use_attention": use_attention}, **overrides)
        if regime == "finetune" and not (Path(cfg.pretrain_checkpoint) / "manifest.json").exists():
            raise ConfigurationError(f"pretrain checkpoint missing: {cfg.pretrain_checkpoint}")
        result = train(self.train_samples, self.vqa, self.bank, cfg)
        target = Path(out_dir) if out_dir else self.model_dir(strategy, regime, use_attention)
        result.save(target)
        return result, target

    def label_dirs(self, labels):
        out = {}
        for label in labels:
            if label not in LABEL_CONFIGS:
                raise ConfigurationError(f"unknown configuration label {label!r}")
            strategy, regime = LABEL_CONFIGS[label]
            out[label] = self.model_dir(strategy, regime)
        return out

    def sweep_delta(self, labels=None):
        labels = labels or self.config.sweep.configurations
        return run_delta_sweep(self.label_dirs(labels), self.vqa, self.bank, self.eval_samples,
                               self.config.sweep.delta_grid, self.sweep_dir("delta"))


def run_lambda_sweep(exp: Experiment, lambda_grid=None):
    """Fine-tune Sampling-FT once per lambda from the shared pretrain, then Delta-sweep each."""
    lambda_grid = exp.config.sweep.lambda_grid if lambda_grid is None else lambda_grid
    pretrain_dir = exp.model_dir("sampling", "pretrain")
    if not (pretrain_dir / "manifest.json").exists():
        raise ConfigurationError(f"missing checkpoint for configuration 'Sampling Pretrain': {pretrain_dir}")
    models, lambdas = {}, {}
    for lam in lambda_grid:
        label = f"lambda={lam:g}"
        target = exp.out / "models" / "lambda" / f"{lam:g}"
        exp.train_rephraser("sampling", "finetune", entropy_weight=lam, out_dir=target)
        models[label] = target
        lambdas[label] = lam
    rows, records = run_delta_sweep(models, exp.vqa, exp.bank, exp.eval_samples,
                                    exp.config.sweep.delta_grid, exp.sweep_dir("lambda"), name="lambda")
    write_rows(rows, exp.sweep_dir("lambda") / "rows.csv", {"lambda": lambdas})
    return rows, records


ABLATION_LABELS = {
    ("pretrain", False): "Pretrain w/o A",
    ("pretrain", True): "Pretrain",
    ("finetune", False): "FT w/o A",
    ("finetune", True): "FT",
}


def run_attention_ablation(exp: Experiment, seeds=None, retrain=True):
    """Sampling Pretrain / FT with and without VQA attention, paired per Delta.

    ``seeds`` optionally maps ``use_attention`` to the seed for that variant;
    they must agree so the only controlled difference is attention usage.
    """
    seeds = seeds or {True: exp.config.seed, False: exp.config.seed}
    if seeds[True] != seeds[False]:
        raise ConfigurationError(f"attention ablation seeds differ: {seeds[True]} vs {seeds[False]}")
    models = {}
    for regime in ("pretrain", "finetune"):
        for use_att in (False, True):
            target = exp.model_dir("sampling", regime, use_att)
            if retrain or not (target / "manifest.json").exists():
                exp.train_rephraser("sampling", regime, use_attention=use_att, seed=seeds[use_att])
            models[ABLATION_LABELS[(regime, use_att)]] = target
    rows, records = run_delta_sweep(models, exp.vqa, exp.bank, exp.eval_samples,
                                    exp.config.sweep.delta_grid, exp.sweep_dir("attention"),
                                    name="attention")
    deltas = ablation_deltas(rows)
    path = exp.sweep_dir("attention") / "paired.json"
    path.write_text(json.dumps(deltas, indent=2, sort_keys=True) + "\n")
    return rows, records, deltas


def ablation_deltas(rows):
    """Per (Delta, regime): entropy error with attention minus without."""
    by = {(r.delta, r.label): r.abs_err_mean for r in rows}
    out = []
    for delta in sorted({r.delta for r in rows}):
        for with_a, without in (("Pretrain", "Pretrain w/o A"), ("FT", "FT w/o A")):
            if (delta, with_a) in by and (delta, without) in by:
                out.append({"delta": delta, "regime": with_a,
                            "err_with_attention": by[(delta, with_a)],
                            "err_without_attention": by[(delta, without)],
                            "difference": by[(delta, with_a)] - by[(delta, without)]})
    return out


def set_single_thread():
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)
