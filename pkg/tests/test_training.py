import csv
import math
from dataclasses import replace

import numpy as np
import pytest

from ambirephrase.exceptions import ConfigurationError, ContractError, StrategyError
from ambirephrase.rephraser import load_rephraser
from ambirephrase.training import (
    LOSS_LOG_NAME, RephraserConfig, RephraseSample, TrainRegimeConfig, build_index,
    make_noise_target, make_sampling_target, question_entropy, rephrase_batch, train,
)
from ambirephrase.vqa import VqaModel

SMALL_MODEL = RephraserConfig(hidden_size=16, embed_dim=8, gumbel_temperature=0.5, straight_through=True)


def _cfg(**kw):
    base = TrainRegimeConfig(max_iter=20, batch_size=8, model=SMALL_MODEL)
    return replace(base, **kw)


def test_noise_target_examples():
    class Fixed:
        def __init__(self, eps):
            self.eps = eps

        def uniform(self, lo, hi):
            return self.eps

    s = RephraseSample(0, (4, 2), 2.0)
    t = make_noise_target(s, Fixed(0.37))
    assert t.target == s.source and abs(t.target_entropy - 2.37) < 1e-12
    t = make_noise_target(replace(s, source_entropy=0.3), Fixed(-0.8))
    assert t.target_entropy == 0.0
    t = make_noise_target(replace(s, source_entropy=2.6), Fixed(0.5), max_entropy=math.log(16))
    assert t.target_entropy == math.log(16)


def test_noise_target_support():
    rng = np.random.default_rng(0)
    s = RephraseSample(0, (4, 2), 1.5)
    e = np.array([make_noise_target(s, rng, 1.0).target_entropy for _ in range(10_000)])
    assert e.min() >= 0.5 and e.max() <= 2.5
    assert abs(e.mean() - 1.5) < 0.03


def test_sampling_target_is_uniform_over_others(frozen_vqa, bank, small_dataset):
    sid = small_dataset.scenes[0].scene_id
    qs = [q.tokens for q in small_dataset.questions if q.scene_id == sid][:3]
    samples = [RephraseSample(sid, q, 0.0) for q in qs]
    index = build_index(samples)
    rng = np.random.default_rng(0)
    picks = [make_sampling_target(samples[0], index, frozen_vqa, bank, rng).target for _ in range(10_000)]
    counts = {q: picks.count(q) for q in qs}
    assert counts[qs[0]] == 0
    sigma = math.sqrt(10_000 * 0.25)
    for q in qs[1:]:
        assert abs(counts[q] - 5000) < 3 * sigma


def test_sampling_target_entropy_is_vqa_entropy(frozen_vqa, bank, samples):
    train_samples, _ = samples
    index = build_index(train_samples)
    rng = np.random.default_rng(1)
    for s in train_samples[:20]:
        t = make_sampling_target(s, index, frozen_vqa, bank, rng)
        assert t.target != s.source
        assert t.target_entropy == question_entropy(frozen_vqa, bank, s.scene_id, t.target)


def test_singleton_scene_is_strategy_error(frozen_vqa, bank):
    s = RephraseSample(0, (4, 2), 0.1)
    with pytest.raises(StrategyError):
        make_sampling_target(s, build_index([s]), frozen_vqa, bank, np.random.default_rng(0))


def test_config_validation():
    with pytest.raises(ConfigurationError):
        _cfg(regime="warmup").validate()
    with pytest.raises(ConfigurationError):
        _cfg(regime="finetune").validate()
    with pytest.raises(ConfigurationError):
        _cfg(entropy_weight=-1).validate()
    assert _cfg(regime="pretrain", entropy_weight=5).effective_entropy_weight == 0.0


def test_requires_frozen_vqa(samples, bank):
    with pytest.raises(ContractError):
        train(samples[0], VqaModel(40, 16), bank, _cfg())


def test_pretrain_never_uses_gumbel_and_keeps_vqa(frozen_vqa, bank, samples):
    digest = frozen_vqa.digest()
    result = train(samples[0], frozen_vqa, bank, _cfg(regime="pretrain", entropy_weight=3.0))
    assert result.gumbel_calls == 0
    assert all(math.isnan(r["l_ent"]) for r in result.loss_log)
    assert frozen_vqa.digest() == digest == result.vqa_digest


def test_pretrain_reduces_vqg_loss(frozen_vqa, bank, samples):
    digest = frozen_vqa.digest()
    subset = samples[0][:200]
    result = train(subset, frozen_vqa, bank, _cfg(regime="pretrain", max_iter=500))
    log = [r["l_vqg"] for r in result.loss_log]
    assert np.mean(log[-50:]) < np.mean(log[:50])
    assert frozen_vqa.digest() == digest


@pytest.mark.parametrize("strategy", ["noise", "sampling"])
def test_scratch_logs_both_components(frozen_vqa, bank, samples, strategy):
    digest = frozen_vqa.digest()
    result = train(samples[0], frozen_vqa, bank, _cfg(regime="scratch", strategy=strategy))
    assert result.gumbel_calls == 20
    assert all(np.isfinite([r["l_vqg"], r["l_ent"], r["total"]]).all() for r in result.loss_log)
    assert frozen_vqa.digest() == digest


def test_finetune_resumes_from_pretrain(tmp_path, frozen_vqa, bank, samples):
    digest = frozen_vqa.digest()
    pre = train(samples[0], frozen_vqa, bank, _cfg(regime="pretrain"))
    pre.save(tmp_path / "pre")
    with open(tmp_path / "pre" / LOSS_LOG_NAME) as fh:
        assert len(list(csv.DictReader(fh))) == 20
    # zero steps of finetuning = the pretrain checkpoint
    ft0 = train(samples[0], frozen_vqa, bank,
                _cfg(regime="finetune", pretrain_checkpoint=str(tmp_path / "pre"), max_iter=0))
    assert ft0.model.digest() == pre.model.digest()
    ft = train(samples[0], frozen_vqa, bank,
               _cfg(regime="finetune", pretrain_checkpoint=str(tmp_path / "pre")))
    assert ft.model.digest() != pre.model.digest()
    step = next(iter(ft.optimizer.state.values()))["step"]
    assert float(step) == 40
    with pytest.raises(ConfigurationError):
        train(samples[0], frozen_vqa, bank, _cfg(regime="finetune", pretrain_checkpoint=str(tmp_path / "x")))
    assert frozen_vqa.digest() == digest


def test_training_is_deterministic(tmp_path, frozen_vqa, bank, samples):
    digest = frozen_vqa.digest()
    cfg = _cfg(regime="scratch", seed=4)
    a = train(samples[0], frozen_vqa, bank, cfg)
    b = train(samples[0], frozen_vqa, bank, cfg)
    assert a.model.digest() == b.model.digest()
    assert a.loss_log == b.loss_log
    a.save(tmp_path / "a")
    b.save(tmp_path / "b")
    assert (tmp_path / "a" / "tensors.bin").read_bytes() == (tmp_path / "b" / "tensors.bin").read_bytes()
    c = train(samples[0], frozen_vqa, bank, replace(cfg, seed=5))
    assert c.model.digest() != a.model.digest()
    assert frozen_vqa.digest() == digest


def test_checkpoint_manifest_records_settings(tmp_path, frozen_vqa, bank, samples):
    result = train(samples[0], frozen_vqa, bank, _cfg(regime="scratch", entropy_weight=2.0))
    result.save(tmp_path / "m")
    _, _, manifest = load_rephraser(tmp_path / "m")
    meta = manifest["metadata"]
    assert meta["entropy_weight"] == 2.0 and meta["gumbel_temperature"] == 0.5
    assert meta["use_attention"] is True and meta["regime"] == "scratch" and meta["strategy"] == "sampling"


def test_rephrase_batch_bounds(frozen_vqa, bank, samples):
    digest = frozen_vqa.digest()
    model = train(samples[0], frozen_vqa, bank, _cfg(regime="pretrain")).model
    batch = [replace(s, target_entropy=s.source_entropy) for s in samples[1][:40]]
    out = rephrase_batch(model, frozen_vqa, bank, batch, batch_size=16)
    assert len(out) == 40
    for s in out:
        assert 0.0 <= s.generated_entropy <= frozen_vqa.max_entropy + 1e-9
        assert s.generated[-1] == 2
        assert s.generated_entropy == pytest.approx(
            question_entropy(frozen_vqa, bank, s.scene_id, s.generated), abs=1e-6)
    assert frozen_vqa.digest() == digest
