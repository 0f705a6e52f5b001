import sys

import pytest
import torch

from ambirephrase.synthworld import WorldConfig, generate_dataset
from ambirephrase.training import make_samples
from ambirephrase.vqa import FeatureBank, VqaTrainConfig, train_vqa

torch.set_num_threads(1)

SMALL_WORLD = WorldConfig(n_scenes=60)
TINY_VQA = VqaTrainConfig(embed_dim=8, hidden_size=16, attention_dim=8, mlp_size=16, max_iter=150)


@pytest.fixture(scope="session")
def small_dataset():
    return generate_dataset(3, SMALL_WORLD)


@pytest.fixture(scope="session")
def bank(small_dataset):
    return FeatureBank(small_dataset)


@pytest.fixture(scope="session")
def frozen_vqa(small_dataset):
    model, _ = train_vqa(small_dataset, TINY_VQA)
    return model.freeze()


@pytest.fixture(scope="session")
def samples(small_dataset, frozen_vqa, bank):
    train_q, eval_q = small_dataset.split()
    return make_samples(train_q, frozen_vqa, bank), make_samples(eval_q, frozen_vqa, bank)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
