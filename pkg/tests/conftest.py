import warnings

import numpy as np
import pytest
import torch

# One line per acceptance criterion, filled in by tests/test_acceptance.py.
CRITERIA = {}


def record_criterion(number, passed, detail=""):
    CRITERIA[number] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        passed, detail = CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}")


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)
    warnings.simplefilter("default")


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def small_config(**overrides):
    """A fast model config for unit tests."""
    from objcustom.config import toy_config

    base = {"denoiser.base_width": 8, "denoiser.image_size": 8, "denoiser.T": 50, "train.batch_size": 4,
            "train.max_steps": "null",
            "sampling.steps": 5}
    base.update(overrides)
    return toy_config(**base)


def toy_items(n=4, seed=0, size=320):
    """(ref, mask, target, caption, class_word) tuples from the toy corpus."""
    from objcustom.dataset import build_pairs
    from objcustom.toy import make_toy_groups

    groups = make_toy_groups(n, 3, seed=seed, size=size, kinds=("video",))
    pairs, _ = build_pairs(groups, seed)
    return [(p.ref_image, p.ref_mask, p.target_image, p.caption, p.class_word) for p in pairs]


@pytest.fixture(scope="session")
def small_model_and_batch():
    from objcustom.model import CustomizationModel
    from objcustom.trainer import prepare_batch

    cfg = small_config()
    model = CustomizationModel(cfg, seed=0)
    batch = prepare_batch(model, toy_items(4))
    return model, batch
