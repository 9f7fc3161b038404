import sys

import pytest
import torch

from mf2.annotation import MockClient, annotate_dataset
from mf2.data import make_fixture_dataset
from mf2.model import FaceBatch, MF2Config, MF2Model, caption_sets

torch.set_num_threads(1)


def tiny_config(**kw):
    """D=8, one block everywhere, 32 px images."""
    return MF2Config.toy(embed_dim=8, image_size=32, patch_size=8, n_blocks=1, n_heads=2, n_queries=4, **kw)


@pytest.fixture(scope="session")
def fixture8():
    return make_fixture_dataset(8, 1, seed=0, image_size=32)


@pytest.fixture(scope="session")
def captions8(fixture8):
    return caption_sets(annotate_dataset(fixture8, MockClient(0), ("au", "emotion", "key_au")).records)


@pytest.fixture()
def batch8(fixture8, captions8):
    return FaceBatch.from_manifest(fixture8, captions8)


@pytest.fixture()
def tiny_model():
    torch.manual_seed(0)
    return MF2Model(tiny_config())


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
