import contextlib

import numpy as np
import pytest

from chirpscope import chirpgen, dataset, vit

SMALL = vit.ViTConfig(image_size=16, patch_size=4, width=16, layers=2, heads=2, ffn_dim=16, head_hidden=8, lora_rank=2)


@pytest.fixture(scope="session")
def small_manifest(tmp_path_factory):
    root = tmp_path_factory.mktemp("small_ds")
    chirpgen.make_dataset(40, 11, root)
    return chirpgen.load_manifest(root)


@pytest.fixture(scope="session")
def small_data(small_manifest):
    return dataset.load_dataset(small_manifest, SMALL, "all")


@pytest.fixture
def small_ckpt(small_manifest):
    params = vit.init_params(SMALL, 2, "fan_in")
    h = small_manifest.header
    return vit.Checkpoint(params, SMALL, {"channel_mean": h["channel_mean"], "channel_std": h["channel_std"]})


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance criteria outcomes, printed once at the end of the session
CRITERIA: dict[int, tuple[str, str]] = {}


@contextlib.contextmanager
def criterion(number: int, title: str):
    """Record PASS/FAIL for one acceptance criterion; failures still propagate."""
    CRITERIA[number] = ("FAIL", title)
    yield
    CRITERIA[number] = ("PASS", title)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        status, title = CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d} {status}: {title}")
