import sys

import pytest

from flexoffload.manifest import generate_manifest, write_blob
from flexoffload.storage import open_store


@pytest.fixture
def toy():
    """N=2 unit model: attention tensors 1 byte, FFN tensors 3 bytes, no embeddings."""
    return generate_manifest(2, 1, 3, embed_bytes=0, alignment=1)


@pytest.fixture
def small_model(tmp_path):
    """8 layers, 4 KiB-aligned, ~900 KiB on disk, seed 7."""
    m = generate_manifest(8, 8192, 24576, embed_bytes=4096, alignment=4096)
    path = tmp_path / "small.blob"
    write_blob(m, path, seed=7)
    return m, path


@pytest.fixture
def small_store(small_model):
    m, path = small_model
    with open_store(path, m) as store:
        yield m, store


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
