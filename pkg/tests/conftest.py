import pytest

from sitsx.corpus import make_corpus
from sitsx.ingest import load_base_corpus
from sitsx.model import ModelConfig
from sitsx.synthgen import generate_dataset

TINY_MODEL = ModelConfig(embed_dim=8, token_patch_size=8, encoder_depth=1, num_heads=2, decoder_depth=1,
                         input_size=16)


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    """A 40-series, 16px synthetic dataset shared by the harness, report and CLI tests."""
    root = tmp_path_factory.mktemp("tiny")
    make_corpus(root / "corpus", per_class=3, size=16, seed=1)
    generate_dataset(load_base_corpus(root / "corpus"), 40, root / "ds", master_seed=3)
    return root / "ds"
