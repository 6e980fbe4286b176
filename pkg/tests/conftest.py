import numpy as np
import pytest

from cxrvlm import synth
from cxrvlm.adapter import AdapterConfig
from cxrvlm.data import MAX_SEQ_LEN
from cxrvlm.lm import LMConfig
from cxrvlm.model import ModelConfig, VLM
from cxrvlm.vision import VisionConfig


def tiny_model_config(d_model: int = 16, lm_layers: int = 2) -> ModelConfig:
    """Smallest legal model; used wherever only contracts are under test."""
    return ModelConfig(
        vision=VisionConfig(image_side=16, patch_size=8, d_vision=16,
                            n_layers=2, n_heads=2),
        adapter=AdapterConfig(d_in=16, d_hidden=8, d_out=d_model),
        lm=LMConfig(d_model=d_model, n_layers=lm_layers, n_heads=2,
                    max_positions=MAX_SEQ_LEN + 4),
    )


@pytest.fixture
def tiny_model() -> VLM:
    return VLM.initialize(tiny_model_config(), seed=11)


@pytest.fixture
def toy_corpus_dir(tmp_path):
    synth.make_toy_corpus(tmp_path / "corpus",
                          {"training": 8, "validation": 3, "test-public": 2},
                          seed=3, max_images=3)
    return tmp_path / "corpus"


@pytest.fixture
def rng():
    return np.random.default_rng(0)
