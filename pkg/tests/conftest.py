import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from hardmask.config import FrontendConfig, ModelConfig, SynthConfig
from hardmask.corpus import generate_synthetic

torch.set_num_threads(1)


def tiny_model_config() -> ModelConfig:
    return ModelConfig(
        dim=16,
        encoder_layers=2,
        attention_heads=2,
        ffn_dim=32,
        head_layers=1,
        head_dim=16,
        head_kernel=7,
        layers_to_average=2,
        frontend=FrontendConfig(layers=((16, 10, 5), (16, 8, 4))),
    )


def tiny_synth_config(num=12, seed=0) -> SynthConfig:
    return SynthConfig(
        num_utterances=num,
        segments_per_utterance=4,
        codebook_size=4,
        segment_len_range=(150, 250),
        sample_rate=8000,
        seed=seed,
    )


@pytest.fixture(scope="session")
def tiny_model_cfg():
    return tiny_model_config()


@pytest.fixture(scope="session")
def tiny_corpus():
    cfg = tiny_synth_config()
    return generate_synthetic(cfg, tiny_model_config().frontend)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
