import pytest

from core.data import SyntheticSpec, generate_synthetic_dataset
from core.encoder import EncoderConfig
from core.model import random_model


@pytest.fixture
def tiny_encoder():
    return EncoderConfig(patch_size=8, embed_dim=8, depth=1, heads=2, mlp_ratio=1.0, resolutions=[16, 32])


@pytest.fixture
def tiny_spec():
    return SyntheticSpec(image_size=32, lesion_radius=(2, 4), counts={"train": 12, "val": 4, "test": 4}, seed=0)


@pytest.fixture
def tiny_dataset_dir(tmp_path, tiny_spec):
    return generate_synthetic_dataset(tiny_spec, tmp_path / "data")


@pytest.fixture
def make_model(tiny_encoder):
    def factory(seed=0, classes=("normal", "drusen"), **kwargs):
        return random_model(tiny_encoder, list(classes), seed, **kwargs)

    return factory
