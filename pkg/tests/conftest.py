import numpy as np
import pytest
import torch

from mtscene.backbone import BackboneConfig
from mtscene.datasets import SyntheticConfig, generate_synthetic, load_folder_dataset
from mtscene.model import JointSceneModel, ModelConfig
from mtscene.recog_path import RecogPathConfig
from mtscene.seg_path import SegPathConfig


def tiny_model_config(num_seg_classes: int = 3, num_scene_classes: int = 2) -> ModelConfig:
    """Smallest legal joint model, used for exhaustive gradient checks."""
    return ModelConfig(
        backbone=BackboneConfig(stage_blocks=[1, 1, 1, 1],
                                stage_channels=[2, 2, 4, 4]),
        seg=SegPathConfig(num_classes=num_seg_classes, decoder_channels=4,
                          attn_channels=2, spp_grids=[1]),
        recog=RecogPathConfig(num_scene_classes=num_scene_classes,
                              extractor_channels=[4, 4, 4],
                              attention_reduction=2, fusion_channels=4),
    )


@pytest.fixture
def tiny_model():
    torch.manual_seed(0)
    return JointSceneModel(tiny_model_config())


@pytest.fixture(scope="session")
def toy_dataset_root(tmp_path_factory):
    """Small synthetic dataset shared across tests that only read it."""
    root = tmp_path_factory.mktemp("synthdata") / "shapes"
    generate_synthetic(
        SyntheticConfig(train_samples=12, val_samples=8, seed=7, image_size=64),
        root,
    )
    return root


@pytest.fixture(scope="session")
def toy_train_set(toy_dataset_root):
    return load_folder_dataset(toy_dataset_root, "train")


@pytest.fixture(scope="session")
def toy_val_set(toy_dataset_root):
    return load_folder_dataset(toy_dataset_root, "val")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
