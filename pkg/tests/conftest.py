import os

import numpy as np
import pytest

from dva.src.models.schemas import (
    AdapterConfig, EncoderConfig, GenConfig, LossConfig, OpaConfig, RunConfig, TrainConfig,
)
from dva.src.services import opa, synthetic
from dva.src.services.encoder import EncoderWeights, ViTEncoder
from dva.src.services.retrieval import build_split, train_class_count
from dva.src.utils.manifest import load_detections, read_manifest


# =============================================================================
# Configurations
# =============================================================================

@pytest.fixture
def toy_cfg() -> EncoderConfig:
    """D=32, d=4, L=2, 8x8 patches on 32 px images"""
    return EncoderConfig.toy()


@pytest.fixture
def toy_adapter_cfg() -> AdapterConfig:
    return AdapterConfig(d=4, projectors=["q", "k"])


@pytest.fixture
def tiny_run_cfg() -> RunConfig:
    """Run configuration small enough for unit tests"""
    return RunConfig(
        encoder=EncoderConfig.toy(),
        adapter=AdapterConfig(d=4, projectors=["q", "k"]),
        opa=OpaConfig(blur_kernel=9, output_size=64),
        loss=LossConfig(beta=3.0),
        train=TrainConfig(lr0=0.01, epochs=3, batch_size=4, seed=0),
        synthetic=GenConfig(n_classes=4, n_per_class=6, image_size=64),
    )


# =============================================================================
# Encoder
# =============================================================================

@pytest.fixture
def toy_weights(toy_cfg) -> EncoderWeights:
    return EncoderWeights.init(toy_cfg, seed=0)


@pytest.fixture
def toy_encoder(toy_weights) -> ViTEncoder:
    return ViTEncoder(toy_weights)


@pytest.fixture
def toy_images(toy_cfg) -> np.ndarray:
    """Ten random images in [0, 1]"""
    rng = np.random.default_rng(42)
    return rng.random((10, toy_cfg.image_size, toy_cfg.image_size, 3)).astype(np.float32)


# =============================================================================
# Datasets
# =============================================================================

@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """4 classes x 6 images at 64 px, with its OPA dataset (closed split)"""
    root = tmp_path_factory.mktemp("tiny")
    gen_cfg = GenConfig(n_classes=4, n_per_class=6, image_size=64)
    data_dir = os.path.join(root, "data")
    synthetic.gen_dataset(gen_cfg, data_dir)

    records = read_manifest(os.path.join(data_dir, synthetic.MANIFEST_FILE))
    detections = load_detections(os.path.join(data_dir, synthetic.DETECTIONS_FILE))
    train_records, test_records = build_split(records, "closed")
    num_classes = train_class_count(train_records)
    opa_records = opa.build_opa_dataset(
        train_records, detections, OpaConfig(blur_kernel=9, output_size=64),
        os.path.join(root, "opa"), num_classes=num_classes,
    )
    return {
        "root": str(root),
        "data_dir": data_dir,
        "records": records,
        "detections": detections,
        "train": train_records,
        "test": test_records,
        "opa": opa_records,
        "num_classes": num_classes,
    }
