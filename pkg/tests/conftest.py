import numpy as np
import pytest

from fcmoe.model import ModelConfig


def toy_model_config(**overrides) -> ModelConfig:
    """Small-but-complete architecture used across the test suite."""
    base = dict(
        n_rois=6,
        embed_dim=8,
        n_heads=2,
        n_layers=1,
        reduced_dim=4,
        n_experts=2,
        topk=(2, 1),
        cv_coef=0.23,
        embed_hidden=8,
        ffn_hidden=8,
        reduce_hidden=8,
        attn_hidden=4,
        cls_hidden=8,
        gate_hidden=8,
        seed=7,
    )
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture
def toy_config() -> ModelConfig:
    return toy_model_config()


def random_fc_batch(rng: np.random.Generator, n_batch: int, n_rois: int) -> np.ndarray:
    """Symmetric unit-diagonal matrices in [-1, 1], one per subject."""
    raw = rng.uniform(-1.0, 1.0, size=(n_batch, n_rois, n_rois))
    sym = (raw + np.swapaxes(raw, 1, 2)) / 2.0
    idx = np.arange(n_rois)
    sym[:, idx, idx] = 1.0
    return sym
