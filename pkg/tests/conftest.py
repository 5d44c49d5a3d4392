import pytest
import torch

from crosslayer.model import CrossLayerVLM, FusionConfig, ModelConfig
from crosslayer.synth import make_batch


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(1234)


def small_model(dtype=torch.float64, **fusion) -> CrossLayerVLM:
    torch.manual_seed(0)
    return CrossLayerVLM(ModelConfig(), FusionConfig(**fusion)).to(dtype)


def randomize_(model: CrossLayerVLM, scale: float = 0.3, seed: int = 0) -> CrossLayerVLM:
    """Give every parameter (incl. zero-initialised LoRA B) a generic non-zero value."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.startswith("vision."):
                continue
            p.add_(scale * torch.randn(p.shape, generator=gen, dtype=p.dtype))
    return model


@pytest.fixture
def batch():
    kinds = ["detail", "semantic", "compositional"] * 3
    return make_batch(range(100, 109), kinds)
