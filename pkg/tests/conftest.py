import os

import pytest
import torch


def synth_image(seed: int, size: int = 64) -> torch.Tensor:
    """Procedural natural-ish test image: gradients, blobs, mild noise."""
    g = torch.Generator().manual_seed(seed)
    yy, xx = torch.meshgrid(torch.linspace(0, 1, size), torch.linspace(0, 1, size),
                            indexing="ij")
    base = torch.stack([yy, xx, 0.5 * (yy + xx)])
    for _ in range(5):
        cy, cx = torch.rand(2, generator=g)
        r = 0.08 + 0.25 * torch.rand(1, generator=g)
        blob = ((yy - cy) ** 2 + (xx - cx) ** 2 < r ** 2).float()
        base = base * (1 - blob) + torch.rand(3, 1, 1, generator=g) * blob
    return (base + 0.05 * torch.randn(3, size, size, generator=g)).clamp(0, 1)


def env_int(name: str, default: int) -> int:
    """Test-scale override hook (development only; defaults are authoritative)."""
    return int(os.environ.get(name, default))


@pytest.fixture(scope="session")
def acceptance_corpus():
    """200 images for the JPEG-simulator desk-scale run, plus 10 held out."""
    train = [synth_image(1000 + i) for i in range(200)]
    held_out = [synth_image(5000 + i) for i in range(10)]
    return train, held_out


@pytest.fixture(scope="session")
def overfit_images():
    """The eight seen images of the end-to-end learning-sanity run."""
    return [synth_image(i) for i in range(8)]
