from __future__ import annotations

import numpy as np
import pytest
import torch
from PIL import Image

from exporter_fixtures import TinyNet


@pytest.fixture(scope="session")
def tiny_model_path(tmp_path_factory):
    torch.manual_seed(0)
    path = tmp_path_factory.mktemp("model") / "tiny.pt"
    torch.jit.script(TinyNet()).save(str(path))
    return path


@pytest.fixture(scope="session")
def image_dir(tmp_path_factory):
    """Three distinct small RGB images with known sizes."""
    root = tmp_path_factory.mktemp("images")
    rng = np.random.default_rng(0)
    for name, (w, h) in (("a.png", (40, 30)), ("b.png", (32, 48)), ("c.png", (24, 24))):
        arr = rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8)
        Image.fromarray(arr, "RGB").save(root / name)
    return root
