import numpy as np
import pytest
from PIL import Image


@pytest.fixture
def image_dir(tmp_path):
    """Eight deterministic sample images of varied sizes."""
    rng = np.random.default_rng(2024)
    d = tmp_path / "images"
    d.mkdir()
    sizes = [(256, 256), (300, 240), (240, 300), (512, 256),
             (256, 512), (320, 320), (260, 340), (280, 256)]
    for k, (w, h) in enumerate(sizes):
        arr = rng.integers(0, 256, (h, w, 3), dtype=np.uint8)
        Image.fromarray(arr).save(d / f"sample{k}.png")
    return d
