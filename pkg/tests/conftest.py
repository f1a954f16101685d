import numpy as np
import pytest
from PIL import Image


def write_png(path, array):
    """Write a uint8 array (H, W) or (H, W, 3) as PNG."""
    arr = np.asarray(array, dtype=np.uint8)
    Image.fromarray(arr, mode="L" if arr.ndim == 2 else "RGB").save(path)
    return path


def smooth_image(rng, h, w, channels=3):
    yy, xx = np.mgrid[0:h, 0:w]
    f1, f2 = rng.uniform(3, 9, size=2)
    base = 0.5 + 0.3 * np.sin(xx / f1 + rng.uniform(0, 6)) * np.cos(yy / f2)
    img = base[..., None] + 0.08 * rng.random((h, w, channels))
    return np.clip(img, 0, 1)


def make_dataset(directory, n, h=80, w=72, channels=3, seed=0):
    rng = np.random.default_rng(seed)
    directory.mkdir(parents=True, exist_ok=True)
    for i in range(n):
        img = smooth_image(rng, h, w, channels)
        data = np.floor(img * 255 + 0.5).astype(np.uint8)
        write_png(directory / f"img{i:02d}.png", data[..., 0] if channels == 1 else data)
    return directory


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def dataset3(tmp_path):
    return make_dataset(tmp_path / "data", 3)
