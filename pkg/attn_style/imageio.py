"""8-bit PNG reading and writing.

Inside the package an image is a 3×H×W float32 Tensor in [−1, 1]. Reading maps an 8-bit value p to
p/127.5 − 1 after a bicubic resize to the requested resolution; writing clips to [−1, 1] and quantizes
with round((x + 1)/2 · 255).
"""
import numpy as np
from PIL import Image

from attn_style.exc import ShapeError
from attn_style.tensor import Tensor, as_tensor


def from_uint8(array):
    """H×W×3 uint8 array → 3×H×W Tensor in [−1, 1]."""
    array = np.asarray(array)
    if array.ndim != 3 or array.shape[2] != 3:
        raise ShapeError("Expected an H×W×3 RGB array, got shape %r" % (array.shape,))
    return Tensor(array.astype(np.float64).transpose(2, 0, 1) / 127.5 - 1.0)


def to_uint8(image):
    """3×H×W Tensor in [−1, 1] → H×W×3 uint8 array."""
    values = as_tensor(image).numpy().astype(np.float64)
    if values.ndim != 3 or values.shape[0] != 3:
        raise ShapeError("Expected a 3×H×W image, got shape %r" % (values.shape,))
    values = np.clip(values, -1.0, 1.0)
    return np.round((values + 1.0) / 2.0 * 255.0).astype(np.uint8).transpose(1, 2, 0)


def to_unit_range(image):
    """[−1, 1] Tensor → float64 array in [0, 1], the range the metrics work in."""
    return (np.clip(as_tensor(image).numpy().astype(np.float64), -1.0, 1.0) + 1.0) / 2.0


def quantize(image):
    """The value an image takes after a save/load cycle."""
    return from_uint8(to_uint8(image))


def load_image(path, resolution=None):
    """Read a PNG (or any format Pillow knows) as RGB.

    :param resolution: side of the square output; the image is bicubically resized when it differs
    """
    with Image.open(path) as handle:
        picture = handle.convert("RGB")
    if resolution is not None and picture.size != (resolution, resolution):
        picture = picture.resize((resolution, resolution), Image.BICUBIC)
    return from_uint8(np.asarray(picture))


def save_image(image, path):
    Image.fromarray(to_uint8(image)).save(path, format="PNG")
