import logging
import os
from typing import Tuple

import numpy as np
from PIL import Image

from dva.src.models.exceptions import DimensionError, MissingArtifactError, ParseError

# Initialize logger
logger = logging.getLogger(__name__)


def read_ppm(path: str) -> np.ndarray:
    """Load an image as an H x W x 3 float32 array in [0, 1]"""
    if not os.path.exists(path):
        raise MissingArtifactError(path)
    try:
        with Image.open(path) as img:
            array = np.asarray(img.convert("RGB"), dtype=np.uint8)
    except (OSError, ValueError) as e:
        raise ParseError(f"unreadable image: {e}", path=str(path)) from e
    return array.astype(np.float32) / np.float32(255.0)


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_ppm(path: str, image: np.ndarray) -> str:
    """Save an H x W x 3 float image in [0, 1] as binary PPM (P6, maxval 255)"""
    check_image(image)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    Image.fromarray(to_uint8(image)).save(path, format="PPM")
    return path


def check_image(image: np.ndarray) -> Tuple[int, int]:
    if not isinstance(image, np.ndarray) or image.ndim != 3 or image.shape[2] != 3:
        raise DimensionError(f"expected an H x W x 3 image, got {getattr(image, 'shape', type(image))}")
    return image.shape[0], image.shape[1]


def resize(image: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize of a float image, channel by channel"""
    h, w = check_image(image)
    if (h, w) == (height, width):
        return image.astype(np.float32, copy=True)
    channels = []
    for c in range(3):
        plane = Image.fromarray(np.ascontiguousarray(image[:, :, c], dtype=np.float32))
        plane = plane.resize((width, height), resample=Image.Resampling.BILINEAR)
        channels.append(np.asarray(plane, dtype=np.float32))
    return np.clip(np.stack(channels, axis=-1), 0.0, 1.0)


def resize_square(image: np.ndarray, size: int) -> np.ndarray:
    return resize(image, size, size)


def crop(image: np.ndarray, top: int, left: int, size: int) -> np.ndarray:
    h, w = check_image(image)
    if top < 0 or left < 0 or top + size > h or left + size > w:
        raise DimensionError(f"crop ({top}, {left}, {size}) outside image {h}x{w}")
    return image[top:top + size, left:left + size]


def center_crop(image: np.ndarray, size: int) -> np.ndarray:
    h, w = check_image(image)
    return crop(image, (h - size) // 2, (w - size) // 2, size)


def hflip(image: np.ndarray) -> np.ndarray:
    return image[:, ::-1]
