from pathlib import Path

import numpy as np
import numpy.typing as npt
from PIL import Image, UnidentifiedImageError

from app.internal.geometry import GrayImage
from app.util.errors import ImageDecodeError, ParameterError
from app.util.log import logger

LUMA_WEIGHTS = (0.299, 0.587, 0.114)


def to_grayscale(rgb: npt.NDArray[np.integer] | npt.NDArray[np.floating]) -> GrayImage:
    """
    Y = 0.299 R + 0.587 G + 0.114 B on 8-bit channels, rounded half away from
    zero to an integer and kept as a real value.
    """
    arr = np.asarray(rgb)
    if arr.ndim != 3 or arr.shape[2] not in (3, 4):
        raise ImageDecodeError(f"unsupported channel layout {arr.shape}")
    channels = arr[:, :, :3].astype(np.float64)
    if np.any(channels < 0) or np.any(channels > 255):
        raise ParameterError("RGB channels must be 8-bit values in [0, 255]")
    r, g, b = LUMA_WEIGHTS
    luma = r * channels[:, :, 0] + g * channels[:, :, 1] + b * channels[:, :, 2]
    # luma is non-negative, so half away from zero is floor(x + 0.5)
    return GrayImage(values=np.clip(np.floor(luma + 0.5), 0.0, 255.0))


def load_image(path: str | Path) -> GrayImage:
    """Decodes PNG, PGM/PPM or JPEG files into a grayscale image."""
    path = Path(path)
    try:
        with Image.open(path) as img:
            img.load()
            mode = img.mode
            match mode:
                case "L":
                    return GrayImage(values=np.asarray(img, dtype=np.float64))
                case "RGB" | "RGBA":
                    return to_grayscale(np.asarray(img))
                case "P" | "LA":
                    return to_grayscale(np.asarray(img.convert("RGB")))
                case _:
                    raise ImageDecodeError(f"{path}: unsupported image mode {mode}")
    except FileNotFoundError:
        raise ImageDecodeError(f"{path}: file not found") from None
    except (UnidentifiedImageError, OSError) as e:
        logger.debug("Failed to decode image", path=str(path), error=str(e))
        raise ImageDecodeError(f"{path}: cannot decode image ({e})") from None


def save_image(img: GrayImage, path: str | Path):
    """Writes an 8-bit grayscale file; the format follows the file suffix."""
    data = np.clip(np.floor(img.values + 0.5), 0, 255).astype(np.uint8)
    Image.fromarray(data).save(path)
