from pathlib import Path
from typing import Callable, Optional

import numpy as np
import pytest

from app.internal.corpus import ImagePair
from app.internal.geometry import GrayImage
from app.internal.imaging import save_image


def make_pair(
    ref: np.ndarray,
    deg: np.ndarray,
    dmos: float = 0.5,
    reference: str = "ref",
    category: Optional[str] = None,
) -> ImagePair:
    return ImagePair(
        ref=GrayImage(values=ref),
        deg=GrayImage(values=deg),
        dmos=dmos,
        reference=reference,
        category=category,
    )


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240917)


@pytest.fixture
def write_png(tmp_path: Path) -> Callable[[str, np.ndarray], Path]:
    """Writes an 8-bit grayscale PNG under tmp_path and returns its path."""

    def write(name: str, values: np.ndarray) -> Path:
        path = tmp_path / name
        path.parent.mkdir(parents=True, exist_ok=True)
        save_image(GrayImage(values=values), path)
        return path

    return write


@pytest.fixture
def write_manifest_file(tmp_path: Path) -> Callable[[list[str], str], Path]:
    def write(rows: list[str], name: str = "set.csv") -> Path:
        path = tmp_path / name
        lines = ["ref_path,deg_path,dmos,category,codec,quality", *rows]
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return path

    return write
