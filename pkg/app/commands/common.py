import math
from contextlib import contextmanager
from enum import Enum
from pathlib import Path
from typing import Annotated, Iterator, cast

import numpy as np
import typer
from pydantic import ValidationError

from app.internal.corpus import ImagePair, Manifest, StretchMode, load_manifest, load_pairs
from app.internal.stats import CorrelationKind
from app.util.errors import ExitCode, ParseError, StrainIQAError
from app.util.log import logger


class Stretch(str, Enum):
    per_image = "per_image"
    paired = "paired"
    none = "none"

    @property
    def mode(self) -> StretchMode:
        return cast(StretchMode, self.value)


class Statistic(str, Enum):
    pearson = "pearson"
    spearman = "spearman"

    @property
    def kind(self) -> CorrelationKind:
        return cast(CorrelationKind, self.value)


ManifestOption = Annotated[
    Path, typer.Option("--manifest", help="Rating manifest (ref_path,deg_path,dmos,category,codec,quality).")
]
SeedOption = Annotated[int, typer.Option("--seed", help="Seed for every random choice.")]
StretchOption = Annotated[
    Stretch, typer.Option("--stretch", help="Luminance stretch applied after decoding.")
]
CropOption = Annotated[
    bool, typer.Option("--crop", help="Crop images to whole 8x8 tiles instead of failing.")
]


def fail(message: str, code: ExitCode):
    typer.echo(f"error: {message}", err=True)
    raise typer.Exit(code=int(code))


@contextmanager
def reporting_errors() -> Iterator[None]:
    """Turns domain errors into a one-line diagnostic and the matching exit code."""
    try:
        yield
    except StrainIQAError as e:
        logger.debug("Command failed", error=e.message, kind=type(e).__name__)
        fail(e.message, e.exit_code)
    except ValidationError as e:
        fail(f"invalid parameter: {e.errors()[0]['msg']}", ExitCode.parameter)


def load_corpus(manifest_path: Path, stretch: Stretch) -> tuple[Manifest, list[ImagePair]]:
    manifest = load_manifest(manifest_path)
    return manifest, load_pairs(manifest, stretch.mode)


def parse_grid(text: str) -> list[float]:
    """
    `start:stop:step` (both ends inclusive) or a comma-separated list. Values
    are rounded to 10 decimals so that 0.4 + 3 * 0.1 prints as 0.7.
    """
    text = text.strip()
    try:
        if ":" in text:
            start, stop, step = (float(v) for v in text.split(":"))
            if not step > 0 or stop < start:
                raise ParseError(f"grid {text!r}: need step > 0 and stop >= start")
            count = math.floor((stop - start) / step + 1e-9) + 1
            values = [float(v) for v in np.round(start + step * np.arange(count), 10)]
        else:
            values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ParseError(f"grid {text!r} is not start:stop:step or a list of numbers") from None
    if not values:
        raise ParseError("grid is empty")
    return values
