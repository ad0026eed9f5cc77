from pathlib import Path
from typing import Annotated

import typer

from app.commands.common import CropOption, Stretch, StretchOption, reporting_errors
from app.internal.corpus import ImagePair, stretch_pair
from app.internal.imaging import load_image
from app.internal.metrics import MetricSpec, build_scorer
from app.internal.scoring import TrainableScorer
from app.util.errors import ParameterError
from app.util.numfmt import fmt


def score(
    metric: Annotated[str, typer.Option("--metric", help="Metric descriptor, e.g. gauss:2.0.")],
    ref: Annotated[Path, typer.Option("--ref", help="Reference image.")],
    deg: Annotated[Path, typer.Option("--deg", help="Degraded image.")],
    stretch: StretchOption = Stretch.per_image,
    crop: CropOption = False,
):
    """Score one image pair and print the result."""
    with reporting_errors():
        spec = MetricSpec.parse(metric)
        scorer = build_scorer(spec, crop=crop)
        if isinstance(scorer, TrainableScorer):
            raise ParameterError(f"metric {spec.label!r} has to be trained; use `train` first")

        ref_img, deg_img = stretch_pair(load_image(ref), load_image(deg), stretch.mode)
        pair = ImagePair(ref=ref_img, deg=deg_img, dmos=0.0, reference=str(ref))
        typer.echo(fmt(scorer.score(pair)))
