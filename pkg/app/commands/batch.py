from pathlib import Path
from typing import Annotated, NamedTuple, Optional

import typer

from app.commands.common import (
    CropOption,
    ManifestOption,
    Stretch,
    StretchOption,
    fail,
    reporting_errors,
)
from app.internal.corpus import RatedPair, ScoreRow, load_manifest, load_pair, write_scores
from app.internal.metrics import MetricSpec, build_scorer
from app.internal.scoring import Scorer, TrainableScorer
from app.util.errors import ExitCode, ParameterError, StrainIQAError
from app.util.log import logger
from app.util.parallel import ordered_map


class _RowResult(NamedTuple):
    score: Optional[float]
    error: Optional[str]


def _score_row(scorer: Scorer, rated: RatedPair, stretch: Stretch) -> _RowResult:
    try:
        return _RowResult(scorer.score(load_pair(rated, stretch.mode)), None)
    except StrainIQAError as e:
        return _RowResult(None, e.message)


def batch(
    manifest: ManifestOption,
    metric: Annotated[str, typer.Option("--metric", help="Metric descriptor.")],
    out: Annotated[Path, typer.Option("--out", help="Output CSV: ref_path,deg_path,score.")],
    stretch: StretchOption = Stretch.per_image,
    crop: CropOption = False,
):
    """Score every manifest row. Output rows follow manifest order."""
    with reporting_errors():
        spec = MetricSpec.parse(metric)
        scorer = build_scorer(spec, crop=crop)
        if isinstance(scorer, TrainableScorer):
            raise ParameterError(f"metric {spec.label!r} has to be trained; use `train` first")
        loaded = load_manifest(manifest)

        results = ordered_map(lambda rated: _score_row(scorer, rated, stretch), loaded.pairs)
        rows = [
            ScoreRow(str(rated.ref_path), str(rated.deg_path), result.score)
            for rated, result in zip(loaded.pairs, results)
        ]
        write_scores(rows, out)

        failures = [
            (number, result.error)
            for number, result in enumerate(results, start=1)
            if result.error is not None
        ]
        logger.info("Batch scored", rows=len(rows), failed=len(failures), out=str(out))
        for number, error in failures:
            typer.echo(f"pair {number}: {error}", err=True)
        if failures:
            fail(f"{len(failures)} of {len(rows)} pairs failed", ExitCode.partial)
