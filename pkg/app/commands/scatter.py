from pathlib import Path
from typing import Annotated

import typer

from app.commands.common import ManifestOption, reporting_errors
from app.internal.corpus import load_manifest, load_scores
from app.internal.stats import ScoreSeries, export_scatter
from app.util.errors import ParseError, ShapeError
from app.util.numfmt import fmt


def scatter(
    manifest: ManifestOption,
    scores: Annotated[
        list[Path], typer.Option("--scores", help="Batch score file; repeat for each model.")
    ],
    out: Annotated[Path, typer.Option("--out", help="Plot-ready CSV.")],
    zscore: Annotated[bool, typer.Option("--zscore", help="Z-score each model's axis.")] = False,
    log: Annotated[bool, typer.Option("--log", help="Log10 axes.")] = False,
):
    """Export per-pair scores against DMOS with linear fits."""
    with reporting_errors():
        loaded = load_manifest(manifest)
        expected = [(str(p.ref_path), str(p.deg_path)) for p in loaded.pairs]
        series: list[ScoreSeries] = []
        for path in scores:
            rows = load_scores(path)
            if len(rows) != len(expected):
                raise ShapeError(f"{path}: {len(rows)} rows for {len(expected)} manifest pairs")
            values: list[float] = []
            for number, (row, (ref, deg)) in enumerate(zip(rows, expected), start=1):
                if Path(row.ref_path).resolve() != Path(ref) or Path(row.deg_path).resolve() != Path(deg):
                    raise ShapeError(f"{path}: row {number} does not match the manifest")
                if row.score is None:
                    raise ParseError(f"{path}: row {number} has no score")
                values.append(row.score)
            series.append(ScoreSeries(label=path.stem, scores=values))
        if len({s.label for s in series}) != len(series):
            raise ParseError("score files need distinct names")

        export = export_scatter(
            series, [p.dmos for p in loaded.pairs], out, zscore_scores=zscore, log_axes=log
        )
        for fit in export.fits:
            typer.echo(
                f"{fit.label} slope {fmt(fit.slope)} intercept {fmt(fit.intercept)} r {fmt(fit.r)} n {fit.n}"
            )
        if export.adjusted_r2 is not None:
            typer.echo(f"adjusted_r2 {fmt(export.adjusted_r2)}")
        typer.echo(f"excluded {export.excluded}")
