import csv
import io
from enum import Enum
from pathlib import Path
from typing import Annotated, Optional

import typer

from app.commands.common import (
    ManifestOption,
    SeedOption,
    Statistic,
    Stretch,
    StretchOption,
    load_corpus,
    parse_grid,
    reporting_errors,
)
from app.internal.connectivity import (
    SweepResult,
    reduce_over_alpha,
    sweep_dog,
    sweep_gaussian,
    write_sweep_table,
)
from app.util.errors import ParameterError
from app.util.numfmt import fmt


class SweepKind(str, Enum):
    gauss = "gauss"
    dog = "dog"


_GRID_HELP = "start:stop:step (inclusive) or a comma-separated list."


def _print_result(result: SweepResult):
    names = ",".join(result.parameter_names)
    for fold, (best, held_out) in enumerate(zip(result.best, result.held_out_error)):
        curve = result.errors[fold]
        typer.echo(
            f"fold {fold} best {names}={','.join(fmt(v) for v in best)} "
            f"train_error {fmt(min(curve))} held_out_error {fmt(held_out)}"
        )


def _write_reduced(result: SweepResult, path: Path):
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["sigma_center", "sigma_surround", "error"])
    for (center, surround), error in reduce_over_alpha(result).items():
        writer.writerow([fmt(center), fmt(surround), fmt(error)])
    path.write_text(buffer.getvalue(), encoding="utf-8")


def sweep(
    manifest: ManifestOption,
    seed: SeedOption,
    out: Annotated[Path, typer.Option("--out", help="Sweep table, one row per fold and grid point.")],
    metric: Annotated[SweepKind, typer.Option("--metric", help="Profile family.")] = SweepKind.gauss,
    grid: Annotated[str, typer.Option("--grid", help=_GRID_HELP)] = "0.4:3.0:0.1",
    center_grid: Annotated[str, typer.Option("--center-grid", help=_GRID_HELP)] = "0.6:5.0:0.2",
    surround_grid: Annotated[str, typer.Option("--surround-grid", help=_GRID_HELP)] = "0.6:5.6:0.2",
    alpha_grid: Annotated[str, typer.Option("--alpha-grid", help=_GRID_HELP)] = "0.5:1.5:0.1",
    folds: Annotated[int, typer.Option("--folds", help="Cross-validation folds.")] = 5,
    statistic: Annotated[
        Statistic, typer.Option("--statistic", help="Correlation minimized as 1 - r.")
    ] = Statistic.pearson,
    reduced_out: Annotated[
        Optional[Path],
        typer.Option("--reduced-out", help="DOG only: error surface with alpha eliminated."),
    ] = None,
    stretch: StretchOption = Stretch.per_image,
):
    """Cross-validated sweep of Gaussian or DOG kernel parameters."""
    with reporting_errors():
        _, pairs = load_corpus(manifest, stretch)
        if metric == SweepKind.gauss:
            if reduced_out is not None:
                raise ParameterError("--reduced-out needs --metric dog")
            result = sweep_gaussian(
                pairs, parse_grid(grid), folds, seed, statistic=statistic.kind
            )
        else:
            result = sweep_dog(
                pairs,
                parse_grid(center_grid),
                parse_grid(surround_grid),
                parse_grid(alpha_grid),
                folds,
                seed,
                statistic=statistic.kind,
            )
        write_sweep_table(result, out)
        if reduced_out is not None:
            _write_reduced(result, reduced_out)
        _print_result(result)
