from pathlib import Path
from typing import Annotated, Optional

import numpy as np
import typer

from app.commands.common import (
    CropOption,
    ManifestOption,
    SeedOption,
    Stretch,
    StretchOption,
    load_corpus,
    reporting_errors,
)
from app.internal.regression import (
    DistanceTransform,
    TrainingConfig,
    save_jacobian,
    train_jacobian,
    write_trace,
)
from app.util.errors import DegenerateError
from app.util.numfmt import fmt


def train(
    manifest: ManifestOption,
    seed: SeedOption,
    out: Annotated[Path, typer.Option("--out", help="Where to write the tile Jacobian.")],
    iters: Annotated[int, typer.Option("--iters", help="Number of proposals.")] = 10_000,
    step: Annotated[float, typer.Option("--step", help="Cell step size.")] = 0.1,
    trace: Annotated[
        Optional[Path], typer.Option("--trace", help="CSV of (iteration, error) per accepted move.")
    ] = None,
    checkpoint: Annotated[
        int, typer.Option("--checkpoint", help="Proposals between full recomputes.")
    ] = 500,
    root: Annotated[
        bool, typer.Option("--root", help="Correlate DMOS with the distance instead of its square.")
    ] = False,
    stretch: StretchOption = Stretch.per_image,
    crop: CropOption = False,
):
    """Fit the 64x64 tile Jacobian to the manifest's DMOS."""
    with reporting_errors():
        transform: DistanceTransform = "root" if root else "squared"
        cfg = TrainingConfig(
            iterations=iters,
            step=step,
            seed=seed,
            checkpoint_interval=checkpoint,
            distance_transform=transform,
            crop=crop,
        )
        loaded, pairs = load_corpus(manifest, stretch)
        dmos = np.array([p.dmos for p in pairs])
        if np.ptp(dmos) == 0:
            raise DegenerateError("DMOS is constant across the manifest; nothing to fit")

        jacobian, result = train_jacobian(pairs, cfg, loaded.dataset_id)
        save_jacobian(jacobian, out)
        if trace is not None:
            write_trace(result, trace)

        typer.echo(f"initial_error {fmt(result.initial_error)}")
        typer.echo(f"final_error {fmt(result.final_error)}")
        typer.echo(f"accepted {result.accepted}")
