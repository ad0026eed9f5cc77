from pathlib import Path
from typing import Annotated, Optional

import typer

from app.commands.common import (
    CropOption,
    Stretch,
    StretchOption,
    ManifestOption,
    load_corpus,
    reporting_errors,
)
from app.internal.corpus import stratified_folds
from app.internal.metrics import build_scorer, parse_metrics
from app.internal.stats import evaluate_models, render_report, write_report_csv
from app.util.errors import ParameterError, ParseError


def _parse_pair(text: str) -> tuple[str, str]:
    first, sep, second = text.partition("=")
    if not sep or not first.strip() or not second.strip():
        raise ParseError(f"comparison {text!r} must look like <metric>=<metric>")
    return first.strip(), second.strip()


def compare(
    manifest: ManifestOption,
    metric: Annotated[
        list[str], typer.Option("--metric", help="Metric descriptor; repeat for each model.")
    ],
    folds: Annotated[Optional[int], typer.Option("--folds", help="Cross-validation folds.")] = None,
    seed: Annotated[
        Optional[int], typer.Option("--seed", help="Fold and permutation seed.")
    ] = None,
    pair: Annotated[
        Optional[list[str]],
        typer.Option("--pair", help="Fisher test between two metrics, e.g. gauss:2.0=euclid."),
    ] = None,
    bonferroni: Annotated[
        int, typer.Option("--bonferroni", help="Number of comparisons for the correction.")
    ] = 1,
    permutations: Annotated[
        int, typer.Option("--permutations", help="Permutation-test shuffles (0 = off).")
    ] = 0,
    alpha: Annotated[float, typer.Option("--alpha", help="Significance level.")] = 0.001,
    step: Annotated[float, typer.Option("--step", help="Cell step size of train metrics.")] = 0.1,
    csv_out: Annotated[
        Optional[Path], typer.Option("--csv", help="Also write the correlations as CSV.")
    ] = None,
    stretch: StretchOption = Stretch.per_image,
    crop: CropOption = False,
):
    """Correlate metrics with DMOS and compare them."""
    with reporting_errors():
        specs = parse_metrics(metric)
        comparisons = [_parse_pair(p) for p in pair] if pair else None
        if (folds is not None or permutations > 0) and seed is None:
            raise ParameterError("--folds and --permutations need --seed")
        if seed is not None and seed < 0:
            raise ParameterError(f"seed must be >= 0, got {seed}")
        loaded, pairs = load_corpus(manifest, stretch)
        models = [
            build_scorer(s, seed=seed, step=step, crop=crop, dataset_id=loaded.dataset_id)
            for s in specs
        ]
        assignment = (
            stratified_folds(loaded, folds, seed) if folds is not None and seed is not None else None
        )
        report = evaluate_models(
            pairs,
            models,
            assignment,
            comparisons=comparisons,
            bonferroni_comparisons=bonferroni,
            permutations=permutations,
            seed=seed or 0,
            alpha=alpha,
            dataset_id=loaded.dataset_id,
            dmos_convention=loaded.dmos_convention,
        )
        typer.echo(render_report(report))
        if csv_out is not None:
            write_report_csv(report, csv_out)
