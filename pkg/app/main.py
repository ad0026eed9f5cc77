import typer

from app.commands import batch, compare, scatter, score, sweep, train

cli = typer.Typer(
    name="strainiqa",
    help="Strain-tensor image quality metrics: scoring, training, sweeps and evaluation.",
    no_args_is_help=True,
    add_completion=False,
    pretty_exceptions_enable=False,
)

cli.command("score")(score.score)
cli.command("batch")(batch.batch)
cli.command("train")(train.train)
cli.command("sweep")(sweep.sweep)
cli.command("compare")(compare.compare)
cli.command("scatter")(scatter.scatter)


if __name__ == "__main__":
    cli()
