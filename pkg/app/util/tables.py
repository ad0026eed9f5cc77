from typing import Optional, Sequence

from terminaltables import AsciiTable  # pyright: ignore[reportMissingTypeStubs]


def render_table(
    rows: Sequence[Sequence[str]], title: Optional[str] = None, numeric_from: int = 1
) -> str:
    """ASCII table with the first row as header; columns from `numeric_from` on are right-aligned."""
    table = AsciiTable([list(r) for r in rows], title=title)
    width = max((len(r) for r in rows), default=0)
    for col in range(numeric_from, width):
        table.justify_columns[col] = "right"  # pyright: ignore[reportUnknownMemberType]
    return table.table  # pyright: ignore[reportUnknownMemberType, reportUnknownVariableType]
