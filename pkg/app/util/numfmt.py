def fmt(value: float) -> str:
    """17 significant digits, enough to round-trip any double."""
    return format(value, ".17g")
