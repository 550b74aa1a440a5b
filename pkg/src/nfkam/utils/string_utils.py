import math
from os import PathLike
from pathlib import Path

type AnyPathLike = Path | PathLike[bytes] | PathLike[str]


def pathlike_or_path_to_path(path: AnyPathLike) -> Path:
    if isinstance(path, Path):
        return path
    return Path(str(path))


def format_number(value: float | None, digits: int = 6) -> str:
    """Scientific notation for tables; missing or non-finite values become '-'."""
    if value is None or not math.isfinite(value):
        return "-"
    return f"{value:.{digits}e}"


def format_exact(value: float | None) -> str:
    """Shortest round-tripping decimal, as used in CSV and plot data."""
    if value is None:
        return "nan"
    return repr(float(value))


def format_vector(values: list[float] | list[float | None], digits: int = 6) -> str:
    return "(" + ", ".join(format_number(v, digits) for v in values) + ")"
