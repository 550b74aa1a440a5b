import logging
from collections.abc import Callable
from enum import StrEnum
from pathlib import Path

from nfkam.data import RunArtifact

from .csv_files import MEASURE_COLUMNS as MEASURE_COLUMNS
from .csv_files import render_csv as render_csv
from .csv_files import render_trajectory_csv as render_trajectory_csv
from .plot_data import render_plot_data as render_plot_data
from .tables import render_tables as render_tables

logger = logging.getLogger(__name__)


class ReportFormat(StrEnum):
    TABLE = "table"
    CSV = "csv"
    PLOTDATA = "plotdata"


RENDERERS: dict[ReportFormat, Callable[[RunArtifact], dict[str, str]]] = {
    ReportFormat.TABLE: render_tables,
    ReportFormat.CSV: render_csv,
    ReportFormat.PLOTDATA: render_plot_data,
}


def generate_reports(artifact: RunArtifact, output_dir: Path, fmt: ReportFormat | str) -> list[Path]:
    """
    Render every report of one format into `output_dir`.

    Raises:
        ValueError: unknown format
    """
    renderer = RENDERERS[ReportFormat(fmt)]
    output_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    for name, text in renderer(artifact).items():
        path = output_dir / name
        _ = path.write_text(text, encoding="utf-8")
        written.append(path)
    logger.info("wrote %d %s reports to %s", len(written), fmt, output_dir)
    return written
