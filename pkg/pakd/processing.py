import asyncio
import csv
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence

import matplotlib
from matplotlib.figure import Figure

from .models import OutputFormat
from .utils.file import write_atomic

log = logging.getLogger(__name__)

SVG_HASHSALT = "pakd"


@dataclass(frozen=True)
class ChartSpec:
    """How a table is drawn: ``bar`` or ``line`` of ``series`` columns against ``x``."""

    kind: str
    x: str
    series: tuple[str, ...]
    title: str = ""
    ylabel: str = ""


@dataclass
class Table:
    """
    A named result table.

    Attributes:
        name: File stem of the table's outputs
        columns: Column order for CSV output
        rows: One mapping per row
        chart: Optional chart drawn for SVG output
        meta: Scalar results stored next to the rows in JSON output
        in_report: Whether the command report embeds the rows; large tables
            are only written to their own files
    """

    name: str
    columns: tuple[str, ...]
    rows: list[dict[str, Any]] = field(default_factory=list)
    chart: Optional[ChartSpec] = None
    meta: dict[str, Any] = field(default_factory=dict)
    in_report: bool = True

    def to_dict(self) -> dict[str, Any]:
        return {"name": self.name, "columns": list(self.columns), "rows": self.rows, **self.meta}


@dataclass
class ExperimentReport:
    """
    Everything one command produced.

    Report bodies hold no timestamps, so identical configs give identical
    bytes.
    """

    command: str
    config_hash: str
    config: dict[str, Any]
    summary: dict[str, Any] = field(default_factory=dict)
    tables: list[Table] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {
            "command": self.command,
            "config_hash": self.config_hash,
            "config": self.config,
            "summary": self.summary,
            "tables": [table.to_dict() for table in self.tables if table.in_report],
        }


def to_json(document: Any) -> str:
    return json.dumps(document, sort_keys=True, indent=2, allow_nan=True) + "\n"


def _cell(value: Any) -> Any:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return value


def table_to_csv(table: Table, config_hash: str) -> str:
    buffer = io.StringIO()
    buffer.write(f"# config_hash={config_hash}\n")
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(table.columns)
    for row in table.rows:
        writer.writerow([_cell(row.get(column)) for column in table.columns])
    return buffer.getvalue()


def table_to_svg(table: Table, config_hash: str) -> Optional[str]:
    """
    Draw a table's chart as SVG, or ``None`` if it has no chart.

    The figure carries the config hash as a footnote; the SVG hash salt is
    fixed and the date metadata dropped so reruns produce the same bytes.
    """
    spec = table.chart
    if spec is None or not table.rows:
        return None
    figure = Figure(figsize=(6.4, 4.0))
    axes = figure.subplots()
    xs = [row[spec.x] for row in table.rows]
    if spec.kind == "bar":
        width = 0.8 / max(1, len(spec.series))
        for i, name in enumerate(spec.series):
            positions = [j + i * width for j in range(len(xs))]
            heights = [row.get(name) or 0.0 for row in table.rows]
            axes.bar(positions, heights, width=width, label=name)
        axes.set_xticks([j + 0.4 - width / 2 for j in range(len(xs))])
        axes.set_xticklabels([str(x) for x in xs])
    else:
        for name in spec.series:
            points = [(x, row.get(name)) for x, row in zip(xs, table.rows) if row.get(name) is not None]
            axes.plot([p[0] for p in points], [p[1] for p in points], marker="o", label=name)
    axes.set_xlabel(spec.x)
    axes.set_ylabel(spec.ylabel)
    axes.set_title(spec.title or table.name)
    axes.legend()
    figure.text(0.99, 0.01, f"config {config_hash}", ha="right", fontsize=6)

    buffer = io.StringIO()
    with matplotlib.rc_context({"svg.hashsalt": SVG_HASHSALT}):
        figure.savefig(buffer, format="svg", metadata={"Date": None})
    return buffer.getvalue()


class ReportWriter:
    """
    Writes reports and tables under an output directory.

    Every file is written atomically and embeds the config hash: JSON
    documents carry a ``config_hash`` field, CSV files a leading comment line
    and SVG charts a footnote.
    """

    def __init__(
        self,
        output_directory: Path,
        config_hash: str,
        formats: Sequence[OutputFormat] = (OutputFormat.csv, OutputFormat.json),
    ):
        self.output_directory = Path(output_directory)
        self.config_hash = config_hash
        self.formats = tuple(formats)

    def path_for(self, name: str, suffix: str) -> Path:
        return self.output_directory / f"{name}.{suffix}"

    async def write_text(self, name: str, suffix: str, content: str) -> Path:
        path = await write_atomic(self.path_for(name, suffix), content)
        log.info("Wrote %s", path)
        return path

    async def write_json(self, name: str, document: dict[str, Any]) -> Path:
        document = {**document, "config_hash": self.config_hash}
        return await self.write_text(name, "json", to_json(document))

    async def write_table(self, table: Table) -> list[Path]:
        """Write one table in each configured format."""
        paths = []
        if OutputFormat.csv in self.formats:
            paths.append(
                await self.write_text(table.name, "csv", table_to_csv(table, self.config_hash))
            )
        if OutputFormat.json in self.formats:
            paths.append(await self.write_json(table.name, table.to_dict()))
        if OutputFormat.svg in self.formats:
            svg = await asyncio.to_thread(table_to_svg, table, self.config_hash)
            if svg is not None:
                paths.append(await self.write_text(table.name, "svg", svg))
            else:
                log.debug("Table %s has no chart", table.name)
        return paths

    async def write_report(self, report: ExperimentReport) -> list[Path]:
        """
        Write ``<command>_report.json`` and every table.

        Returns:
            Paths of all files written
        """
        paths = [await self.write_json(f"{report.command}_report", report.to_dict())]
        for table in report.tables:
            paths.extend(await self.write_table(table))
        return paths
