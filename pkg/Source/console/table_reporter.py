"""
Table reporter for CLI output.

Renders metric reports, grid-search rows and preset comparisons as bordered
rich tables.
"""

import math
from typing import Any, Dict, List, Optional, Union

from rich.console import Console
from rich.table import Table


class TableReporter:
    """Generates clean, bordered tables for console output."""

    def __init__(self, console: Console, precision: int = 4):
        self.console = console
        self.precision = precision

    def format_value(self, value: Any) -> str:
        if value is None:
            return ""
        if isinstance(value, float):
            if math.isinf(value):
                return "inf" if value > 0 else "-inf"
            return f"{value:.{self.precision}f}"
        return str(value)

    def create_table(
        self,
        data: List[Dict[str, Any]],
        title: Optional[str] = None,
        max_column_width: int = 40,
    ) -> Table:
        """
        Create a table from a list of dictionaries.

        Args:
            data: Rows keyed by column name; columns follow the first row
            title: Optional table title
            max_column_width: Maximum width for any column

        Returns:
            Rich Table object ready for display
        """
        if not data:
            table = Table(title=title or "No Data")
            table.add_column("No data available", style="dim")
            return table

        columns = list(data[0].keys())
        table = Table(title=title, show_header=True, header_style="bold cyan")
        for column in columns:
            table.add_column(
                column,
                style=self._get_column_style(column),
                justify="left" if self._is_label(column) else "right",
                max_width=max_column_width,
                overflow="fold",
            )
        for row in data:
            table.add_row(*(self.format_value(row.get(column)) for column in columns))
        return table

    def display_table(
        self,
        data: Union[List[Dict[str, Any]], Table],
        title: Optional[str] = None,
    ) -> None:
        table = data if isinstance(data, Table) else self.create_table(data, title)
        self.console.print(table)

    def create_summary_table(self, summary_data: Dict[str, Any], title: str = "Summary") -> Table:
        """Two-column key/value table without borders."""
        table = Table(title=title, show_header=False, box=None)
        for key, value in summary_data.items():
            table.add_row(f"[bold cyan]{key.replace('_', ' ').title()}:[/bold cyan]", self.format_value(value))
        return table

    @staticmethod
    def _is_label(column_name: str) -> bool:
        return column_name.lower() in {"record_id", "preset", "kernel", "target", "method", "split"}

    def _get_column_style(self, column_name: str) -> str:
        """Get appropriate styling for a column based on its name."""
        column_lower = column_name.lower()
        if column_lower in {"ssim", "psnr", "r2"}:
            return "green"
        if column_lower in {"mae", "rmse", "mean_mae", "total"} or column_lower.startswith("fold"):
            return "yellow"
        if any(key in column_lower for key in ("id", "preset", "kernel")):
            return "cyan"
        if column_lower in {"alpha", "beta", "c"}:
            return "magenta"
        return "white"
