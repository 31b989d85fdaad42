"""
Console output helpers for the command-line interface.

Provides status lines with timing and rich table reporting.
"""

from .status_indicator import StatusIndicator
from .table_reporter import TableReporter

__all__ = [
    'StatusIndicator',
    'TableReporter',
]
