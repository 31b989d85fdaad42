"""
Status indicator for CLI commands.

Handles start/complete lines, timing and emoji indicators.
"""

import time
from typing import Optional

from rich.console import Console
from rich.status import Status


class StatusIndicator:
    """Handles status display and timing for long-running commands."""

    def __init__(self, console: Console, spinner: bool = True):
        self.console = console
        self.spinner = spinner
        self.start_time: Optional[float] = None
        self.current_status: Optional[Status] = None

        self.status_icons = {
            "processing": "⏳",
            "success": "✅",
            "error": "❌",
            "generating": "🧪",
            "training": "🧠",
            "evaluating": "📏",
            "writing": "📝",
        }

    def start_operation(self, message: str, status_type: str = "processing") -> None:
        """Start a new operation with status display."""
        icon = self.status_icons.get(status_type, "⏳")
        self.start_time = time.time()
        if self.spinner:
            self.current_status = self.console.status(f"{icon} {message}", spinner="dots")
            self.current_status.start()
        else:
            self.console.print(f"{icon} {message}")

    def complete_operation(self, message: str = "Completed", status_type: str = "success") -> float:
        """Complete the current operation and return its duration."""
        self._stop()
        duration = 0.0
        if self.start_time:
            duration = time.time() - self.start_time
            self.start_time = None

        icon = self.status_icons.get(status_type, "✅")
        text = f"[{icon}] {message}"
        if duration > 0:
            text += f" [Completed in {duration:.1f}s]"
        self.console.print(text)
        return duration

    def show_error(self, message: str) -> None:
        """One red diagnostic line."""
        self._stop()
        self.start_time = None
        self.console.print(f"[red]{self.status_icons['error']} {message}[/red]", highlight=False)

    def show_info(self, message: str, status_type: str = "processing") -> None:
        icon = self.status_icons.get(status_type, "ℹ️")
        self.console.print(f"{icon} {message}")

    def _stop(self) -> None:
        if self.current_status:
            self.current_status.stop()
            self.current_status = None
