"""
Terminal rendering for the CAF desk application.
Status lines, metric tables and the crossing-experiment summary, all drawn
with rich on stderr so stdout stays free for piping.
"""

from typing import Iterable, Optional

import pandas as pd
from rich.table import Table

from src.Utilities.utils import console

_STYLES = {
    "success": "bold green",
    "error": "bold red",
    "warning": "yellow",
    "info": "cyan",
}


def display_status_message(message_type: str, message: str, **kwargs) -> None:
    """
    Display a status message to the user.

    Args:
        message_type: Type of message ('success', 'error', 'warning', 'info')
        message: The message, or a STATUS_MESSAGES template
        **kwargs: Values for the template placeholders
    """
    formatted_message = message.format(**kwargs) if kwargs else message
    console.print(formatted_message, style=_STYLES.get(message_type, _STYLES["info"]), markup=False, highlight=False)


def render_ledger(ledger: pd.DataFrame, title: Optional[str] = None) -> Table:
    """Print a metrics ledger as a table and return it."""
    table = Table(title=title)
    for column in ledger.columns:
        table.add_column(column, justify="right" if column in ("value", "ci_halfwidth", "n_samples") else "left")
    for row in ledger.itertuples(index=False):
        cells = [str(c) for c in row]
        if "config_hash" in ledger.columns:
            idx = list(ledger.columns).index("config_hash")
            cells[idx] = cells[idx][:12]
        table.add_row(*cells)
    console.print(table)
    return table


def render_crossing_results(results: pd.DataFrame) -> Table:
    table = Table(title="Flow-crossing fixture")
    table.add_column("model")
    table.add_column("N", justify="right")
    table.add_column("mean endpoint error", justify="right")
    table.add_column("error at crossing", justify="right")
    for row in results.itertuples(index=False):
        table.add_row(row.model, str(row.n_steps), f"{row.mean_error:.4f}", f"{row.crossing_error:.4f}")
    console.print(table)
    return table


def render_ablation_summary(cells: Iterable[dict]) -> Table:
    table = Table(title="Ablation grid")
    table.add_column("cell")
    table.add_column("status")
    table.add_column("config hash")
    for cell in cells:
        status = "[green]ok[/green]" if cell["status"] == "ok" else f"[red]{cell['status']}[/red]"
        table.add_row(cell["label"], status, (cell.get("config_hash") or "")[:12])
    console.print(table)
    return table
