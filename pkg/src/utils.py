"""
Utility functions for the Generative Predictive Control lab
"""

import logging
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Union

import numpy as np
import pandas as pd
from rich.console import Console
from rich.logging import RichHandler
from rich.table import Table

import config

console = Console()


def setup_logging(level: Union[str, int] = None) -> None:
    """
    Route all package logging through a single RichHandler

    Args:
        level: Level name or number (defaults to GPC_LOG_LEVEL)
    """
    level = level or config.LOG_LEVEL
    root = logging.getLogger()
    for handler in list(root.handlers):
        if isinstance(handler, RichHandler):
            root.removeHandler(handler)
    root.addHandler(RichHandler(console=console, show_path=False, rich_tracebacks=True))
    root.setLevel(level.upper() if isinstance(level, str) else level)


def print_banner(title: str) -> None:
    console.print("=" * 60)
    console.print(f"[bold]{title}[/bold]")
    console.print("=" * 60)


def print_status(message: str, ok: bool = True) -> None:
    """One status line with a check or warning marker"""
    marker = "[green]✓[/green]" if ok else "[yellow]⚠️[/yellow]"
    console.print(f"{marker} {message}")


def write_csv(rows: Sequence[Dict[str, object]], path: Union[str, Path],
              columns: List[str] = None) -> Path:
    """
    Write rows with a header, '.' decimals and full float precision

    Args:
        rows: One dict per row
        path: Output file
        columns: Column order (defaults to the keys of the first row)

    Returns:
        Path written
    """
    path = Path(path)
    frame = pd.DataFrame(list(rows), columns=columns)
    frame.to_csv(path, index=False, lineterminator='\n')
    return path


def latency_stats(samples: Iterable[float]) -> Dict[str, float]:
    """Mean and 95th percentile (milliseconds) of per-step wall times in seconds"""
    ms = 1000.0 * np.asarray(list(samples), dtype=np.float64)
    if ms.size == 0:
        return {'mean_ms': float('nan'), 'p95_ms': float('nan'), 'steps': 0}
    return {'mean_ms': float(ms.mean()), 'p95_ms': float(np.percentile(ms, 95)),
            'steps': int(ms.size)}


def summary_table(title: str, rows: Sequence[Dict[str, object]]) -> Table:
    """Rich table with one column per key of the first row"""
    table = Table(title=title, show_header=True, header_style="bold magenta")
    if not rows:
        return table
    for key in rows[0]:
        table.add_column(str(key), justify="right")
    for row in rows:
        table.add_row(*[_cell(v) for v in row.values()])
    return table


def _cell(value) -> str:
    if isinstance(value, float):
        return f"{value:.4g}"
    return str(value)
