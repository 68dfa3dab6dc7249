from __future__ import annotations

from typing import Dict, List, Sequence

from rich.console import Console
from rich.table import Table

from ..metrics import EpsilonReport, minimum_report


def _sci(value: float) -> str:
    return f"{value:.2e}"


def summary_table(reports: Sequence[EpsilonReport], title: str) -> Table:
    """One row per (method, M): the ROI size with the lowest ε."""
    groups: Dict[tuple, List[EpsilonReport]] = {}
    for rep in reports:
        groups.setdefault((rep.method, rep.n_exposures), []).append(rep)

    table = Table(title=title, title_justify="left")
    for col in ("method", "M", "N*", "epsilon", "sigma", "eps_B", "eps_D", "trials", "retained"):
        table.add_column(col, justify="right" if col != "method" else "left")
    for (method, m), group in groups.items():
        best = minimum_report(group)
        retained = best.retained_fraction
        table.add_row(
            method,
            "" if m is None else str(m),
            str(best.roi_size),
            _sci(best.epsilon),
            _sci(best.sigma),
            _sci(best.epsilon_b),
            _sci(best.epsilon_d),
            str(best.n_trials),
            "" if retained is None else f"{retained:.4f}",
        )
    return table


def print_summary(reports: Sequence[EpsilonReport], title: str, console: Console | None = None) -> None:
    if not reports:
        return
    (console or Console()).print(summary_table(reports, title))
