"""Deterministic number formatting and CSV writing shared by the reports."""

from __future__ import annotations

import csv
import io
from pathlib import Path


def fmt(x) -> str:
    """17 significant digits for floats; integers and strings unchanged."""
    if isinstance(x, bool):
        return str(int(x))
    if isinstance(x, (int,)) and not isinstance(x, float):
        return str(x)
    try:
        f = float(x)
    except (TypeError, ValueError):
        return str(x)
    if isinstance(x, complex):
        return f"{x.real:.17g}{x.imag:+.17g}j"
    return f"{f:.17g}"


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(v) for v in row])
    return buf.getvalue()


def write_csv(path: Path, header, rows) -> None:
    Path(path).write_text(csv_text(header, rows))
