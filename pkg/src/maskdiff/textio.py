"""Canonical text output: CSV with a header row, fixed column order,
'.' decimals via shortest round-trip float repr, and '\\n' line ends.
Byte-stable across runs so outputs can be diffed in regression tests."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence, Union


def format_cell(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(float(value))
    if isinstance(value, (int,)):
        return str(value)
    return str(value)


def csv_text(columns: Sequence[str], rows: Sequence[Sequence]) -> str:
    lines = [",".join(columns)]
    for row in rows:
        if len(row) != len(columns):
            raise ValueError(
                f"row has {len(row)} cells, header has {len(columns)}"
            )
        lines.append(",".join(format_cell(v) for v in row))
    return "\n".join(lines) + "\n"


def write_csv(path: Union[str, Path], columns: Sequence[str],
              rows: Sequence[Sequence]) -> None:
    Path(path).write_text(csv_text(columns, rows), newline="")


def write_lines(path: Union[str, Path], lines: Sequence[str]) -> None:
    Path(path).write_text("\n".join(lines) + "\n", newline="")
