"""JSON + CSV report emission.

Every report is a pair ``<base>.json`` / ``<base>.csv``.  The JSON holds a
``metadata`` block (the only place a timestamp appears) and the results;
the CSV holds the main table with the unit of every column in its header.
"""

from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from datetime import datetime, timezone
from pathlib import Path

from . import __version__


def report_paths(base) -> tuple[Path, Path]:
    base = Path(base)
    if base.suffix in (".json", ".csv"):
        base = base.with_suffix("")
    return base.with_name(base.name + ".json"), base.with_name(base.name + ".csv")


def _csv_text(rows: list[dict], units: dict) -> str:
    buf = io.StringIO()
    if rows:
        cols = list(rows[0])
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([f"{c}[{units.get(c, '1')}]" for c in cols])
        for r in rows:
            w.writerow([_fmt(r[c]) for c in cols])
    return buf.getvalue()


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def render(command: str, results: dict, rows: list[dict], units: dict, timestamp: str | None = None):
    meta = {
        "command": command,
        "tool_version": __version__,
        "timestamp": timestamp or datetime.now(timezone.utc).isoformat(timespec="seconds"),
    }
    doc = {"metadata": meta, "results": results, "units": units}
    return json.dumps(doc, indent=2, sort_keys=True) + "\n", _csv_text(rows, units)


def write_report(base, command: str, results: dict, rows: list[dict], units: dict) -> tuple[Path, Path]:
    """Write both files; neither appears unless both were written."""
    jpath, cpath = report_paths(base)
    jtext, ctext = render(command, results, rows, units)
    staged = []
    try:
        for path, text in ((jpath, jtext), (cpath, ctext)):
            fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
            with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
            staged.append((tmp, path))
        for tmp, path in staged:
            os.replace(tmp, path)
    finally:
        for tmp, _ in staged:
            if os.path.exists(tmp):
                os.unlink(tmp)
    return jpath, cpath
