"""Side-by-side tables of experiment summaries."""

from __future__ import annotations

import csv
import io
import json
import os
import warnings

COLUMNS = ["run", "mode", "seed", "final_accuracy", "rounds_to_target", "seconds_to_target",
           "mflops_pre", "mflops_post", "dataset_digest"]


class DigestMismatch(UserWarning):
    pass


def _cell(value) -> str:
    if value is None:
        return "-"
    return repr(value) if isinstance(value, float) else str(value)


def load_summary(path) -> dict:
    with open(path) as fh:
        doc = json.load(fh)
    doc.setdefault("run", os.path.basename(os.path.dirname(os.path.abspath(path))) or path)
    return doc


def compare_report(paths):
    """Return ``(text_table, csv_text)`` for two or more summary.json files.

    Values are copied from the summaries unchanged; runs built from different
    datasets still get a row but raise a :class:`DigestMismatch` warning.
    """
    if len(paths) < 2:
        raise ValueError("compare needs at least two summaries")
    summaries = [load_summary(p) for p in paths]
    digests = {s.get("dataset_digest") for s in summaries}
    if len(digests) > 1:
        warnings.warn(f"summaries come from different datasets: {sorted(map(str, digests))}", DigestMismatch,
                      stacklevel=2)
    rows = [[_cell(s.get(c)) for c in COLUMNS] for s in summaries]

    widths = [max(len(c), *(len(r[i]) for r in rows)) for i, c in enumerate(COLUMNS)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(COLUMNS, widths)),
             "  ".join("-" * w for w in widths)]
    lines += ["  ".join(v.ljust(w) for v, w in zip(r, widths)) for r in rows]

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(COLUMNS)
    writer.writerows(rows)
    return "\n".join(lines) + "\n", buf.getvalue()
