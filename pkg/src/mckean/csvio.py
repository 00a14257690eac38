"""CSV and JSON output with reproducible formatting.

Floats are printed with 17 significant digits so that identical runs give
byte-identical files and values round-trip exactly.
"""

import json
import numpy as np

FLOAT_FMT = "%.17g"


def format_row(values):
    return ",".join(FLOAT_FMT % v for v in values)


def write_csv(path, header, rows):
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    if rows.size and rows.shape[1] != len(header):
        raise ValueError(f"{len(header)} columns expected, rows have {rows.shape[1]}")
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(format_row(row) + "\n")


def read_csv(path):
    """Return (header list, float ndarray of shape (n_rows, n_cols))."""
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        rows = [line.strip().split(",") for line in fh if line.strip()]
    data = np.array([[float(v) for v in row] for row in rows], dtype=float)
    if data.size == 0:
        data = data.reshape(0, len(header))
    return header, data


def write_json(path, payload):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
