"""File formats: versioned CSV tables and flat key-value text files.

Every CSV written here starts with one ``# stochimg <kind> v1`` comment line,
then a header row. Readers skip ``#`` lines. Per-block tables are keyed by a
dense, 0-based ``index`` (row-major block id) and may list rows in any order.

Key-value files (plan files, config files) hold one ``key = value`` pair per
line; blank lines and ``#`` comments are ignored.
"""

from __future__ import annotations

import csv
import io
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

SCHEMA_VERSION = 1


class FormatError(ValueError):
    pass


def _comment_free(lines: Iterable[str]):
    for line in lines:
        if line.strip() and not line.lstrip().startswith("#"):
            yield line


def write_table(path, kind: str, header: Sequence[str], rows: Iterable[Sequence],
                comments: Mapping[str, object] | None = None) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# stochimg {kind} v{SCHEMA_VERSION}\n")
        for key, value in (comments or {}).items():
            fh.write(f"# {key} = {value}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def read_table(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as fh:
        reader = csv.reader(_comment_free(fh))
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise FormatError(f"{path}: no header row") from None
        rows = [[c.strip() for c in row] for row in reader if row]
    return header, rows


def read_table_comments(path) -> dict[str, str]:
    out = {}
    with open(path) as fh:
        for line in fh:
            s = line.strip()
            if not s.startswith("#"):
                break
            body = s[1:].strip()
            if "=" in body:
                k, v = body.split("=", 1)
                out[k.strip()] = v.strip()
    return out


def read_block_column(path, columns: Sequence[str]) -> np.ndarray:
    """Read one per-block column into a dense array ordered by index.

    ``columns`` lists accepted names for the value column; a headerless
    two-column file (index, value) is accepted as well.
    """
    header, rows = read_table(path)
    lower = [h.lower() for h in header]
    if "index" in lower or "block_id" in lower:
        idx_col = lower.index("index") if "index" in lower else lower.index("block_id")
        val_col = next((lower.index(c) for c in columns if c in lower), None)
        if val_col is None:
            raise FormatError(f"{path}: none of the columns {list(columns)} present")
    else:
        rows = [header] + rows
        idx_col, val_col = 0, 1
    entries = {}
    for n, row in enumerate(rows, 1):
        try:
            i = int(row[idx_col])
            v = float(row[val_col])
        except (ValueError, IndexError):
            raise FormatError(f"{path}: bad row {n}: {row}") from None
        if i in entries:
            raise FormatError(f"{path}: duplicate index {i}")
        entries[i] = v
    if sorted(entries) != list(range(len(entries))):
        raise FormatError(f"{path}: indices must be dense 0..{len(entries) - 1}")
    return np.array([entries[i] for i in range(len(entries))])


def write_block_column(path, kind: str, column: str, values) -> None:
    write_table(path, kind, ["index", column], enumerate(np.asarray(values).tolist()))


def read_values(path) -> np.ndarray:
    return read_block_column(path, ["value", "values", "v"])


def read_heatmap(path) -> np.ndarray:
    freq = read_block_column(path, ["frequency", "count", "freq"])
    if np.any(freq != np.round(freq)) or np.any(freq < 0):
        raise FormatError(f"{path}: frequencies must be non-negative integers")
    return freq.astype(np.int64)


def read_requirements(path) -> np.ndarray:
    return read_block_column(path, ["required", "requirement", "r"])


def read_region(path) -> list[int]:
    header, rows = read_table(path)
    lower = [h.lower() for h in header]
    if lower and lower[0] in ("block_id", "index", "id"):
        cells = [r[0] for r in rows]
    else:
        cells = [header[0]] + [r[0] for r in rows]
    try:
        ids = sorted({int(c) for c in cells})
    except ValueError:
        raise FormatError(f"{path}: region ids must be integers") from None
    if not ids:
        raise FormatError(f"{path}: empty region")
    return ids


def write_region(path, block_ids: Iterable[int]) -> None:
    write_table(path, "region", ["block_id"], ([b] for b in sorted(block_ids)))


# ---------------------------------------------------------------------------
# key-value files


def dump_kv(pairs: Mapping[str, object], kind: str = "plan") -> str:
    buf = io.StringIO()
    buf.write(f"# stochimg {kind} v{SCHEMA_VERSION}\n")
    for key, value in pairs.items():
        if isinstance(value, (list, tuple)):
            value = ",".join(_fmt(v) for v in value)
        else:
            value = _fmt(value)
        buf.write(f"{key} = {value}\n")
    return buf.getvalue()


def parse_kv(text: str, source: str = "<text>") -> dict[str, str]:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        if "=" not in s:
            raise FormatError(f"{source}:{n}: expected 'key = value'")
        key, value = s.split("=", 1)
        key = key.strip().replace("-", "_")
        if not key:
            raise FormatError(f"{source}:{n}: empty key")
        out[key] = value.strip()
    return out


def read_kv(path) -> dict[str, str]:
    return parse_kv(Path(path).read_text(), str(path))


def write_kv(path, pairs: Mapping[str, object], kind: str = "plan") -> None:
    Path(path).write_text(dump_kv(pairs, kind))
