"""Deterministic JSON and CSV emission.

Floats are written with 17 significant digits, keys keep insertion order,
and non-finite floats become the strings ``"inf"``, ``"-inf"`` and ``"nan"``.
Identical inputs therefore give byte-identical files.
"""

from __future__ import annotations

import dataclasses
import enum
import json
import math
import os

import numpy as np

from .errors import RslError

SCHEMA = "rsl/1"


class ReportIOError(RslError):
    pass


def fmt_float(x):
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return format(x, ".17g")


def plain(obj):
    """Convert results into JSON-ready builtins; callables and private fields are dropped."""
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        out = {}
        for f in dataclasses.fields(obj):
            if f.name.startswith("_"):
                continue
            v = getattr(obj, f.name)
            if callable(v) and not isinstance(v, (np.ndarray, enum.Enum)):
                continue
            out[f.name.rstrip("_")] = plain(v)
        return out
    if isinstance(obj, enum.Enum):
        return obj.value
    if isinstance(obj, dict):
        return {str(k): plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return plain(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return float(obj)
    if obj is None or isinstance(obj, str):
        return obj
    return str(obj)


def _encode(obj, indent, level):
    pad = " " * (indent * (level + 1))
    end = " " * (indent * level)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(k)}: {_encode(v, indent, level + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, list):
        if not obj:
            return "[]"
        if all(not isinstance(v, (dict, list)) for v in obj):
            return "[" + ", ".join(_encode(v, indent, level + 1) for v in obj) + "]"
        return "[\n" + ",\n".join(pad + _encode(v, indent, level + 1) for v in obj) + "\n" + end + "]"
    if isinstance(obj, bool):
        return "true" if obj else "false"
    if obj is None:
        return "null"
    if isinstance(obj, int):
        return str(obj)
    if isinstance(obj, float):
        s = fmt_float(obj)
        return json.dumps(s) if s in ("nan", "inf", "-inf") else s
    return json.dumps(obj)


def dumps(results):
    """Serialize ``results`` with the schema tag first."""
    body = {"schema": SCHEMA}
    for k, v in plain(results or {}).items():
        if k != "schema":
            body[k] = v
    return _encode(body, 2, 0) + "\n"


def _write(path, text):
    try:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    except OSError as exc:
        raise ReportIOError(f"cannot write {path}: {exc.strerror or exc}") from exc
    return path


def emit_report(results, out_dir, name="report.json"):
    """Write ``report.json`` into ``out_dir``; returns the path."""
    return _write(os.path.join(out_dir, name), dumps(results))


def csv_text(header, rows):
    lines = [",".join(header)]
    for row in rows:
        cells = []
        for v in row:
            if v is None:
                cells.append("")
            elif isinstance(v, (float, np.floating)):
                cells.append(fmt_float(v))
            else:
                cells.append(str(v))
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def write_csv(path, header, rows):
    return _write(path, csv_text(header, rows))
