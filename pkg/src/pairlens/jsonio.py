"""JSON/JSONL helpers with full-precision float encoding and atomic writes.

Floats are written with 17 significant digits, which round-trips IEEE
doubles exactly; re-serializing a loaded artifact therefore reproduces it
byte for byte.
"""

from __future__ import annotations

import json
import math
import os
import tempfile
from typing import Any

import numpy as np


def fmt_float(x: float) -> str:
    """Render a finite float with 17 significant digits."""
    x = float(x)
    if not math.isfinite(x):
        raise ValueError(f"non-finite float not serializable: {x!r}")
    return format(x, ".17g")


def dumps(obj: Any, indent: int = 0) -> str:
    """Serialize to JSON text with deterministic key order and 17-digit floats."""
    out: list[str] = []
    _write(obj, out, indent, 0)
    return "".join(out)


def _write(obj: Any, out: list[str], indent: int, level: int) -> None:
    pad = " " * (indent * (level + 1)) if indent else ""
    end_pad = " " * (indent * level) if indent else ""
    nl = "\n" if indent else ""
    sep = "," + nl if indent else ", "
    if obj is None or isinstance(obj, (bool, str)):
        out.append(json.dumps(obj))
    elif isinstance(obj, (int, np.integer)) and not isinstance(obj, bool):
        out.append(str(int(obj)))
    elif isinstance(obj, (float, np.floating)):
        out.append(fmt_float(obj))
    elif isinstance(obj, np.ndarray):
        _write(obj.tolist(), out, indent, level)
    elif isinstance(obj, (list, tuple)):
        if not obj:
            out.append("[]")
            return
        out.append("[" + nl)
        for i, item in enumerate(obj):
            out.append(pad)
            _write(item, out, indent, level + 1)
            if i < len(obj) - 1:
                out.append(sep)
        out.append(nl + end_pad + "]")
    elif isinstance(obj, dict):
        if not obj:
            out.append("{}")
            return
        out.append("{" + nl)
        items = list(obj.items())
        for i, (key, value) in enumerate(items):
            if not isinstance(key, str):
                raise TypeError(f"JSON object keys must be str, got {type(key)}")
            out.append(pad + json.dumps(key) + ": ")
            _write(value, out, indent, level + 1)
            if i < len(items) - 1:
                out.append(sep)
        out.append(nl + end_pad + "}")
    else:
        raise TypeError(f"not JSON-serializable: {type(obj)}")


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    """Write via a temp file + rename so readers never see partial output."""
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix="~")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as handle:
            handle.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dump_file(obj: Any, path: str | os.PathLike, indent: int = 2) -> None:
    atomic_write_text(path, dumps(obj, indent=indent) + "\n")


def load_file(path: str | os.PathLike) -> Any:
    with open(path, "r", encoding="utf-8") as handle:
        return json.load(handle)
