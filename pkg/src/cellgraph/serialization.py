"""JSON output with 17-significant-digit floats, atomic writes, checkpoints."""
from __future__ import annotations

import json
import math
import os
import tempfile
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1


class FormatError(ValueError):
    """A persisted document is malformed or from an unsupported version."""


def _fmt_float(x: float) -> str:
    if math.isnan(x) or math.isinf(x):
        raise ValueError(f"cannot serialize non-finite float {x!r} as JSON")
    if x == int(x) and abs(x) < 1e16:
        return f"{x:.1f}"
    return format(x, ".17g")


def dumps(obj, indent: int | None = None, _level: int = 0) -> str:
    """Deterministic JSON; floats keep 17 significant digits, keys keep insertion order."""
    pad = "" if indent is None else "\n" + " " * (indent * (_level + 1))
    end = "" if indent is None else "\n" + " " * (indent * _level)
    if obj is None or isinstance(obj, (bool, np.bool_)):
        return json.dumps(bool(obj) if obj is not None else None)
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return _fmt_float(float(obj))
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, np.ndarray):
        obj = obj.tolist()
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {dumps(v, indent, _level + 1)}" for k, v in obj.items()]
        return "{" + ",".join(items) + end + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        # numeric leaf lists stay on one line
        if all(isinstance(v, (int, float, np.integer, np.floating)) and not isinstance(v, bool) for v in obj):
            return "[" + ", ".join(dumps(v) for v in obj) + "]"
        items = [pad + dumps(v, indent, _level + 1) for v in obj]
        return "[" + ",".join(items) + end + "]"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path, obj, indent: int | None = 1) -> None:
    atomic_write_text(path, dumps(obj, indent) + "\n")


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


def save_checkpoint(path, kind: str, config: dict, params: dict[str, np.ndarray],
                    extra: dict | None = None) -> None:
    """Parameters as ``{name, shape, values}`` records, values row-major."""
    doc = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "config": config,
        "params": [{"name": name, "shape": list(np.shape(v)),
                    "values": np.asarray(v, dtype=np.float64).reshape(-1).tolist()}
                   for name, v in params.items()],
    }
    if extra:
        doc["extra"] = extra
    write_json(path, doc)


def load_checkpoint(path, kind: str | None = None) -> tuple[dict, dict[str, np.ndarray], dict]:
    """Returns (config, params, extra)."""
    doc = read_json(path)
    if doc.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint format_version {doc.get('format_version')!r}")
    if kind is not None and doc.get("kind") != kind:
        raise FormatError(f"{path}: expected a {kind!r} checkpoint, found {doc.get('kind')!r}")
    params = {}
    for rec in doc["params"]:
        shape = tuple(rec["shape"])
        values = np.asarray(rec["values"], dtype=np.float64)
        if values.size != int(np.prod(shape)):
            raise FormatError(f"{path}: parameter {rec['name']!r} has {values.size} values for shape {shape}")
        if rec["name"] in params:
            raise FormatError(f"{path}: duplicate parameter {rec['name']!r}")
        params[rec["name"]] = values.reshape(shape)
    return doc.get("config", {}), params, doc.get("extra", {})
