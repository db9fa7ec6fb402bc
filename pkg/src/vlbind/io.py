"""Named-tensor container, CSV helpers and content hashing."""
from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .backend.types import ActivationTrace


def _safe(name: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in name)


def save_tensor(directory, name: str, array: np.ndarray, meta: Mapping | None = None) -> list[Path]:
    """Write ``name.npy`` plus a ``name.json`` sidecar (meta, dtype, shape)."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    array = np.asarray(array)
    stem = _safe(name)
    npy, side = d / f"{stem}.npy", d / f"{stem}.json"
    np.save(npy, array, allow_pickle=False)
    info = {"name": name, "dtype": str(array.dtype), "shape": list(array.shape), **dict(meta or {})}
    side.write_text(json.dumps(info, sort_keys=True, indent=1, default=_jsonable))
    return [npy, side]


def load_tensor(directory, name: str) -> tuple[np.ndarray, dict]:
    d = Path(directory)
    stem = _safe(name)
    meta = json.loads((d / f"{stem}.json").read_text())
    arr = np.load(d / f"{stem}.npy", allow_pickle=False)
    if list(arr.shape) != meta["shape"] or str(arr.dtype) != meta["dtype"]:
        raise ValueError(f"tensor {name!r} does not match its sidecar")
    return arr, meta


def list_tensors(directory) -> list[str]:
    return sorted(json.loads(p.read_text())["name"] for p in Path(directory).glob("*.json"))


def save_trace(trace: ActivationTrace, directory, prefix: str = "") -> list[Path]:
    """One tensor per (site, layer) entry with its token/head indices in the sidecar."""
    out = []
    for (site, layer), e in sorted(trace.entries.items()):
        meta = {
            "site": site,
            "layer": layer,
            "positions": list(e.positions),
            "heads": None if e.heads is None else list(e.heads),
            "trial_id": trace.trial_id,
        }
        out += save_tensor(directory, f"{prefix}{site}.L{layer}", e.values, meta)
    return out


def load_trace(directory, prefix: str = "") -> ActivationTrace:
    trace = ActivationTrace()
    for name in list_tensors(directory):
        if not name.startswith(prefix):
            continue
        arr, meta = load_tensor(directory, name)
        trace.trial_id = meta.get("trial_id")
        trace.add(meta["site"], meta["layer"], arr, meta["positions"], meta["heads"])
    return trace


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])
    return path


def read_csv(path) -> list[dict]:
    with Path(path).open() as f:
        return list(csv.DictReader(f))


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (set, frozenset, tuple)):
        return list(o)
    raise TypeError(f"not JSON serializable: {type(o)}")
