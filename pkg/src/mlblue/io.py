"""File formats: structured-text documents, a binary array container, CSV import.

Structured text is JSON (YAML is accepted on input when the file name ends
in ``.yaml`` or ``.yml``).  Every document carries ``schema_version``.

The binary container is::

    b"MLBLUE-BIN\\n"              magic line
    uint64, little endian         length of the header in bytes
    header                        UTF-8 JSON: kind, metadata, array table
    data                          arrays as little-endian float64, C order

The array table lists ``name``, ``shape`` and byte ``offset`` (relative to
the start of the data section) of every array.
"""

import csv
import json
import struct
from pathlib import Path

import numpy as np

from .coupling import CouplingStructure
from .moments import Ensemble

SCHEMA_VERSION = 1
MAGIC = b"MLBLUE-BIN\n"


class ConfigError(ValueError):
    """A configuration or input document is malformed."""


def load_document(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    try:
        if path.suffix in (".yaml", ".yml"):
            import yaml

            data = yaml.safe_load(text)
        else:
            data = json.loads(text)
    except Exception as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    version = data.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"{path}: unsupported schema_version {version}")
    return data


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not np.isfinite(obj):
        return str(obj)
    return obj


def dumps(data):
    """Deterministic JSON: sorted keys, fixed separators, shortest float repr."""
    return json.dumps(_plain(data), sort_keys=True, indent=2, allow_nan=False) + "\n"


def write_document(path, data):
    data = dict(data)
    data.setdefault("schema_version", SCHEMA_VERSION)
    Path(path).write_text(dumps(data))


def structure_from_document(data):
    """CouplingStructure from a mapping with ``L``, ``groups``, ``m``, ``costs``."""
    try:
        return CouplingStructure.from_dict(data)
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"invalid structure document: {exc!r}") from exc


def load_structure(path):
    data = load_document(path)
    return structure_from_document(data.get("structure", data))


def write_arrays(path, kind, arrays, metadata=None):
    """Write named float64 arrays and a metadata mapping to the binary container."""
    table, offset, blobs = [], 0, []
    for name, arr in arrays:
        a = np.ascontiguousarray(arr, dtype="<f8")
        table.append({"name": name, "shape": list(a.shape), "offset": offset})
        blobs.append(a.tobytes())
        offset += a.nbytes
    header = dumps({"schema_version": SCHEMA_VERSION, "kind": kind,
                    "metadata": metadata or {}, "arrays": table}).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)


def read_arrays(path):
    """Return (kind, metadata, {name: array}) from a binary container."""
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise ConfigError(f"{path} is not an MLBLUE binary container")
    pos = len(MAGIC)
    (hlen,) = struct.unpack("<Q", raw[pos:pos + 8])
    pos += 8
    header = json.loads(raw[pos:pos + hlen].decode())
    data = memoryview(raw)[pos + hlen:]
    arrays = {}
    for entry in header["arrays"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        start = entry["offset"]
        arrays[entry["name"]] = np.frombuffer(data[start:start + 8 * count], dtype="<f8").reshape(
            entry["shape"]).astype(float)
    return header["kind"], header["metadata"], arrays


def write_ensemble(path, ensemble):
    meta = {"structure": ensemble.structure.to_dict(), "seed": ensemble.seed,
            "generator": ensemble.metadata}
    write_arrays(path, "ensemble", [(f"group{k}", g) for k, g in enumerate(ensemble.groups, 1)],
                 meta)


def read_ensemble(path):
    kind, meta, arrays = read_arrays(path)
    if kind != "ensemble":
        raise ConfigError(f"{path} holds {kind!r}, not an ensemble")
    s = CouplingStructure.from_dict(meta["structure"])
    groups = tuple(arrays[f"group{k}"] for k in range(1, s.K + 1))
    return Ensemble(s, groups, seed=meta.get("seed"), metadata=meta.get("generator", {}))


def write_weights(path, weights, flavor=None):
    """Store any weight set; the flavor goes into the header."""
    flavor = flavor or getattr(weights, "flavor", "scalar")
    meta = {"flavor": flavor, "alpha": np.asarray(weights.alpha).tolist(),
            "variance": weights.variance, "biased": bool(getattr(weights, "biased", False))}
    basis = getattr(weights, "basis", None)
    if basis is not None:
        meta["basis"] = basis.to_dict()
    if getattr(weights, "level_sizes", None) is not None:
        meta["level_sizes"] = list(weights.level_sizes)
    write_arrays(path, "weights", [(f"beta{k}", b) for k, b in enumerate(weights.betas, 1)], meta)


def read_weights(path):
    """Return (metadata, list of weight arrays)."""
    kind, meta, arrays = read_arrays(path)
    if kind != "weights":
        raise ConfigError(f"{path} holds {kind!r}, not weights")
    return meta, [arrays[f"beta{k}"] for k in range(1, len(arrays) + 1)]


def read_ensemble_csv(path, structure):
    """Ensemble from CSV rows ``group,member,level[,element],value`` (1-based indices).

    Levels refer to the global level numbers; every (member, level,
    element) cell of every group must be present exactly once.
    """
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    if rows and not rows[0][0].strip().lstrip("-").isdigit():
        rows = rows[1:]
    if not rows:
        raise ConfigError(f"{path} has no data rows")
    width = {len(r) for r in rows}
    if width not in ({4}, {5}):
        raise ConfigError(f"{path}: rows need 4 or 5 columns")
    vector = width == {5}
    parsed = [(tuple(int(v) for v in r[:-1]), float(r[-1])) for r in rows]
    groups = []
    for k in range(1, structure.K + 1):
        cells = [(key[1:], v) for key, v in parsed if key[0] == k]
        if not cells:
            raise ConfigError(f"{path}: no samples for group {k}")
        levels = [int(l) + 1 for l in structure.index(k)]
        m = max(c[0][0] for c in cells)
        n = max(c[0][2] for c in cells) if vector else 1
        arr = np.full((m, len(levels), n), np.nan)
        for key, v in cells:
            if key[1] not in levels:
                raise ConfigError(f"{path}: level {key[1]} is not in group {k}")
            arr[key[0] - 1, levels.index(key[1]), (key[2] - 1) if vector else 0] = v
        if np.isnan(arr).any():
            raise ConfigError(f"{path}: group {k} has missing cells")
        groups.append(arr if vector else arr[:, :, 0])
    return Ensemble(structure.with_m(tuple(g.shape[0] for g in groups)), tuple(groups))
