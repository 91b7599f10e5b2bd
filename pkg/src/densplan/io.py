"""Artifact writing: atomic files, provenance headers, run manifests."""

from __future__ import annotations

import hashlib
import json
import os
import platform
import tempfile
from importlib import metadata, resources

import numpy as np


def atomic_write(path, data):
    """Write ``data`` (bytes or str) to ``path`` via a temp file and rename."""
    if isinstance(data, str):
        data = data.encode()
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dumps(obj):
    """Canonical JSON: sorted keys, fixed indentation, trailing newline."""
    return json.dumps(_jsonable(obj), sort_keys=True, indent=2, allow_nan=True) + "\n"


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_json(path, obj):
    atomic_write(path, dumps(obj))


def provenance_line(config_hash, seed):
    return f"# config_hash={config_hash},seed={seed}\n"


def read_provenance(line):
    fields = dict(kv.split("=", 1) for kv in line.lstrip("#").strip().split(","))
    return fields["config_hash"], int(fields["seed"])


def fmt(x):
    # repr round-trips doubles exactly
    return repr(float(x))


def csv_text(config_hash, seed, header, rows):
    out = [provenance_line(config_hash, seed), ",".join(header) + "\n"]
    out.extend(",".join(fmt(v) for v in row) + "\n" for row in rows)
    return "".join(out)


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def versions():
    import scipy

    try:
        pkg = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        pkg = "unknown"
    return {"python": platform.python_version(), "numpy": np.__version__, "scipy": scipy.__version__,
            "artifact": pkg}


def write_manifest(path, command, config_hash, seed, artifacts, extra=None):
    """Run manifest listing every artifact with its sha256."""
    body = {
        "command": command,
        "config_hash": config_hash,
        "seed": int(seed),
        "versions": versions(),
        "artifacts": {os.path.basename(a): sha256_file(a) for a in artifacts},
    }
    if extra:
        body.update(extra)
    write_json(path, body)


def load_schema(name):
    return json.loads(resources.files("densplan").joinpath("schemas", name).read_text())
