"""File helpers: atomic writes and raw float latent dumps with JSON sidecars."""
import json
import os
import tempfile
from pathlib import Path

import numpy as np


def atomic_write_bytes(path, data: bytes):
    """Write via a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str):
    atomic_write_bytes(path, text.encode("utf-8"))


def dump_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def write_latent(path, z: np.ndarray, extra=None):
    """Raw little-endian float32 plus ``<path>.json`` describing the shape."""
    z = np.asarray(z)
    meta = {"dtype": "<f4", "shape": list(z.shape)}
    if extra:
        meta.update(extra)
    atomic_write_bytes(path, z.astype("<f4").tobytes())
    atomic_write_text(sidecar_path(path), dump_json(meta))


def read_latent(path) -> np.ndarray:
    meta = json.loads(sidecar_path(path).read_text())
    data = np.fromfile(path, dtype=meta.get("dtype", "<f4"))
    return data.reshape(meta["shape"]).astype(np.float64)
