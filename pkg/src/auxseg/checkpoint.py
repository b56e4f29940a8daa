"""Array archives: a zip holding a JSON manifest plus raw little-endian float32 buffers.

Used for model checkpoints and for exported CAM / affinity arrays. Writes are
atomic (temp file in the target directory, then rename). Zip entries carry a
fixed timestamp so identical content produces identical bytes.
"""

from __future__ import annotations

import json
import os
import tempfile
import zipfile
from pathlib import Path

import numpy as np
import torch

_EPOCH = (1980, 1, 1, 0, 0, 0)


def save_array_archive(path: str | Path, arrays: dict[str, np.ndarray]) -> None:
    path = Path(path)
    manifest = {
        "format": "auxseg-array-archive-v1",
        "entries": [
            {"name": name, "shape": list(np.asarray(a).shape), "dtype": "float32"}
            for name, a in arrays.items()
        ],
    }
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    os.close(fd)
    try:
        with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
            zf.writestr(zipfile.ZipInfo("manifest.json", _EPOCH), json.dumps(manifest, indent=1))
            for name, a in arrays.items():
                buf = np.ascontiguousarray(np.asarray(a), dtype="<f4").tobytes()
                zf.writestr(zipfile.ZipInfo(f"data/{name}.bin", _EPOCH), buf)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_array_archive(path: str | Path) -> dict[str, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"array archive not found: {path}")
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        arrays = {}
        for entry in manifest["entries"]:
            raw = zf.read(f"data/{entry['name']}.bin")
            a = np.frombuffer(raw, dtype="<f4").reshape(entry["shape"])
            arrays[entry["name"]] = a.copy()
    return arrays


def save_checkpoint(model: torch.nn.Module, path: str | Path) -> None:
    arrays = {name: p.detach().cpu().numpy() for name, p in model.named_parameters()}
    save_array_archive(path, arrays)


def load_checkpoint(model: torch.nn.Module, path: str | Path) -> torch.nn.Module:
    arrays = load_array_archive(path)
    names = {name for name, _ in model.named_parameters()}
    missing = names - arrays.keys()
    extra = arrays.keys() - names
    if missing or extra:
        raise ValueError(
            f"checkpoint mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}"
        )
    with torch.no_grad():
        for name, p in model.named_parameters():
            a = arrays[name]
            if tuple(a.shape) != tuple(p.shape):
                raise ValueError(f"shape mismatch for {name}: {a.shape} vs {tuple(p.shape)}")
            p.copy_(torch.from_numpy(a))
    return model
