"""Checkpoint container shared by the coreference and extraction models.

A checkpoint is an ``.npz`` archive of named float arrays plus one
``__meta__`` entry holding UTF-8 JSON: ``{"kind", "dims", "seed",
"config", "config_hash", ...}``.
"""

from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path

import numpy as np

from ._io import atomic_write_bytes, config_hash

META_KEY = "__meta__"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, kind: str, arrays: dict[str, np.ndarray], meta: dict) -> None:
    meta = dict(meta)
    meta["kind"] = kind
    meta.setdefault("config", {})
    meta["config_hash"] = config_hash(meta["config"])
    if META_KEY in arrays:
        raise CheckpointError(f"array name {META_KEY!r} is reserved")
    payload = {k: np.asarray(v) for k, v in arrays.items()}
    payload[META_KEY] = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    atomic_write_bytes(path, _npz_bytes(payload))


def _npz_bytes(arrays: dict[str, np.ndarray]) -> bytes:
    # np.savez stamps entries with the wall clock; fixed timestamps keep equal checkpoints byte-identical
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            member = io.BytesIO()
            np.lib.format.write_array(member, np.ascontiguousarray(arrays[name]), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0)), member.getvalue())
    return buf.getvalue()


def load_checkpoint(path, kind: str | None = None) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as z:
        if META_KEY not in z.files:
            raise CheckpointError(f"{path}: missing {META_KEY}")
        meta = json.loads(z[META_KEY].tobytes().decode("utf-8"))
        arrays = {k: z[k] for k in z.files if k != META_KEY}
    if kind is not None and meta.get("kind") != kind:
        raise CheckpointError(f"{path}: expected a {kind!r} checkpoint, found {meta.get('kind')!r}")
    return arrays, meta
