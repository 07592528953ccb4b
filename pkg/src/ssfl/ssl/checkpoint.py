"""ParameterSet archive: little-endian tensors plus a JSON manifest, packed as .npz."""
from __future__ import annotations

import io
import json
import os
import zipfile
from collections import OrderedDict
from pathlib import Path
from typing import Mapping, Optional, Union

import numpy as np
import torch

MANIFEST_KEY = "__manifest__"
_DTYPES = {torch.float32: "<f4", torch.float64: "<f8", torch.float16: "<f2"}


class ArchiveError(ValueError):
    pass


def encode_archive(params: Mapping[str, torch.Tensor], manifest: Optional[dict] = None) -> bytes:
    arrays = {}
    order = []
    for name, t in params.items():
        if name == MANIFEST_KEY:
            raise ArchiveError(f"reserved tensor name {name!r}")
        if t.dtype not in _DTYPES:
            raise ArchiveError(f"{name}: unsupported dtype {t.dtype}")
        arrays[name] = t.detach().cpu().numpy().astype(_DTYPES[t.dtype], copy=False)
        order.append(name)
    meta = {"order": order, "manifest": manifest or {}}
    arrays[MANIFEST_KEY] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    return buf.getvalue()


def decode_archive(blob: bytes) -> tuple["OrderedDict[str, torch.Tensor]", dict]:
    try:
        with np.load(io.BytesIO(blob), allow_pickle=False) as f:
            meta = json.loads(bytes(f[MANIFEST_KEY]).decode())
            params = OrderedDict(
                (name, torch.from_numpy(np.array(f[name]).astype(f[name].dtype.newbyteorder("="))))
                for name in meta["order"])
    except (zipfile.BadZipFile, KeyError, ValueError, OSError, EOFError) as exc:
        raise ArchiveError(f"corrupt parameter archive: {exc}") from exc
    return params, meta["manifest"]


def save_checkpoint(path: Union[str, os.PathLike], params: Mapping[str, torch.Tensor],
                    manifest: Optional[dict] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_archive(params, manifest))
    return path


def load_checkpoint(path: Union[str, os.PathLike]):
    path = Path(path)
    if not path.exists():
        raise ArchiveError(f"checkpoint not found: {path}")
    return decode_archive(path.read_bytes())
