"""Single-file checkpoint container.

A checkpoint is a dict with keys ``version``, ``config``, ``weights`` (name ->
tensor), ``optimizer``, ``rng`` and ``step``. Writes are atomic: a crash
mid-write never leaves a truncated file under the final name.
"""

from __future__ import annotations

import os
import tempfile
from pathlib import Path

import torch

from hazemeta import DataError

FORMAT_VERSION = "hazemeta-ckpt/1"


def save_container(blob: dict, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = {"version": FORMAT_VERSION, **blob}
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    os.close(fd)
    try:
        torch.save(blob, tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)
    return path


def load_container(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"checkpoint not found: {path}")
    try:
        blob = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(blob, dict) or blob.get("version") != FORMAT_VERSION:
        raise DataError(f"{path} is not a {FORMAT_VERSION} container")
    return blob
