"""
Model checkpoint files.

Layout:
    8 bytes   magic b"FRFTCKPT"
    4 bytes   format version, uint32 little-endian
    4 bytes   header length H, uint32 little-endian
    H bytes   UTF-8 JSON header: {"arch": {...}, "seed": int, "num_params": int}
    rest      parameters, float64 little-endian, in module parameter order
"""

import json
import logging
import os
import struct
import tempfile
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import numpy as np

from .constants import CHECKPOINT_MAGIC, CHECKPOINT_VERSION
from .model import ModelArch, VelocityModel

logger = logging.getLogger(__name__)


class CheckpointError(ValueError):
    """Raised when a checkpoint is missing, truncated or of the wrong kind."""
    pass


def encode_checkpoint(model: VelocityModel, seed: int, extra: Optional[Dict[str, Any]] = None) -> bytes:
    header = {"arch": model.arch.to_dict(), "seed": int(seed), "num_params": model.num_params}
    if extra:
        header["extra"] = extra
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    params = model.flat_params().astype("<f8").tobytes()
    return (
        CHECKPOINT_MAGIC
        + struct.pack("<I", CHECKPOINT_VERSION)
        + struct.pack("<I", len(header_bytes))
        + header_bytes
        + params
    )


def decode_checkpoint(blob: bytes) -> Tuple[VelocityModel, Dict[str, Any]]:
    magic_len = len(CHECKPOINT_MAGIC)
    if blob[:magic_len] != CHECKPOINT_MAGIC:
        raise CheckpointError("not a flowrft checkpoint (bad magic)")
    try:
        version, header_len = struct.unpack_from("<II", blob, magic_len)
    except struct.error as e:
        raise CheckpointError(f"truncated checkpoint header: {e}") from e
    if version > CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    start = magic_len + 8
    try:
        header = json.loads(blob[start:start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt checkpoint header: {e}") from e

    arch = ModelArch.from_dict(header["arch"])
    params = np.frombuffer(blob[start + header_len:], dtype="<f8").astype(np.float64)
    model = VelocityModel.from_arch(arch, seed=header["seed"])
    if params.size != model.num_params or header.get("num_params") != model.num_params:
        raise CheckpointError(
            f"parameter count mismatch: file has {params.size}, architecture needs {model.num_params}"
        )
    model.set_flat_params(params)
    model.eval()
    return model, header


def save_checkpoint(path: Path, model: VelocityModel, seed: int, extra: Optional[Dict[str, Any]] = None) -> Path:
    """Atomically write a checkpoint (temporary file, then rename)."""
    path = Path(path)
    dir_name = path.parent
    dir_name.mkdir(parents=True, exist_ok=True)
    blob = encode_checkpoint(model, seed, extra)
    temp_path = None
    try:
        with tempfile.NamedTemporaryFile(
            mode="wb", dir=dir_name, delete=False, suffix=".tmp", prefix="flowrft_"
        ) as tf:
            temp_path = tf.name
            tf.write(blob)
        os.replace(temp_path, path)
    except Exception as e:
        if temp_path and os.path.exists(temp_path):
            os.unlink(temp_path)
        raise RuntimeError(f"Failed to save {path}: {e}")
    logger.info(f"Saved checkpoint {path} ({model.num_params} params)")
    return path


def load_checkpoint(path: Path) -> Tuple[VelocityModel, Dict[str, Any]]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    return decode_checkpoint(path.read_bytes())
