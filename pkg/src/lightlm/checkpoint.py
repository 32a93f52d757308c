"""Checkpoint directories: a JSON manifest plus one little-endian float32 blob.

The manifest records, per tensor name, its shape and byte offset into the
blob, together with a SHA-256 of the blob so corruption is detected on load.
Saving is canonical (sorted tensor names, sorted JSON keys, no timestamps),
so save -> load -> save reproduces files byte for byte.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .config import EncoderConfig, load_encoder_config, save_encoder_config
from .encoder import Encoder, build_model, named_parameter_dict
from .errors import DataValidationError

MANIFEST_NAME = "manifest.json"
BLOB_NAME = "weights.bin"
CONFIG_NAME = "encoder.cfg"
FORMAT = "lightlm-checkpoint-v1"


def save_tensor_map(
    directory,
    tensors: dict[str, torch.Tensor],
    config: Optional[EncoderConfig] = None,
    extra: Optional[dict] = None,
) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)

    entries: dict[str, dict] = {}
    blob = bytearray()
    for name in sorted(tensors):
        array = tensors[name].detach().cpu().to(torch.float32).numpy().astype("<f4")
        entries[name] = {
            "shape": list(array.shape),
            "offset": len(blob),
            "numel": int(array.size),
        }
        blob.extend(array.tobytes())

    (directory / BLOB_NAME).write_bytes(bytes(blob))
    manifest = {
        "format": FORMAT,
        "blob": BLOB_NAME,
        "dtype": "<f4",
        "blob_sha256": hashlib.sha256(bytes(blob)).hexdigest(),
        "tensors": entries,
        "extra": extra or {},
    }
    (directory / MANIFEST_NAME).write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    if config is not None:
        save_encoder_config(config, directory / CONFIG_NAME)
    return directory


def read_manifest(directory) -> dict:
    path = Path(directory) / MANIFEST_NAME
    if not path.is_file():
        raise DataValidationError(f"{path}: missing checkpoint manifest")
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise DataValidationError(f"{path}: corrupt manifest ({e})") from e
    if manifest.get("format") != FORMAT:
        raise DataValidationError(f"{path}: unknown checkpoint format {manifest.get('format')!r}")
    return manifest


def load_tensor_map(directory) -> tuple[dict[str, torch.Tensor], dict]:
    directory = Path(directory)
    manifest = read_manifest(directory)
    blob = (directory / manifest["blob"]).read_bytes()
    digest = hashlib.sha256(blob).hexdigest()
    if digest != manifest["blob_sha256"]:
        raise DataValidationError(
            f"{directory}: weight blob hash mismatch (corrupt or tampered checkpoint)"
        )
    tensors: dict[str, torch.Tensor] = {}
    for name, entry in manifest["tensors"].items():
        start = entry["offset"]
        end = start + entry["numel"] * 4
        if end > len(blob):
            raise DataValidationError(f"{directory}: tensor {name} overruns the blob")
        array = np.frombuffer(blob, dtype="<f4", count=entry["numel"], offset=start)
        tensors[name] = torch.from_numpy(array.copy()).reshape(entry["shape"])
    return tensors, manifest


def save_model(
    directory, model: Encoder, extra: Optional[dict] = None
) -> Path:
    """Save an encoder's parameters (tied tensors once) plus its config."""
    return save_tensor_map(
        directory, dict(named_parameter_dict(model)), config=model.config, extra=extra
    )


def load_model(
    directory, dtype: torch.dtype = torch.float32
) -> tuple[Encoder, dict]:
    """Rebuild an encoder from a checkpoint directory, bit-faithfully at float32."""
    directory = Path(directory)
    config_path = directory / CONFIG_NAME
    if not config_path.is_file():
        raise DataValidationError(f"{config_path}: missing encoder config")
    config = load_encoder_config(config_path)
    tensors, manifest = load_tensor_map(directory)

    model = build_model(config, seed=0, dtype=dtype)
    expected = set(named_parameter_dict(model))
    got = set(tensors)
    if expected != got:
        missing, surplus = sorted(expected - got), sorted(got - expected)
        raise DataValidationError(
            f"{directory}: tensor names do not match the config "
            f"(missing {missing[:3]}, surplus {surplus[:3]})"
        )
    with torch.no_grad():
        for name, param in named_parameter_dict(model).items():
            param.copy_(tensors[name].to(dtype))
    return model, manifest
