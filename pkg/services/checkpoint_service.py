# services/checkpoint_service.py

"""
Versioned binary checkpoints.

Layout (little-endian):
    "SDMB" | u32 version | u32 len + JSON header | u32 blob count |
    blobs: u32 len + name | u32 rank | u32 extents[rank] | f32 payload

The JSON header holds the config record and, when known, the id of the run
manifest that produced the checkpoint. Parameters come first, in model order,
followed by BatchNorm running statistics under the `buffer.` prefix.
"""

import json
from pathlib import Path
from typing import Dict, NamedTuple, Optional

import numpy as np
from pydantic import ValidationError as PydanticValidationError

from services.sdmamba_model import SdmambaConfig, SdmambaModel
from utils.binary_io import ByteReader, ByteWriter
from utils.error_handler import FormatError, SdmambaError

CHECKPOINT_MAGIC = b"SDMB"
CHECKPOINT_VERSION = 1

try:
    from services.logging_service import get_run_logger
    _logger_available = True
except ImportError:
    _logger_available = False


def _log_if_available(func_name, *args, **kwargs):
    """Helper to log if logger is available."""
    if _logger_available:
        try:
            getattr(get_run_logger(), func_name)(*args, **kwargs)
        except Exception:
            pass


class Checkpoint(NamedTuple):
    model: SdmambaModel
    config: SdmambaConfig
    manifest_id: Optional[str]


def encode_checkpoint(model: SdmambaModel, manifest_id: Optional[str] = None) -> bytes:
    writer = ByteWriter()
    writer.magic(CHECKPOINT_MAGIC)
    writer.u32(CHECKPOINT_VERSION)
    header = {"config": model.config.model_dump(), "manifest_id": manifest_id}
    writer.text(json.dumps(header, sort_keys=True))

    blobs: Dict[str, np.ndarray] = model.state_dict()
    writer.u32(len(blobs))
    for name, array in blobs.items():
        writer.text(name)
        writer.u32(array.ndim)
        writer.u32_array(array.shape)
        writer.f32_array(array)
    return writer.getvalue()


def save_checkpoint(model: SdmambaModel, path: Path, manifest_id: Optional[str] = None) -> Path:
    payload = encode_checkpoint(model, manifest_id)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(payload)
    _log_if_available('log_file_operation', 'WRITE', str(path), f'checkpoint, {len(payload)} bytes')
    return path


def decode_checkpoint(reader: ByteReader) -> Checkpoint:
    reader.expect_magic(CHECKPOINT_MAGIC)
    version_offset = reader.offset
    version = reader.u32("format version")
    if version != CHECKPOINT_VERSION:
        raise reader.fail(f"Unsupported checkpoint version {version}", offset=version_offset)

    header_offset = reader.offset
    try:
        header = json.loads(reader.text("config header"))
        config = SdmambaConfig.model_validate(header["config"])
    except (json.JSONDecodeError, KeyError, TypeError, PydanticValidationError) as e:
        raise reader.fail(f"Invalid checkpoint config header: {e}", offset=header_offset) from e

    count = reader.u32("blob count")
    state: Dict[str, np.ndarray] = {}
    for _ in range(count):
        name = reader.text("blob name")
        rank = reader.u32("blob rank")
        extents = tuple(int(x) for x in reader.u32_array(rank, "blob extents"))
        size = int(np.prod(extents)) if extents else 1
        state[name] = reader.f32_array(size, f"blob '{name}'").reshape(extents)
    if not reader.at_end():
        raise reader.fail(f"{reader.remaining} trailing bytes after the last blob")

    model = SdmambaModel(config)
    try:
        model.load_state_dict(state)
    except SdmambaError as e:
        raise FormatError(f"Checkpoint blobs do not match its config: {e}", path=reader.path) from e
    return Checkpoint(model=model, config=config, manifest_id=header.get("manifest_id"))


def load_checkpoint(path: Path) -> Checkpoint:
    checkpoint = decode_checkpoint(ByteReader.from_file(Path(path)))
    _log_if_available('log_file_operation', 'READ', str(path), f'checkpoint, {checkpoint.model.parameter_count()} parameters')
    return checkpoint
