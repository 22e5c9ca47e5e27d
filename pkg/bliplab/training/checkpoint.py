"""
Binary checkpoint container.

Layout (all integers little-endian)::

    8 bytes   magic b"BLIPCKPT"
    u32       format version
    u64       header length in bytes
    header    UTF-8 JSON: configs, epoch, RNG state, history and a tensor
              directory of (name, shape, dtype, offset, nbytes)
    payload   raw row-major '<f8' arrays at the directory offsets,
              relative to the start of the payload
"""

import json
import logging
import struct
from pathlib import Path
from typing import Union

import numpy as np

from bliplab.exceptions import ConfigError, DataError
from bliplab.models.mpnn import BlipModel, ModelConfig
from bliplab.training.engine import Checkpoint, TrainConfig
from bliplab.utils.utils import config_from_dict, config_to_dict

logger = logging.getLogger(__name__)

MAGIC = b"BLIPCKPT"
FORMAT_VERSION = 1
DTYPE = "<f8"
_PREAMBLE = struct.Struct("<8sIQ")
HEADER_KEYS = (
    "model_config",
    "train_config",
    "epoch",
    "rng_state",
    "history",
    "tensors",
)
TENSOR_KEYS = ("name", "shape", "dtype", "offset", "nbytes")


def save_checkpoint(path: Union[str, Path], checkpoint: Checkpoint) -> Path:
    """
    Write ``checkpoint`` to ``path``.

    Parameters
    ----------
    path : Union[str, Path]
        Destination file, overwritten if present.
    checkpoint : Checkpoint
        The checkpoint to store.

    Returns
    -------
    Path
        The written file.
    """
    path = Path(path)
    directory = []
    payload = []
    offset = 0
    for name, value in checkpoint.model.params.items():
        data = np.ascontiguousarray(value, dtype=DTYPE).tobytes()
        directory.append(
            {
                "name": name,
                "shape": list(value.shape),
                "dtype": DTYPE,
                "offset": offset,
                "nbytes": len(data),
            }
        )
        payload.append(data)
        offset += len(data)

    header = {
        "format_version": FORMAT_VERSION,
        "model_config": config_to_dict(checkpoint.model.config),
        "train_config": config_to_dict(checkpoint.train_config),
        "epoch": checkpoint.epoch,
        "rng_state": checkpoint.rng_state,
        "history": checkpoint.history,
        "tensors": directory,
    }
    header_bytes = json.dumps(header).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_PREAMBLE.pack(MAGIC, FORMAT_VERSION, len(header_bytes)))
        f.write(header_bytes)
        for data in payload:
            f.write(data)
    logger.debug("Saved checkpoint to %s (%d bytes payload)", path, offset)
    return path


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    """
    Read a checkpoint written by ``save_checkpoint``.

    Raises
    ------
    DataError
        If the file is missing, truncated, has the wrong magic or version,
        or its tensors do not match its model config.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"Checkpoint {path} does not exist")
    raw = path.read_bytes()
    if len(raw) < _PREAMBLE.size:
        raise DataError(f"{path}: file is too short to be a checkpoint")
    magic, version, header_length = _PREAMBLE.unpack_from(raw)
    if magic != MAGIC:
        raise DataError(f"{path}: not a checkpoint (bad magic {magic!r})")
    if version != FORMAT_VERSION:
        raise DataError(
            f"{path}: unsupported checkpoint version {version}, expected "
            f"{FORMAT_VERSION}"
        )
    start = _PREAMBLE.size
    try:
        header = json.loads(raw[start : start + header_length])
    except (json.JSONDecodeError, UnicodeDecodeError):
        raise DataError(f"{path}: corrupt checkpoint header") from None
    if not isinstance(header, dict):
        raise DataError(f"{path}: checkpoint header is not an object")
    missing = [key for key in HEADER_KEYS if key not in header]
    if missing:
        raise DataError(
            f"{path}: checkpoint header is missing {', '.join(missing)}"
        )
    payload = memoryview(raw)[start + header_length :]

    params = {}
    for entry in header["tensors"]:
        if not isinstance(entry, dict) or any(
            key not in entry for key in TENSOR_KEYS
        ):
            raise DataError(f"{path}: bad tensor entry {entry!r}")
        end = entry["offset"] + entry["nbytes"]
        if entry["dtype"] != DTYPE or end > len(payload):
            raise DataError(f"{path}: bad tensor entry {entry['name']}")
        params[entry["name"]] = (
            np.frombuffer(payload[entry["offset"] : end], dtype=DTYPE)
            .reshape(entry["shape"])
            .astype(np.float64)
        )

    try:
        model_config = config_from_dict(ModelConfig, header["model_config"])
        train_config = config_from_dict(TrainConfig, header["train_config"])
        model = BlipModel(model_config, params)
    except (ConfigError, ValueError) as error:
        raise DataError(f"{path}: {error}") from None
    return Checkpoint(
        model=model,
        train_config=train_config,
        epoch=header["epoch"],
        rng_state=header["rng_state"],
        history=header["history"],
    )

