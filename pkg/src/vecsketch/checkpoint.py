"""Binary container for trained model parameters and optimiser state.

Layout (all little-endian)::

    b'VSKC'  uint32 version
    str config_hash  str mode  str metadata-JSON
    uint32 tensor count
    per tensor: str name, shape, uint32 CRC32, float64 data

Strings are prefixed with their uint32 byte length. Tensors are written
sorted by name, and the metadata with sorted keys, so identical models
produce byte-identical files.
"""
import json
import os
from pathlib import Path
from typing import IO, Any, Dict, Optional, Union

import attr
import numpy as np

from vecsketch import AtomicWriter, VecSketchError
from vecsketch.binformat import (
    DeferredWrites, checksum, struct_read, read_exact,
    read_lenstr, write_lenstr, read_shape, write_shape,
    pack_floats, unpack_floats, SIZE_DOUBLE,
)
from vecsketch.logger import get_logger

LOGGER = get_logger(__name__)
MAGIC = b'VSKC'
FORMAT_VERSION = 1


class CheckpointError(VecSketchError, ValueError):
    """The checkpoint was corrupt, from another version, or for another config."""
    category = 'io'


@attr.define
class Checkpoint:
    """The decoded contents of a checkpoint file."""
    mode: str
    config_hash: str
    metadata: Dict[str, Any] = attr.Factory(dict)
    tensors: Dict[str, np.ndarray] = attr.Factory(dict)


def write(file: IO[bytes], ckpt: Checkpoint) -> None:
    """Write the checkpoint to a binary file."""
    file.write(MAGIC)
    defer = DeferredWrites(file)
    defer.defer('version', '<I', write=True)
    write_lenstr(file, ckpt.config_hash)
    write_lenstr(file, ckpt.mode)
    write_lenstr(file, json.dumps(ckpt.metadata, sort_keys=True))
    defer.defer('count', '<I', write=True)

    count = 0
    for name in sorted(ckpt.tensors):
        arr = np.asarray(ckpt.tensors[name], dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise CheckpointError(f'Tensor "{name}" contains non-finite values!')
        data = pack_floats(arr)
        write_lenstr(file, name)
        write_shape(file, arr.shape)
        file.write(checksum(data).to_bytes(4, 'little'))
        file.write(data)
        count += 1

    defer.set_data('version', FORMAT_VERSION)
    defer.set_data('count', count)
    defer.write()


def read(file: IO[bytes], source: str='<checkpoint>') -> Checkpoint:
    """Read a checkpoint, verifying its structure and checksums."""
    try:
        magic = file.read(4)
        if magic != MAGIC:
            raise CheckpointError(f'"{source}" is not a checkpoint (bad magic {magic!r})!')
        [version] = struct_read('<I', file)
        if version != FORMAT_VERSION:
            raise CheckpointError(f'"{source}" has unsupported checkpoint version {version}!')
        config_hash = read_lenstr(file)
        mode = read_lenstr(file)
        metadata = json.loads(read_lenstr(file))
        [count] = struct_read('<I', file)

        tensors: Dict[str, np.ndarray] = {}
        for _ in range(count):
            name = read_lenstr(file)
            shape = read_shape(file)
            [expected_crc] = struct_read('<I', file)
            size = int(np.prod(shape, dtype=np.int64)) * SIZE_DOUBLE
            data = read_exact(file, size)
            if checksum(data) != expected_crc:
                raise CheckpointError(f'Checksum mismatch for tensor "{name}" in "{source}"!')
            tensors[name] = unpack_floats(data, shape)
    except CheckpointError:
        raise
    except (ValueError, UnicodeDecodeError) as exc:
        # Truncation, bad JSON...
        raise CheckpointError(f'Corrupt checkpoint "{source}": {exc}') from exc

    if file.read(1):
        raise CheckpointError(f'Trailing data after the end of "{source}"!')
    return Checkpoint(mode, config_hash, metadata, tensors)


def save(path: Union[str, 'os.PathLike[str]'], ckpt: Checkpoint) -> None:
    """Atomically write a checkpoint to disk."""
    with AtomicWriter(path, is_bytes=True) as file:
        write(file, ckpt)
    LOGGER.debug('Wrote checkpoint "{}" ({} tensors, mode={})', path, len(ckpt.tensors), ckpt.mode)


def load(
    path: Union[str, 'os.PathLike[str]'],
    expected_hash: Optional[str]=None,
    mode: Optional[str]=None,
) -> Checkpoint:
    """Load a checkpoint from disk.

    If expected_hash or mode are given, the checkpoint must match them.
    """
    path = Path(path)
    with path.open('rb') as file:
        ckpt = read(file, str(path))
    if expected_hash is not None and ckpt.config_hash != expected_hash:
        raise CheckpointError(
            f'Checkpoint "{path}" was made with config {ckpt.config_hash[:12]}, '
            f'expected {expected_hash[:12]}!'
        )
    if mode is not None and ckpt.mode != mode:
        raise CheckpointError(f'Checkpoint "{path}" holds a "{ckpt.mode}" model, not "{mode}"!')
    return ckpt
