"""Common code for handling binary formats."""
from binascii import crc32
from struct import Struct
from typing import IO, Hashable, Union, Dict, Tuple, Sequence

import numpy as np

SIZE_DOUBLE = Struct('<d').size
assert SIZE_DOUBLE == 8

ST_LEN = Struct('<I')
# Tensors are always stored little-endian, whatever the host is.
DTYPE_F64 = np.dtype('<f8')


def struct_read(fmt: Union[Struct, str], file: IO[bytes]) -> tuple:
    """Read a structure from the file."""
    if not isinstance(fmt, Struct):
        fmt = Struct(fmt)
    data = file.read(fmt.size)
    if len(data) != fmt.size:
        raise ValueError(f'Fell off end of file, expected {fmt.size} bytes, got {len(data)}!')
    return fmt.unpack(data)


def read_exact(file: IO[bytes], size: int) -> bytes:
    """Read exactly this many bytes, or fail."""
    data = file.read(size)
    if len(data) != size:
        raise ValueError(f'Fell off end of file, expected {size} bytes, got {len(data)}!')
    return data


def read_lenstr(file: IO[bytes], encoding: str='utf8') -> str:
    """Read a string prefixed with its 32-bit byte length."""
    [size] = struct_read(ST_LEN, file)
    return read_exact(file, size).decode(encoding)


def write_lenstr(file: IO[bytes], text: str, encoding: str='utf8') -> None:
    """Write a string prefixed with its 32-bit byte length."""
    data = text.encode(encoding)
    file.write(ST_LEN.pack(len(data)))
    file.write(data)


def read_shape(file: IO[bytes]) -> Tuple[int, ...]:
    """Read an array shape: a dimension count then each size."""
    [ndim] = struct_read(ST_LEN, file)
    if ndim == 0:
        return ()
    return struct_read('<' + 'I' * ndim, file)


def write_shape(file: IO[bytes], shape: Sequence[int]) -> None:
    """Write an array shape, the inverse of read_shape()."""
    file.write(ST_LEN.pack(len(shape)))
    if shape:
        file.write(Struct('<' + 'I' * len(shape)).pack(*shape))


def pack_floats(arr: np.ndarray) -> bytes:
    """Serialise an array as little-endian doubles, in C order."""
    return np.ascontiguousarray(arr, dtype=DTYPE_F64).tobytes()


def unpack_floats(data: bytes, shape: Sequence[int]) -> np.ndarray:
    """Rebuild a native float64 array from packed doubles."""
    count = int(np.prod(shape, dtype=np.int64))
    if len(data) != count * SIZE_DOUBLE:
        raise ValueError(f'Expected {count} doubles for shape {tuple(shape)}, got {len(data)} bytes!')
    return np.frombuffer(data, dtype=DTYPE_F64).astype(np.float64).reshape(shape)


def checksum(data: bytes, prior: int=0) -> int:
    """CRC32 of a block, continuing from a prior value to checksum in pieces."""
    return crc32(data, prior)


class DeferredWrites:
    """Header fields that depend on data written after them.

    Reserve the space with defer(), fill it in with set_data() once the value is
    known, then write() seeks back to patch every field. Keys are any hashable.
    """
    def __init__(self, file: IO[bytes]) -> None:
        self.file = file
        # Position to write to, and the struct format to use.
        self.loc: Dict[Hashable, Tuple[int, Struct]] = {}
        # Then the bytes to write there.
        self.data: Dict[Hashable, bytes] = {}

    def defer(self, key: Hashable, fmt: Union[str, Struct], write: bool=False) -> None:
        """Mark that the given format data is going to be written here.

        If write is true, write null bytes.
        """
        if isinstance(fmt, str):
            fmt = Struct(fmt)
        self.loc[key] = (self.file.tell(), fmt)
        if write:
            self.file.write(bytes(fmt.size))

    def set_data(self, key: Hashable, *data: Union[int, str, bytes, float]) -> None:
        """Specify the data for the given key. Data is the same as pack()."""
        off, fmt = self.loc[key]
        self.data[key] = packed = fmt.pack(*data)
        assert len(packed) == fmt.size

    def write(self) -> None:
        """Write out all the data. All values should have been set."""
        prev_pos = self.file.tell()
        for key, (off, fmt) in self.loc.items():
            try:
                data = self.data.pop(key)
            except KeyError:
                raise ValueError(f'No data for key "{key}"!') from None
            self.file.seek(off)
            self.file.write(data)
        self.loc.clear()
        if self.data:
            raise ValueError(f'Data specified for unknown keys {list(self.data)}!')
        self.file.seek(prev_pos)
