# utils/binary_io.py

"""
Little-endian binary reader/writer shared by the `.hsc` cube format, the
`.hsl` label-map format and the `.sdmb` checkpoint format.

All integers are u32/i32 and all floats are f32, little-endian. The reader
tracks its byte offset so truncation and bad headers surface as FormatError
with the offending position.
"""

from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from utils.error_handler import FormatError


class ByteWriter:
    def __init__(self):
        self._chunks = []

    def magic(self, tag: bytes) -> None:
        self._chunks.append(bytes(tag))

    def u32(self, value: int) -> None:
        self._chunks.append(np.array([value], dtype="<u4").tobytes())

    def u32_array(self, values: Sequence[int]) -> None:
        self._chunks.append(np.asarray(values, dtype="<u4").tobytes())

    def f32_array(self, values: np.ndarray) -> None:
        self._chunks.append(np.ascontiguousarray(values, dtype="<f4").tobytes())

    def i32_array(self, values: np.ndarray) -> None:
        self._chunks.append(np.ascontiguousarray(values, dtype="<i4").tobytes())

    def text(self, value: str) -> None:
        encoded = value.encode("utf-8")
        self.u32(len(encoded))
        self._chunks.append(encoded)

    def getvalue(self) -> bytes:
        return b"".join(self._chunks)

    def write_to(self, path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("wb") as f_out:
            f_out.write(self.getvalue())
        return path


class ByteReader:
    def __init__(self, payload: bytes, path: Optional[str] = None):
        self._payload = payload
        self._path = path
        self.offset = 0

    @classmethod
    def from_file(cls, path: Path) -> "ByteReader":
        path = Path(path)
        with path.open("rb") as f_in:
            return cls(f_in.read(), path=str(path))

    @property
    def path(self) -> Optional[str]:
        return self._path

    @property
    def remaining(self) -> int:
        return len(self._payload) - self.offset

    def at_end(self) -> bool:
        return self.remaining == 0

    def _take(self, n_bytes: int, what: str) -> bytes:
        if n_bytes < 0 or self.remaining < n_bytes:
            raise FormatError(
                f"Truncated file while reading {what}: need {n_bytes} bytes, {self.remaining} left",
                offset=self.offset,
                path=self._path,
            )
        chunk = self._payload[self.offset:self.offset + n_bytes]
        self.offset += n_bytes
        return chunk

    def expect_magic(self, tag: bytes) -> None:
        start = self.offset
        found = self._take(len(tag), "magic")
        if found != tag:
            raise FormatError(
                f"Bad magic {found!r}, expected {tag!r}", offset=start, path=self._path
            )

    def u32(self, what: str = "u32") -> int:
        return int(np.frombuffer(self._take(4, what), dtype="<u4")[0])

    def u32_array(self, count: int, what: str = "u32 array") -> np.ndarray:
        return np.frombuffer(self._take(4 * count, what), dtype="<u4").astype(np.int64)

    def f32_array(self, count: int, what: str = "f32 payload") -> np.ndarray:
        return np.frombuffer(self._take(4 * count, what), dtype="<f4").astype(np.float32)

    def i32_array(self, count: int, what: str = "i32 payload") -> np.ndarray:
        return np.frombuffer(self._take(4 * count, what), dtype="<i4").astype(np.int32)

    def text(self, what: str = "text") -> str:
        length = self.u32(f"{what} length")
        start = self.offset
        raw = self._take(length, what)
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as e:
            raise FormatError(f"Invalid UTF-8 in {what}", offset=start, path=self._path) from e

    def fail(self, message: str, offset: Optional[int] = None) -> FormatError:
        return FormatError(message, offset=self.offset if offset is None else offset, path=self._path)
