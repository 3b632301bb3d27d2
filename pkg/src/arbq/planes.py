"""Dense weight handling, packed sign planes, bit masks, masked row statistics.

Conventions used throughout the package:

* weight matrices are 2-D float64 arrays, shape (n, m), rows = output channels;
* sign planes hold values in {-1, +1}; the stored bit is 1 for +1 and 0 for -1;
* packing is LSB-first within each byte and every row starts on a byte
  boundary, so a row of m columns occupies ceil(m / 8) bytes with zero padding
  bits at the high end of the final byte;
* ``sign(0) = +1`` everywhere a sign is taken;
* masked reductions divide by the masked count, never by the full row length.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

__all__ = [
    "SignPlane",
    "BitMask",
    "as_weight_matrix",
    "as_mask",
    "sign_plus",
    "row_bytes",
    "pack_bits",
    "unpack_bits",
    "masked_count",
    "masked_row_mean",
    "masked_row_sum",
]


def as_weight_matrix(w, name: str = "weights") -> np.ndarray:
    """Validate and convert to a finite float64 matrix."""
    arr = np.asarray(w, dtype=np.float64)
    if arr.ndim != 2:
        raise ValidationError(f"{name}: expected a 2-D matrix, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValidationError(f"{name}: non-finite entries")
    return arr


def as_mask(m, shape: tuple[int, int] | None = None, name: str = "mask") -> np.ndarray:
    """Validate and convert to a boolean mask, optionally checking its shape."""
    arr = np.asarray(m)
    if arr.dtype != np.bool_:
        if not np.isin(arr, (0, 1)).all():
            raise ValidationError(f"{name}: entries must be 0/1 or boolean")
        arr = arr.astype(bool)
    if shape is not None and arr.shape != shape:
        raise ValidationError(f"{name}: expected shape {shape}, got {arr.shape}")
    return arr


def sign_plus(x: np.ndarray) -> np.ndarray:
    """Sign with the convention sign(0) = +1, returned as int8."""
    return np.where(np.asarray(x) >= 0, 1, -1).astype(np.int8)


def row_bytes(cols: int) -> int:
    """Bytes per packed row: columns rounded up to a whole byte."""
    return (cols + 7) // 8


def pack_bits(bits: np.ndarray) -> bytes:
    """Pack a 2-D 0/1 array row-major, LSB-first, rows byte-aligned."""
    arr = np.asarray(bits, dtype=np.uint8)
    if arr.ndim != 2:
        raise ValidationError(f"pack_bits: expected 2-D input, got shape {arr.shape}")
    return np.packbits(arr, axis=1, bitorder="little").tobytes()


def unpack_bits(data: bytes, rows: int, cols: int) -> np.ndarray:
    """Inverse of :func:`pack_bits`; returns a (rows, cols) uint8 0/1 array."""
    expected = rows * row_bytes(cols)
    if len(data) != expected:
        raise ValidationError(
            f"unpack_bits: need {expected} bytes for {rows}x{cols}, got {len(data)}"
        )
    if rows == 0 or cols == 0:
        return np.zeros((rows, cols), dtype=np.uint8)
    packed = np.frombuffer(data, dtype=np.uint8).reshape(rows, row_bytes(cols))
    return np.unpackbits(packed, axis=1, count=cols, bitorder="little")


@dataclass(frozen=True)
class SignPlane:
    """A {-1, +1} matrix stored bit-packed (1 = +1), rows byte-aligned."""

    rows: int
    cols: int
    data: bytes

    @classmethod
    def from_signs(cls, signs) -> "SignPlane":
        arr = np.asarray(signs)
        if arr.ndim != 2:
            raise ValidationError(f"SignPlane: expected 2-D signs, got shape {arr.shape}")
        if not np.isin(arr, (-1, 1)).all():
            raise ValidationError("SignPlane: entries must be exactly -1 or +1")
        bits = (arr > 0).astype(np.uint8)
        return cls(rows=arr.shape[0], cols=arr.shape[1], data=pack_bits(bits))

    def signs(self) -> np.ndarray:
        """Unpack to an int8 array of -1/+1."""
        bits = unpack_bits(self.data, self.rows, self.cols)
        return (bits.astype(np.int8) * 2) - 1

    def __post_init__(self):
        if self.rows < 0 or self.cols < 0:
            raise ValidationError("SignPlane: negative shape")
        if len(self.data) != self.rows * row_bytes(self.cols):
            raise ValidationError("SignPlane: data length does not match shape")


@dataclass(frozen=True)
class BitMask:
    """A boolean matrix stored bit-packed (1 = member), rows byte-aligned."""

    rows: int
    cols: int
    data: bytes

    @classmethod
    def from_bools(cls, mask) -> "BitMask":
        arr = as_mask(mask, name="BitMask")
        if arr.ndim == 1:
            arr = arr[np.newaxis, :]
        if arr.ndim != 2:
            raise ValidationError(f"BitMask: expected 1-D or 2-D input, got shape {arr.shape}")
        return cls(rows=arr.shape[0], cols=arr.shape[1], data=pack_bits(arr.astype(np.uint8)))

    def bools(self) -> np.ndarray:
        """Unpack to a boolean array."""
        return unpack_bits(self.data, self.rows, self.cols).astype(bool)

    def count(self) -> int:
        return int(self.bools().sum())

    def __post_init__(self):
        if self.rows < 0 or self.cols < 0:
            raise ValidationError("BitMask: negative shape")
        if len(self.data) != self.rows * row_bytes(self.cols):
            raise ValidationError("BitMask: data length does not match shape")


def masked_count(mask: np.ndarray) -> np.ndarray:
    """Per-row count of masked entries, as float64."""
    return np.asarray(mask, dtype=bool).sum(axis=1).astype(np.float64)


def masked_row_sum(values: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Per-row sum of ``values`` over masked entries."""
    return np.where(mask, values, 0.0).sum(axis=1)


def masked_row_mean(values: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Per-row mean of ``values`` over masked entries.

    Rows with an empty mask yield 0 (the divisor is clamped to 1), which keeps
    empty groups inert instead of producing NaN.
    """
    cnt = np.maximum(masked_count(mask), 1.0)
    return masked_row_sum(values, mask) / cnt
