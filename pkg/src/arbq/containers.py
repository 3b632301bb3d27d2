"""Binary container formats for tensors and quantized layers.

Two little-endian formats, both headed by a 4-byte magic:

``ARBT`` tensor files::

    "ARBT" | version u16 | dtype u8 (0 = float32) | rank u8
    | dims: rank x u64 | payload row-major

Rank 2 holds a weight matrix, rank 3 a stack of calibration batches.

``ARBQ`` quantized-layer files::

    "ARBQ" | version u16 | method u8 | order u8 | cgb u8
    | n, m, block_k, salient_count: u64 x 4
    | bit budget echo: plane/bitmap/scale/extra bits, weight count: u64 x 5
    | salient column mask, packed        ceil(m/8) bytes
    | group bitmap, packed row-aligned   n * ceil(m/8) bytes
    | sign plane 1, packed row-aligned   n * ceil(m/8) bytes
    | sign plane 2 over salient columns  n * ceil(s/8) bytes (order 2, s > 0)
    | scale payload: float32 arrays per (block, zone) in canonical order
    | crc32 over everything after the magic, u32

Scale layout per (block, zone): the mean-carrying methods store per-row
arrays (alpha, then alpha2 for second-order salient zones, then mu); the
row-column method stores per-row alpha_r per plane followed by alpha_c for
the zone's own columns in that block. Every value is float32, so encoding a
layer whose parameters were already rounded to float32 is lossless and
decode -> encode is byte-identical.
"""

from __future__ import annotations

import os
import struct
import zlib

import numpy as np

from .binarize import FirstOrderQuant, SecondOrderQuant
from .errors import (
    BadMagicError,
    ChecksumError,
    DataFormatError,
    TruncatedFileError,
    UnknownDtypeError,
    UnsupportedVersionError,
    ValidationError,
)
from .partition import BitBudget, PartitionMaps
from .pipeline import ZONES_CGB, ZONES_UNDIVIDED, QuantizedLayer
from .planes import BitMask, SignPlane, pack_bits, row_bytes, unpack_bits
from .rowcol import RowColQuant, RowColQuant2

__all__ = [
    "TENSOR_MAGIC",
    "QUANT_MAGIC",
    "FORMAT_VERSION",
    "METHOD_TAGS",
    "write_tensor",
    "read_tensor",
    "encode_tensor",
    "decode_tensor",
    "write_quant",
    "read_quant",
    "encode_quant",
    "decode_quant",
    "inspect_header",
]

TENSOR_MAGIC = b"ARBT"
QUANT_MAGIC = b"ARBQ"
FORMAT_VERSION = 1
DTYPE_F32 = 0

METHOD_TAGS = {"arb": 0, "arb-x": 1, "arb-rc": 2, "baseline-t0": 3}
_TAG_METHODS = {v: k for k, v in METHOD_TAGS.items()}


class _Cursor:
    """Sequential reader that turns short reads into TruncatedFileError."""

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, count: int) -> bytes:
        if self.pos + count > len(self.data):
            raise TruncatedFileError(
                f"need {count} bytes at offset {self.pos}, "
                f"file has {len(self.data) - self.pos} left"
            )
        out = self.data[self.pos : self.pos + count]
        self.pos += count
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def done(self) -> None:
        if self.pos != len(self.data):
            raise DataFormatError(
                f"{len(self.data) - self.pos} unexpected trailing bytes"
            )


def encode_tensor(array) -> bytes:
    """Serialize a rank-2 matrix or rank-3 batch stack as float32."""
    arr = np.asarray(array, dtype=np.float64)
    if arr.ndim not in (2, 3):
        raise ValidationError(f"encode_tensor: rank must be 2 or 3, got {arr.ndim}")
    if not np.isfinite(arr).all():
        raise ValidationError("encode_tensor: non-finite entries")
    head = struct.pack("<4sHBB", TENSOR_MAGIC, FORMAT_VERSION, DTYPE_F32, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}Q", *arr.shape)
    payload = arr.astype("<f4").tobytes(order="C")
    return head + dims + payload


def decode_tensor(data: bytes) -> np.ndarray:
    """Parse an ARBT byte string; returns float64 with the stored shape."""
    cur = _Cursor(data)
    magic, version, dtype, rank = cur.unpack("<4sHBB")
    if magic != TENSOR_MAGIC:
        raise BadMagicError(f"expected {TENSOR_MAGIC!r}, found {magic!r}")
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"tensor format version {version} not supported")
    if dtype != DTYPE_F32:
        raise UnknownDtypeError(f"unknown dtype tag {dtype}")
    if rank not in (2, 3):
        raise DataFormatError(f"rank must be 2 or 3, got {rank}")
    dims = cur.unpack(f"<{rank}Q")
    count = 1
    for d in dims:
        count *= d
    payload = cur.take(4 * count)
    cur.done()
    arr = np.frombuffer(payload, dtype="<f4").reshape(dims)
    return arr.astype(np.float64)


def write_tensor(path, array) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_tensor(array))


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_tensor(fh.read())


def _zone_list(cgb: bool, salient_count: int) -> list[str]:
    names = ZONES_CGB if cgb else ZONES_UNDIVIDED
    if salient_count == 0:
        names = [z for z in names if not z.startswith("salient")]
    return list(names)


def _f32_bytes(arr: np.ndarray) -> bytes:
    out = np.asarray(arr, dtype="<f4")
    if not np.isfinite(out).all():
        raise ValidationError("scale array has non-finite entries")
    return out.tobytes()


def encode_quant(layer: QuantizedLayer) -> bytes:
    """Serialize a quantized layer; see the module docstring for the layout."""
    n, m = layer.n, layer.m
    maps = layer.maps
    salient_count = int(maps.salient_cols.sum())
    order = layer.order
    zone_names = _zone_list(layer.cgb, salient_count)
    sal_all = np.flatnonzero(maps.salient_cols)

    plane1 = np.ones((n, m), dtype=np.int8)
    plane2 = np.ones((n, salient_count), dtype=np.int8) if order == 2 else None
    body = bytearray()
    body += struct.pack(
        "<HBBB", FORMAT_VERSION, METHOD_TAGS[layer.method], order, int(layer.cgb)
    )
    body += struct.pack("<4Q", n, m, layer.block_k, salient_count)
    b = layer.budget
    body += struct.pack(
        "<5Q", b.plane_bits, b.bitmap_bits, b.scale_bits, b.extra_bits, b.weight_count
    )
    body += pack_bits(maps.salient_cols[None, :].astype(np.uint8))
    body += pack_bits(maps.group.astype(np.uint8))

    scale_payload = bytearray()
    for cols, zones in zip(layer.block_slices(), layer.blocks):
        stored = dict(zones)
        sal_b = maps.salient_cols[cols]
        sal_local = np.flatnonzero(sal_b)
        ns_local = np.flatnonzero(~sal_b)
        # positions of this block's salient columns within the layer-wide
        # salient ordering
        sal_global = np.searchsorted(sal_all, np.arange(cols.start, cols.stop)[sal_local])
        for zone in zone_names:
            if zone not in stored:
                raise ValidationError(f"encode_quant: block missing zone {zone!r}")
            quant = stored[zone]
            mask = quant.mask.bools()
            scope_local = sal_local if zone.startswith("salient") else ns_local
            if isinstance(quant, FirstOrderQuant):
                s = quant.plane.signs()
                np.copyto(plane1[:, cols], s, where=mask)
                scale_payload += _f32_bytes(quant.alpha)
                scale_payload += _f32_bytes(quant.mu)
            elif isinstance(quant, SecondOrderQuant):
                np.copyto(plane1[:, cols], quant.plane1.signs(), where=mask)
                sub = plane2[:, sal_global]
                np.copyto(sub, quant.plane2.signs()[:, sal_local], where=mask[:, sal_local])
                plane2[:, sal_global] = sub
                scale_payload += _f32_bytes(quant.alpha1)
                scale_payload += _f32_bytes(quant.alpha2)
                scale_payload += _f32_bytes(quant.mu)
            elif isinstance(quant, RowColQuant):
                np.copyto(plane1[:, cols], quant.plane.signs(), where=mask)
                scale_payload += _f32_bytes(quant.alpha_r)
                scale_payload += _f32_bytes(quant.alpha_c[scope_local])
            elif isinstance(quant, RowColQuant2):
                np.copyto(plane1[:, cols], quant.plane1.signs(), where=mask)
                sub = plane2[:, sal_global]
                np.copyto(sub, quant.plane2.signs()[:, sal_local], where=mask[:, sal_local])
                plane2[:, sal_global] = sub
                scale_payload += _f32_bytes(quant.alpha_r1)
                scale_payload += _f32_bytes(quant.alpha_r2)
                scale_payload += _f32_bytes(quant.alpha_c1[scope_local])
                scale_payload += _f32_bytes(quant.alpha_c2[scope_local])
            else:
                raise ValidationError(
                    f"encode_quant: unsupported quant type {type(quant).__name__}"
                )

    body += pack_bits((plane1 > 0).astype(np.uint8))
    if order == 2 and salient_count > 0:
        body += pack_bits((plane2 > 0).astype(np.uint8))
    body += scale_payload
    crc = zlib.crc32(bytes(body)) & 0xFFFFFFFF
    return QUANT_MAGIC + bytes(body) + struct.pack("<I", crc)


def decode_quant(data: bytes, name: str = "layer") -> QuantizedLayer:
    """Parse an ARBQ byte string back into a QuantizedLayer."""
    cur = _Cursor(data)
    (magic,) = cur.unpack("<4s")
    if magic != QUANT_MAGIC:
        raise BadMagicError(f"expected {QUANT_MAGIC!r}, found {magic!r}")
    version, method_tag, order, cgb_flag = cur.unpack("<HBBB")
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"quant format version {version} not supported")
    if method_tag not in _TAG_METHODS:
        raise DataFormatError(f"unknown method tag {method_tag}")
    if order not in (1, 2):
        raise DataFormatError(f"order must be 1 or 2, got {order}")
    method = _TAG_METHODS[method_tag]
    cgb = bool(cgb_flag)
    n, m, block_k, salient_count = cur.unpack("<4Q")
    if block_k <= 0:
        raise DataFormatError(f"bad block size {block_k}")
    budget = BitBudget(*cur.unpack("<5Q"))

    stored_crc = struct.unpack("<I", data[-4:])[0]
    actual_crc = zlib.crc32(data[4:-4]) & 0xFFFFFFFF
    if stored_crc != actual_crc:
        raise ChecksumError(
            f"checksum mismatch: stored {stored_crc:#010x}, computed {actual_crc:#010x}"
        )

    sal_bits = unpack_bits(cur.take(row_bytes(m)), 1, m)[0].astype(bool)
    if int(sal_bits.sum()) != salient_count:
        raise DataFormatError(
            f"salient mask has {int(sal_bits.sum())} columns, header says {salient_count}"
        )
    group = unpack_bits(cur.take(n * row_bytes(m)), n, m).astype(bool)
    plane1 = unpack_bits(cur.take(n * row_bytes(m)), n, m).astype(np.int8) * 2 - 1
    if order == 2 and salient_count > 0:
        raw2 = cur.take(n * row_bytes(salient_count))
        plane2 = unpack_bits(raw2, n, salient_count).astype(np.int8) * 2 - 1
    else:
        plane2 = None

    maps = PartitionMaps(salient_cols=sal_bits, group=group)
    zone_masks = maps.zones_cgb() if cgb else maps.zones_undivided_salient()
    zone_names = _zone_list(cgb, salient_count)
    family = "arb" if method == "baseline-t0" else method
    sal_all = np.flatnonzero(sal_bits)

    def read_f32(count: int) -> np.ndarray:
        return np.frombuffer(cur.take(4 * count), dtype="<f4").astype(np.float64)

    k = min(block_k, m)
    blocks = []
    for start in range(0, m, k):
        stop = min(start + k, m)
        cols = slice(start, stop)
        width = stop - start
        sal_b = sal_bits[cols]
        sal_local = np.flatnonzero(sal_b)
        ns_local = np.flatnonzero(~sal_b)
        sal_global = np.searchsorted(sal_all, np.arange(start, stop)[sal_local])
        zones = []
        for zone in zone_names:
            mask = zone_masks[zone][:, cols]
            mask_obj = BitMask.from_bools(mask)
            salient_zone = zone.startswith("salient")
            scope_local = sal_local if salient_zone else ns_local
            p1 = np.where(mask, plane1[:, cols], np.int8(1))
            if salient_zone and order == 2:
                sub = np.ones((n, width), dtype=np.int8)
                sub[:, sal_local] = plane2[:, sal_global]
                p2 = np.where(mask, sub, np.int8(1))
            else:
                p2 = None
            if family in ("arb", "arb-x"):
                if salient_zone and order == 2:
                    a1, a2, mu = read_f32(n), read_f32(n), read_f32(n)
                    quant = SecondOrderQuant(
                        alpha1=a1, alpha2=a2, mu=mu,
                        plane1=SignPlane.from_signs(p1),
                        plane2=SignPlane.from_signs(p2),
                        mask=mask_obj,
                    )
                else:
                    alpha, mu = read_f32(n), read_f32(n)
                    quant = FirstOrderQuant(
                        alpha=alpha, mu=mu,
                        plane=SignPlane.from_signs(p1), mask=mask_obj,
                    )
            else:
                if salient_zone and order == 2:
                    ar1, ar2 = read_f32(n), read_f32(n)
                    c1 = np.zeros(width)
                    c2 = np.zeros(width)
                    c1[scope_local] = read_f32(scope_local.size)
                    c2[scope_local] = read_f32(scope_local.size)
                    quant = RowColQuant2(
                        alpha_r1=ar1, alpha_c1=c1,
                        plane1=SignPlane.from_signs(p1),
                        alpha_r2=ar2, alpha_c2=c2,
                        plane2=SignPlane.from_signs(p2),
                        mask=mask_obj,
                    )
                else:
                    ar = read_f32(n)
                    ac = np.zeros(width)
                    ac[scope_local] = read_f32(scope_local.size)
                    quant = RowColQuant(
                        alpha_r=ar, alpha_c=ac,
                        plane=SignPlane.from_signs(p1), mask=mask_obj,
                    )
            zones.append((zone, quant))
        blocks.append(tuple(zones))

    cur.take(4)  # checksum, verified above
    cur.done()
    return QuantizedLayer(
        name=name,
        n=n,
        m=m,
        method=method,
        order=order,
        block_k=block_k,
        cgb=cgb,
        maps=maps,
        budget=budget,
        blocks=tuple(blocks),
    )


def write_quant(path, layer: QuantizedLayer) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_quant(layer))


def read_quant(path, name: str | None = None) -> QuantizedLayer:
    if name is None:
        name = os.path.splitext(os.path.basename(str(path)))[0]
    with open(path, "rb") as fh:
        return decode_quant(fh.read(), name=name)


def inspect_header(data: bytes) -> str:
    """Human-readable one-container summary, keyed off the magic."""
    if len(data) < 4:
        raise TruncatedFileError("file shorter than a magic number")
    magic = data[:4]
    cur = _Cursor(data)
    if magic == TENSOR_MAGIC:
        _, version, dtype, rank = cur.unpack("<4sHBB")
        dims = cur.unpack(f"<{rank}Q")
        dtype_name = {DTYPE_F32: "float32"}.get(dtype, f"unknown({dtype})")
        shape = "x".join(str(d) for d in dims)
        return (
            f"ARBT tensor: version {version}, dtype {dtype_name}, "
            f"rank {rank}, dims {shape}"
        )
    if magic == QUANT_MAGIC:
        _, version, method_tag, order, cgb_flag = cur.unpack("<4sHBBB")
        n, m, block_k, salient_count = cur.unpack("<4Q")
        budget = BitBudget(*cur.unpack("<5Q"))
        method = _TAG_METHODS.get(method_tag, f"unknown({method_tag})")
        return (
            f"ARBQ quantized layer: version {version}, method {method}, "
            f"order {order}, cgb {'on' if cgb_flag else 'off'}, shape {n}x{m}, "
            f"block {block_k}, salient columns {salient_count}, "
            f"avg plane bits {budget.avg_weight_bits:.4f}, "
            f"total {budget.total_bytes} bytes"
        )
    raise BadMagicError(f"unrecognized magic {magic!r}")
