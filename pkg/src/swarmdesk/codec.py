"""Lossy tensor compression for network exchange and optimizer-state storage.

Two working schemes plus a raw passthrough:

* ``Q8_BLOCKWISE`` — blockwise absmax linear quantization. A tensor is cut
  into fixed-size blocks; each block stores one fp32 scale (absmax / 127)
  and one signed byte per element. Worst-case reconstruction error is half
  a scale per element. Blocks whose absmax is zero store scale 0 and decode
  to exact zeros.
* ``F16`` — IEEE binary16 with round-to-nearest-even. Values above the
  largest finite half-precision magnitude (65504) are rejected outright
  rather than saturated.
* ``F32_RAW`` — lossless passthrough, used for parameter/state sync and for
  equivalence testing against single-node training.

Scheme selection is a pure threshold on element count: large tensors go
8-bit, everything else 16-bit. All rounding is round-half-to-even so that
encoded bytes are identical across runs and platforms.

Wire layout (little-endian), the unit carried inside protocol messages:

    magic "TQC1" | scheme u8 | reserved u8*3 | num_elements u64 |
    block_size u32 | scale_count u32 | scales f32*scale_count | payload

Payload is ``num_elements`` bytes for Q8, ``2*num_elements`` for F16 and
``4*num_elements`` for F32_RAW.
"""

from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import MalformedChunk, NonFiniteInput, OverflowToInfinity

MAGIC = b"TQC1"
HEADER_BYTES = 24  # magic(4) + scheme(1) + reserved(3) + n(8) + block(4) + count(4)
F16_MAX = 65504.0
_HEADER = struct.Struct("<4sB3xQII")


class Scheme(enum.IntEnum):
    F32_RAW = 0
    Q8_BLOCKWISE = 1
    F16 = 2


@dataclass(frozen=True)
class TensorBuf:
    """Flat fp32 vector with shape metadata; the unit all tensors travel as."""

    data: np.ndarray
    shape: tuple[int, ...] = ()

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float32).reshape(-1)
        object.__setattr__(self, "data", arr)
        shape = tuple(int(d) for d in self.shape) if self.shape else (arr.size,)
        object.__setattr__(self, "shape", shape)
        if math.prod(shape) != arr.size:
            raise MalformedChunk(
                f"shape {shape} implies {math.prod(shape)} elements, buffer has {arr.size}"
            )

    @classmethod
    def from_array(cls, arr) -> "TensorBuf":
        a = np.asarray(arr, dtype=np.float32)
        return cls(a.reshape(-1), a.shape if a.ndim else (1,))

    def to_array(self) -> np.ndarray:
        return self.data.reshape(self.shape)

    @property
    def num_elements(self) -> int:
        return self.data.size

    def require_finite(self) -> "TensorBuf":
        if self.data.size and not np.isfinite(self.data).all():
            raise NonFiniteInput("tensor contains NaN or Inf")
        return self


@dataclass(frozen=True)
class QuantizedChunk:
    """Encoded tensor: scheme tag, per-block scales (Q8 only) and payload bytes."""

    scheme: Scheme
    num_elements: int
    block_size: int
    scales: np.ndarray
    payload: bytes

    def validate(self) -> "QuantizedChunk":
        n = self.num_elements
        if n < 0:
            raise MalformedChunk("negative element count")
        if self.scheme == Scheme.Q8_BLOCKWISE:
            if self.block_size < 1:
                raise MalformedChunk("Q8 chunk needs block_size >= 1")
            want_scales = -(-n // self.block_size)
            if self.scales.size != want_scales:
                raise MalformedChunk(
                    f"expected {want_scales} scales, got {self.scales.size}"
                )
            if len(self.payload) != n:
                raise MalformedChunk(
                    f"Q8 payload must be {n} bytes, got {len(self.payload)}"
                )
            if self.scales.size and not (np.isfinite(self.scales).all() and (self.scales >= 0).all()):
                raise MalformedChunk("scales must be finite and non-negative")
        elif self.scheme == Scheme.F16:
            if self.scales.size:
                raise MalformedChunk("F16 chunk carries no scales")
            if len(self.payload) != 2 * n:
                raise MalformedChunk(
                    f"F16 payload must be {2 * n} bytes, got {len(self.payload)}"
                )
        elif self.scheme == Scheme.F32_RAW:
            if self.scales.size:
                raise MalformedChunk("F32 chunk carries no scales")
            if len(self.payload) != 4 * n:
                raise MalformedChunk(
                    f"F32 payload must be {4 * n} bytes, got {len(self.payload)}"
                )
        else:
            raise MalformedChunk(f"unknown scheme {self.scheme!r}")
        return self


@dataclass(frozen=True)
class CodecPolicy:
    """Scheme-selection policy: tensors with >= q8_threshold elements go 8-bit.

    ``lossless=True`` bypasses compression entirely (F32_RAW), which is what
    parameter sync and the synchronous-equivalence tests use.
    """

    q8_threshold: int = 65536
    block_size: int = 4096
    lossless: bool = False

    def __post_init__(self):
        if self.q8_threshold < 1:
            raise MalformedChunk("q8_threshold must be >= 1")
        if self.block_size < 1:
            raise MalformedChunk("block_size must be >= 1")


def select_scheme(n: int, policy: CodecPolicy = CodecPolicy()) -> Scheme:
    """Pick the wire scheme for an n-element tensor (pure threshold, monotone)."""
    if n < 0:
        raise MalformedChunk("element count must be >= 0")
    if policy.lossless:
        return Scheme.F32_RAW
    return Scheme.Q8_BLOCKWISE if n >= policy.q8_threshold else Scheme.F16


def _blocked(data: np.ndarray, block_size: int) -> np.ndarray:
    """Zero-pad to a whole number of blocks and reshape to (n_blocks, block_size)."""
    n = data.size
    n_blocks = -(-n // block_size) if n else 0
    padded = np.zeros(n_blocks * block_size, dtype=data.dtype)
    padded[:n] = data
    return padded.reshape(n_blocks, block_size)


def quantize_q8(t: TensorBuf, block_size: int = 4096) -> QuantizedChunk:
    """Blockwise absmax quantization to signed bytes.

    Per block: scale = absmax/127 (fp32), code = round-half-to-even(x/scale)
    clamped to [-127, 127]. The division runs in float64 against the stored
    fp32 scale so codes are reproducible bit-for-bit everywhere.
    """
    if block_size < 1:
        raise MalformedChunk("block_size must be >= 1")
    t.require_finite()
    blocks = _blocked(t.data, block_size)
    absmax = np.max(np.abs(blocks), axis=1) if blocks.size else np.zeros(0, np.float32)
    scales = (absmax / np.float32(127)).astype(np.float32)
    with np.errstate(divide="ignore", invalid="ignore"):
        q = np.rint(blocks.astype(np.float64) / scales[:, None].astype(np.float64))
    q[scales == 0] = 0.0
    codes = np.clip(q, -127, 127).astype(np.int8)
    payload = codes.reshape(-1)[: t.num_elements].tobytes()
    return QuantizedChunk(
        Scheme.Q8_BLOCKWISE, t.num_elements, block_size, scales, payload
    ).validate()


def dequantize_q8(c: QuantizedChunk) -> TensorBuf:
    """Decode a Q8 chunk: x_i = code_i * scale of its block."""
    if c.scheme != Scheme.Q8_BLOCKWISE:
        raise MalformedChunk(f"dequantize_q8 got scheme {c.scheme!r}")
    c.validate()
    codes = np.frombuffer(c.payload, dtype=np.int8)
    blocks = _blocked(codes.astype(np.float32), c.block_size)
    values = blocks * c.scales[:, None].astype(np.float32)
    return TensorBuf(values.reshape(-1)[: c.num_elements])


def encode_f16(t: TensorBuf) -> QuantizedChunk:
    """Encode as IEEE binary16 (round-to-nearest-even); rejects |x| > 65504."""
    t.require_finite()
    if t.data.size and np.abs(t.data).max() > F16_MAX:
        raise OverflowToInfinity(f"|x| exceeds binary16 max finite {F16_MAX}")
    payload = t.data.astype("<f2").tobytes()
    return QuantizedChunk(
        Scheme.F16, t.num_elements, 0, np.zeros(0, np.float32), payload
    ).validate()


def decode_f16(c: QuantizedChunk) -> TensorBuf:
    if c.scheme != Scheme.F16:
        raise MalformedChunk(f"decode_f16 got scheme {c.scheme!r}")
    c.validate()
    return TensorBuf(np.frombuffer(c.payload, dtype="<f2").astype(np.float32))


def encode_f32(t: TensorBuf) -> QuantizedChunk:
    """Lossless passthrough; NaN/Inf are still rejected at the boundary."""
    t.require_finite()
    return QuantizedChunk(
        Scheme.F32_RAW, t.num_elements, 0, np.zeros(0, np.float32),
        t.data.astype("<f4").tobytes(),
    ).validate()


def decode_f32(c: QuantizedChunk) -> TensorBuf:
    if c.scheme != Scheme.F32_RAW:
        raise MalformedChunk(f"decode_f32 got scheme {c.scheme!r}")
    c.validate()
    return TensorBuf(np.frombuffer(c.payload, dtype="<f4").astype(np.float32))


def encode(t: TensorBuf, policy: CodecPolicy = CodecPolicy()) -> QuantizedChunk:
    """Encode under the policy's scheme selection."""
    scheme = select_scheme(t.num_elements, policy)
    if scheme == Scheme.Q8_BLOCKWISE:
        return quantize_q8(t, policy.block_size)
    if scheme == Scheme.F16:
        return encode_f16(t)
    return encode_f32(t)


def decode(c: QuantizedChunk) -> TensorBuf:
    if c.scheme == Scheme.Q8_BLOCKWISE:
        return dequantize_q8(c)
    if c.scheme == Scheme.F16:
        return decode_f16(c)
    if c.scheme == Scheme.F32_RAW:
        return decode_f32(c)
    raise MalformedChunk(f"unknown scheme {c.scheme!r}")


def encoded_size(scheme: Scheme, n: int, block_size: int = 4096) -> int:
    """Wire size in bytes of an n-element chunk, header included."""
    if n < 0:
        raise MalformedChunk("element count must be >= 0")
    if scheme == Scheme.Q8_BLOCKWISE:
        return HEADER_BYTES + n + 4 * (-(-n // block_size))
    if scheme == Scheme.F16:
        return HEADER_BYTES + 2 * n
    if scheme == Scheme.F32_RAW:
        return HEADER_BYTES + 4 * n
    raise MalformedChunk(f"unknown scheme {scheme!r}")


def chunk_to_bytes(c: QuantizedChunk) -> bytes:
    c.validate()
    head = _HEADER.pack(MAGIC, int(c.scheme), c.num_elements, c.block_size, c.scales.size)
    return head + c.scales.astype("<f4").tobytes() + c.payload


def chunk_from_bytes(raw: bytes) -> QuantizedChunk:
    if len(raw) < HEADER_BYTES:
        raise MalformedChunk(f"chunk shorter than header: {len(raw)} bytes")
    magic, scheme_b, n, block_size, scale_count = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise MalformedChunk(f"bad magic {magic!r}")
    try:
        scheme = Scheme(scheme_b)
    except ValueError:
        raise MalformedChunk(f"unknown scheme byte {scheme_b}") from None
    off = HEADER_BYTES + 4 * scale_count
    if len(raw) < off:
        raise MalformedChunk("truncated scales")
    scales = np.frombuffer(raw[HEADER_BYTES:off], dtype="<f4").astype(np.float32)
    return QuantizedChunk(scheme, n, block_size, scales, raw[off:]).validate()


def roundtrip_error_bound(c: QuantizedChunk) -> np.ndarray:
    """Per-element worst-case |x - decode(x)| implied by a Q8 chunk's scales."""
    if c.scheme != Scheme.Q8_BLOCKWISE:
        raise MalformedChunk("error bound is defined for Q8 chunks")
    per_block = c.scales.astype(np.float64) / 2.0
    return np.repeat(per_block, c.block_size)[: c.num_elements]
