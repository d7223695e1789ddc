"""Adam and LAMB with linear warmup/decay, 8-bit state, and tiered storage.

All moment math runs in 32-bit: when the state is stored 8-bit it is
unpacked, updated, and repacked each step, so the drift per step is bounded
by the codec's half-scale error. The second moment is quantized through its
square root (a signed symmetric codebook wastes half its range on a
non-negative quantity otherwise) and squared again on unpack, which also
keeps it non-negative by construction.

A parameter vector may carry a named-layer partition; LAMB computes its
trust ratio per layer. With no partition the whole vector is one layer.

Checkpoint file: magic "TOPT", a fixed config block, then the weight, m and
v buffers as codec chunks, each length-prefixed (u32, little-endian).
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, replace

import numpy as np

from . import codec
from .codec import QuantizedChunk, TensorBuf
from .errors import (
    ConfigError,
    MalformedChunk,
    NonFiniteGradient,
    ShapeMismatch,
    StepOutOfRange,
)


class Algorithm(enum.IntEnum):
    ADAM = 0
    LAMB = 1


class Tier(enum.IntEnum):
    COMPUTE = 0
    OFFLOADED = 1


@dataclass(frozen=True)
class ScheduleConfig:
    """Linear warmup to peak_lr, then linear decay to end_lr."""

    total_steps: int = 31250
    warmup_fraction: float = 0.1
    peak_lr: float = 2.5e-3
    end_lr: float = 0.0

    def __post_init__(self):
        if self.total_steps < 1:
            raise ConfigError("total_steps must be >= 1")
        if not 0.0 <= self.warmup_fraction <= 1.0:
            raise ConfigError("warmup_fraction must be in [0, 1]")
        if self.peak_lr <= 0:
            raise ConfigError("peak_lr must be > 0")

    @property
    def warmup_steps(self) -> int:
        return round(self.warmup_fraction * self.total_steps)


def lr_at(step: int, s: ScheduleConfig) -> float:
    """Learning rate at a step; piecewise linear, peak hit exactly at warmup end."""
    if not 0 <= step <= s.total_steps:
        raise StepOutOfRange(f"step {step} outside [0, {s.total_steps}]")
    w = s.warmup_steps
    if step < w:
        return s.peak_lr * (step / w)
    if step == w:
        return s.peak_lr
    t = (step - w) / (s.total_steps - w)
    return s.peak_lr * (1.0 - t) + s.end_lr * t


@dataclass(frozen=True)
class OptimConfig:
    algorithm: Algorithm = Algorithm.ADAM
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.0
    trust_clip: tuple[float, float] = (0.0, 10.0)
    state_bits: int = 32
    state_tier: Tier = Tier.COMPUTE
    block_size: int = 4096

    def __post_init__(self):
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError("betas must be in [0, 1)")
        if self.epsilon <= 0:
            raise ConfigError("epsilon must be > 0")
        if self.trust_clip[0] > self.trust_clip[1]:
            raise ConfigError("trust_clip min must be <= max")
        if self.state_bits not in (32, 8):
            raise ConfigError("state_bits must be 32 or 8")

    @classmethod
    def adam(cls, **kw) -> "OptimConfig":
        return cls(algorithm=Algorithm.ADAM, **kw)

    @classmethod
    def lamb(cls, **kw) -> "OptimConfig":
        kw.setdefault("beta2", 0.95)
        return cls(algorithm=Algorithm.LAMB, **kw)


@dataclass(frozen=True)
class OptimState:
    """Moment buffers (fp32 or packed Q8 chunks), step counter, storage tier."""

    m: TensorBuf | QuantizedChunk
    v: TensorBuf | QuantizedChunk
    step: int = 0
    tier: Tier = Tier.COMPUTE
    transfer_bytes_accumulated: int = 0

    @property
    def packed(self) -> bool:
        return isinstance(self.m, QuantizedChunk)

    @property
    def num_elements(self) -> int:
        return self.m.num_elements


def init_state(num_params: int, cfg: OptimConfig) -> OptimState:
    zeros = TensorBuf(np.zeros(num_params, np.float32))
    st = OptimState(m=zeros, v=zeros, step=0, tier=cfg.state_tier)
    return pack_state(st, cfg.state_bits, cfg.block_size)


def pack_state(st: OptimState, state_bits: int, block_size: int = 4096) -> OptimState:
    """Encode moments per state_bits. 8-bit packs m directly and v via sqrt."""
    if state_bits == 32:
        return unpack_state(st)
    if state_bits != 8:
        raise ConfigError("state_bits must be 32 or 8")
    if st.packed:
        return st
    m, v = st.m, st.v
    v_root = TensorBuf(np.sqrt(np.maximum(v.data, np.float32(0.0))))
    return replace(
        st,
        m=codec.quantize_q8(m, block_size),
        v=codec.quantize_q8(v_root, block_size),
    )


def unpack_state(st: OptimState) -> OptimState:
    """Decode moments to fp32 buffers; v is squared back and thus >= 0."""
    if not st.packed:
        return st
    m = codec.dequantize_q8(st.m)
    v_root = codec.dequantize_q8(st.v).data
    return replace(st, m=m, v=TensorBuf(v_root * v_root))


def state_nbytes(st: OptimState) -> int:
    """Raw bytes the two moment buffers occupy in their current encoding."""
    def one(buf):
        if isinstance(buf, QuantizedChunk):
            return len(buf.payload) + 4 * buf.scales.size
        return 4 * buf.num_elements
    return one(st.m) + one(st.v)


def tier_transfer(st: OptimState, target: Tier) -> OptimState:
    """Move state between storage tiers; values unchanged, bytes accounted."""
    return replace(
        st,
        tier=target,
        transfer_bytes_accumulated=st.transfer_bytes_accumulated + state_nbytes(st),
    )


DEFAULT_LAYERS = None  # whole vector as a single layer


def _check_inputs(w: TensorBuf, g: TensorBuf, st: OptimState):
    if w.num_elements != g.num_elements:
        raise ShapeMismatch(
            f"weights have {w.num_elements} elements, gradient {g.num_elements}"
        )
    if st.num_elements != w.num_elements:
        raise ShapeMismatch(
            f"optimizer state sized {st.num_elements}, weights {w.num_elements}"
        )
    if g.data.size and not np.isfinite(g.data).all():
        raise NonFiniteGradient("gradient contains NaN or Inf")


def _moments(g: np.ndarray, st: OptimState, cfg: OptimConfig):
    """Shared first/second moment recurrence with bias correction, fp32."""
    b1, b2 = np.float32(cfg.beta1), np.float32(cfg.beta2)
    one = np.float32(1.0)
    m = b1 * st.m.data + (one - b1) * g
    v = b2 * st.v.data + (one - b2) * (g * g)
    step = st.step + 1
    mhat = m / (one - b1 ** np.float32(step)) if cfg.beta1 > 0 else m
    vhat = v / (one - b2 ** np.float32(step)) if cfg.beta2 > 0 else v
    return m, v, mhat, vhat, step


def adam_step(
    w: TensorBuf, g: TensorBuf, st: OptimState, cfg: OptimConfig, lr: float
) -> tuple[TensorBuf, OptimState]:
    """One Adam step with decoupled weight decay."""
    _check_inputs(w, g, st)
    work = unpack_state(st)
    m, v, mhat, vhat, step = _moments(g.data, work, cfg)
    lr32 = np.float32(lr)
    update = lr32 * (mhat / (np.sqrt(vhat) + np.float32(cfg.epsilon)))
    new_w = w.data - update - lr32 * np.float32(cfg.weight_decay) * w.data
    out = replace(work, m=TensorBuf(m), v=TensorBuf(v), step=step)
    return TensorBuf(new_w, w.shape), pack_state(out, cfg.state_bits, cfg.block_size)


def trust_ratio(w_norm: float, r_norm: float, clip: tuple[float, float]) -> float:
    """LAMB layer ratio ||w||/||r||, clamped; 1 when either norm is zero."""
    if w_norm == 0.0 or r_norm == 0.0:
        return 1.0
    return float(min(max(w_norm / r_norm, clip[0]), clip[1]))


def lamb_step(
    w: TensorBuf,
    g: TensorBuf,
    st: OptimState,
    cfg: OptimConfig,
    lr: float,
    layers=DEFAULT_LAYERS,
) -> tuple[TensorBuf, OptimState]:
    """One LAMB step: Adam direction rescaled per layer by the trust ratio.

    ``layers`` is a sequence of (name, start, stop) half-open slices covering
    the parameter vector; None treats the whole vector as one layer.
    """
    _check_inputs(w, g, st)
    work = unpack_state(st)
    m, v, mhat, vhat, step = _moments(g.data, work, cfg)
    r = mhat / (np.sqrt(vhat) + np.float32(cfg.epsilon)) + np.float32(
        cfg.weight_decay
    ) * w.data
    new_w = w.data.copy()
    lr32 = np.float32(lr)
    if layers is None:
        layers = (("all", 0, w.num_elements),)
    for _name, start, stop in layers:
        wl, rl = w.data[start:stop], r[start:stop]
        ratio = trust_ratio(
            float(np.linalg.norm(wl)), float(np.linalg.norm(rl)), cfg.trust_clip
        )
        new_w[start:stop] = wl - lr32 * np.float32(ratio) * rl
    out = replace(work, m=TensorBuf(m), v=TensorBuf(v), step=step)
    return TensorBuf(new_w, w.shape), pack_state(out, cfg.state_bits, cfg.block_size)


def optimizer_step(
    w: TensorBuf,
    g: TensorBuf,
    st: OptimState,
    cfg: OptimConfig,
    lr: float,
    layers=DEFAULT_LAYERS,
) -> tuple[TensorBuf, OptimState]:
    if cfg.algorithm == Algorithm.LAMB:
        return lamb_step(w, g, st, cfg, lr, layers)
    return adam_step(w, g, st, cfg, lr)


# --- checkpoint io ---------------------------------------------------------

CKPT_MAGIC = b"TOPT"
_CKPT_HEAD = struct.Struct("<4sHBBQB3x6dQ")


def _write_chunk(parts: list, chunk: QuantizedChunk):
    raw = codec.chunk_to_bytes(chunk)
    parts.append(struct.pack("<I", len(raw)))
    parts.append(raw)


def _read_chunk(buf: bytes, off: int):
    (length,) = struct.unpack_from("<I", buf, off)
    off += 4
    return codec.chunk_from_bytes(buf[off : off + length]), off + length


def save_checkpoint(path, cfg: OptimConfig, st: OptimState, w: TensorBuf):
    """Write optimizer config, step, weights and moments so a run can resume."""
    packed = pack_state(st, cfg.state_bits, cfg.block_size)
    parts = [
        _CKPT_HEAD.pack(
            CKPT_MAGIC, 1, int(cfg.algorithm), cfg.state_bits, packed.step,
            int(packed.tier), cfg.beta1, cfg.beta2, cfg.epsilon, cfg.weight_decay,
            cfg.trust_clip[0], cfg.trust_clip[1], packed.transfer_bytes_accumulated,
        )
    ]
    _write_chunk(parts, codec.encode_f32(w))
    if cfg.state_bits == 8:
        _write_chunk(parts, packed.m)
        _write_chunk(parts, packed.v)
    else:
        _write_chunk(parts, codec.encode_f32(packed.m))
        _write_chunk(parts, codec.encode_f32(packed.v))
    with open(path, "wb") as f:
        f.write(b"".join(parts))


def load_checkpoint(path) -> tuple[OptimConfig, OptimState, TensorBuf]:
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:4] != CKPT_MAGIC:
        raise MalformedChunk("not an optimizer checkpoint (bad magic)")
    (_, version, algo, bits, step, tier, b1, b2, eps, wd, tmin, tmax, xfer
     ) = _CKPT_HEAD.unpack_from(buf)
    if version != 1:
        raise MalformedChunk(f"unsupported checkpoint version {version}")
    cfg = OptimConfig(
        algorithm=Algorithm(algo), beta1=b1, beta2=b2, epsilon=eps,
        weight_decay=wd, trust_clip=(tmin, tmax), state_bits=bits,
        state_tier=Tier(tier),
    )
    off = _CKPT_HEAD.size
    w_chunk, off = _read_chunk(buf, off)
    m_chunk, off = _read_chunk(buf, off)
    v_chunk, off = _read_chunk(buf, off)
    w = codec.decode_f32(w_chunk)
    if bits == 8:
        st = OptimState(m=m_chunk, v=v_chunk, step=step, tier=Tier(tier),
                        transfer_bytes_accumulated=xfer)
    else:
        st = OptimState(m=codec.decode_f32(m_chunk), v=codec.decode_f32(v_chunk),
                        step=step, tier=Tier(tier), transfer_bytes_accumulated=xfer)
    return cfg, st, w
