"""
Absmax block quantization of weight tensors to int4 / int8.

For every block b of `block_size` consecutive elements (row-major, the
last block may be short):

    s_b    = max |x_i| over the block
    code_i = round(Qmax / s_b * x_i)      Qmax = 7 (int4) or 127 (int8)

with round-half-away-from-zero. A block whose absmax is 0 stores scale 0
and all-zero codes. Dequantization is x_hat_i = code_i * s_b / Qmax.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np

from autodiff import Tensor
from errors import InvalidBlockSize, NonFiniteInput, ShapeMismatch, ValidationError

logger = logging.getLogger(__name__)

QMAX = {4: 7, 8: 127}


def qmax_for(bits):
    if bits not in QMAX:
        raise ValidationError(f"bits must be 4 or 8, got {bits}")
    return QMAX[bits]


@dataclass(eq=False)
class QuantizedTensor:
    """int codes (one per element, int8 storage) plus one fp64 scale per block."""
    codes: np.ndarray
    scales: np.ndarray
    bits: int
    block_size: int
    shape: tuple

    @property
    def qmax(self):
        return qmax_for(self.bits)

    @property
    def size(self):
        return int(self.codes.size)

    def validate(self):
        qmax = self.qmax
        if self.codes.size != math.prod(self.shape):
            raise ShapeMismatch(f"{self.codes.size} codes do not fill shape {self.shape}")
        if self.scales.size != math.ceil(self.codes.size / self.block_size):
            raise ShapeMismatch(f"expected one scale per block of {self.block_size}, got {self.scales.size}")
        if np.abs(self.codes).max(initial=0) > qmax:
            raise ValidationError(f"codes exceed [-{qmax}, {qmax}]")
        if (self.scales < 0).any():
            raise ValidationError("scales must be non-negative")
        return self


def _round_half_away(values):
    return np.sign(values) * np.floor(np.abs(values) + 0.5)


def _blocks(flat, block_size):
    n_blocks = math.ceil(flat.size / block_size)
    padded = np.zeros(n_blocks * block_size, dtype=np.float64)
    padded[:flat.size] = flat
    return padded.reshape(n_blocks, block_size)


def quantize_absmax(x, bits=4, block_size=64):
    """
    Quantize a tensor (or ndarray) blockwise with absmax scaling.

    Args:
        x: Tensor or ndarray of finite values
        bits: 4 (codes in [-7, 7]) or 8 (codes in [-127, 127])
        block_size: Elements per scale; use >= x.size for one whole-tensor scale

    Returns:
        QuantizedTensor

    Example:
        >>> q = quantize_absmax(np.array([0.5, -1.0, 0.25]), bits=4, block_size=64)
        >>> q.codes.tolist(), q.scales.tolist()
        ([4, -7, 2], [1.0])
    """
    qmax = qmax_for(bits)
    if block_size <= 0:
        raise InvalidBlockSize(f"block_size must be positive, got {block_size}")
    data = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(data)):
        raise NonFiniteInput("cannot quantize non-finite values")
    flat = data.reshape(-1)
    blocks = _blocks(flat, block_size)
    scales = np.abs(blocks).max(axis=1)
    safe = np.where(scales > 0, scales, 1.0)
    codes = _round_half_away((qmax / safe)[:, None] * blocks)
    codes = np.clip(codes, -qmax, qmax)
    codes[scales == 0] = 0
    return QuantizedTensor(
        codes=codes.reshape(-1)[:flat.size].astype(np.int8),
        scales=scales,
        bits=bits,
        block_size=block_size,
        shape=tuple(data.shape),
    )


def dequantize_array(q):
    per_element = np.repeat(q.scales, q.block_size)[:q.size]
    # code / Qmax first, so +-Qmax maps to exactly +-s_b
    return (q.codes.astype(np.float64) / q.qmax * per_element).reshape(q.shape)


def dequantize(q):
    """Map codes back to full precision: x_hat = code * s_b / Qmax."""
    return Tensor(dequantize_array(q))


@dataclass
class RoundtripError:
    max_abs: float
    mean_abs: float
    bound: float


def roundtrip_error(x, bits=4, block_size=64):
    """
    Measure quantize -> dequantize error against the rounding bound.

    bound = max over blocks of s_b / (2 * Qmax); max_abs never exceeds it
    (up to fp64 rounding).
    """
    data = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    q = quantize_absmax(data, bits=bits, block_size=block_size)
    diff = np.abs(data.reshape(-1) - dequantize_array(q).reshape(-1))
    return RoundtripError(
        max_abs=float(diff.max()),
        mean_abs=float(diff.mean()),
        bound=float(q.scales.max() / (2 * q.qmax)),
    )


# ==============================================================================
# ON-DISK CODE PACKING
# int4: two codes per byte, low nibble first, 4-bit two's complement.
# int8: one code per byte.
# ==============================================================================

def pack_codes(codes, bits):
    codes = np.asarray(codes, dtype=np.int8).reshape(-1)
    if bits == 8:
        return codes.astype('<i1').tobytes()
    qmax_for(bits)
    nibbles = (codes.astype(np.int16) & 0x0F).astype(np.uint8)
    if nibbles.size % 2:
        nibbles = np.append(nibbles, np.uint8(0))
    packed = nibbles[0::2] | (nibbles[1::2] << 4)
    return packed.astype(np.uint8).tobytes()


def unpack_codes(payload, count, bits):
    raw = np.frombuffer(payload, dtype=np.uint8)
    if bits == 8:
        if raw.size != count:
            raise ShapeMismatch(f"expected {count} int8 codes, got {raw.size}")
        return raw.view(np.int8).copy()
    qmax_for(bits)
    if raw.size != math.ceil(count / 2):
        raise ShapeMismatch(f"expected {math.ceil(count / 2)} packed bytes, got {raw.size}")
    nibbles = np.empty(raw.size * 2, dtype=np.int16)
    nibbles[0::2] = raw & 0x0F
    nibbles[1::2] = raw >> 4
    nibbles[nibbles >= 8] -= 16
    return nibbles[:count].astype(np.int8)
