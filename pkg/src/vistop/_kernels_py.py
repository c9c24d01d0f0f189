"""Pure-numpy implementations of the hot kernels.

These are the reference semantics; the compiled extension in ``_kernels.pyx``
must match them bit for bit.  All rounding is round-to-nearest-even and all
saturation is to the signed 8-bit range.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided

BACKEND = "numpy"

RAW_MIN = -128
RAW_MAX = 127

# cube_copy modes
MODE_SELECT = 0   # gather: cube-strided source -> packed destination
MODE_ARRANGE = 1  # scatter: packed source -> cube-strided destination
MODE_COPY = 2     # cube-strided source -> cube-strided destination


def quantize_core(values: np.ndarray, frac_bits: int):
    """Round-half-even quantization of a float64 array to int8 codes.

    Returns (codes, saturation_count).  Infinities saturate and are counted.
    """
    scaled = values * float(1 << frac_bits)
    rounded = np.rint(scaled)
    sat = int(np.count_nonzero((rounded < RAW_MIN) | (rounded > RAW_MAX)))
    clipped = np.clip(rounded, RAW_MIN, RAW_MAX)
    return clipped.astype(np.int8), sat


def round_shift_sat8(vals: np.ndarray, rshift: int):
    """``round_half_even(vals / 2**rshift)`` saturated to int8.

    ``vals`` is int64; ``rshift`` must be >= 0.  Returns (codes, saturations).
    """
    v = np.asarray(vals, dtype=np.int64)
    if rshift == 0:
        q = v
    else:
        q = v >> rshift
        r = v & ((np.int64(1) << rshift) - 1)
        half = np.int64(1) << (rshift - 1)
        q = q + ((r > half) | ((r == half) & ((q & 1) == 1)))
    sat = int(np.count_nonzero((q < RAW_MIN) | (q > RAW_MAX)))
    return np.clip(q, RAW_MIN, RAW_MAX).astype(np.int8), sat


def gemm_i8(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Exact (m,k) @ (k,n) product of int8 operands, int64 result.

    float64 accumulation is exact here: |product| <= 2**14 and k stays far
    below 2**15, so every partial sum is an integer below 2**53.
    """
    return (a.astype(np.float64) @ b.astype(np.float64)).astype(np.int64)


def _cube_views(mem, mc, mh, mw, sc, sh, sw, fc, fh, fw, src_off, dst_off, mode):
    isz = mem.itemsize
    shape = (sc, sh, sw)
    cube_strides = (mh * mw * isz, mw * isz, isz)
    packed_strides = (sh * sw * isz, sw * isz, isz)
    if mode == MODE_SELECT:
        src0 = src_off + fc * mh * mw + fh * mw + fw
        src = as_strided(mem[src0:], shape, cube_strides)
        dst = as_strided(mem[dst_off:], shape, packed_strides)
    elif mode == MODE_ARRANGE:
        src = as_strided(mem[src_off:], shape, packed_strides)
        dst0 = dst_off + fc * mh * mw + fh * mw + fw
        dst = as_strided(mem[dst0:], shape, cube_strides)
    elif mode == MODE_COPY:
        src0 = src_off + fc * mh * mw + fh * mw + fw
        src = as_strided(mem[src0:], shape, cube_strides)
        dst = as_strided(mem[dst_off:], shape, cube_strides)
    else:
        raise ValueError(f"unknown cube_copy mode {mode}")
    return src, dst


def cube_copy(mem, mc, mh, mw, sc, sh, sw, fc, fh, fw, src_off, dst_off, mode):
    """Move one small cube within a flat buffer (regions must not overlap)."""
    src, dst = _cube_views(mem, mc, mh, mw, sc, sh, sw, fc, fh, fw, src_off, dst_off, mode)
    dst[...] = src
