"""Kernel backend selection.

The hot inner loops (cube moves, int8 GEMM, requantization, array quantize)
exist twice: a Cython extension built at install time and a pure-numpy
fallback with identical bit-level semantics.  The compiled backend is used
when importable; set ``VISTOP_PURE_PYTHON=1`` to force the fallback.
``benchmarks/bench_kernels.py`` compares the two.
"""

from __future__ import annotations

import os

import numpy as np

from . import _kernels_py
from .errors import QuantError

if os.environ.get("VISTOP_PURE_PYTHON", "") not in ("", "0"):
    _impl = _kernels_py
else:
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]
    except ImportError:
        _impl = _kernels_py

MODE_SELECT = _kernels_py.MODE_SELECT
MODE_ARRANGE = _kernels_py.MODE_ARRANGE
MODE_COPY = _kernels_py.MODE_COPY

RAW_MIN = _kernels_py.RAW_MIN
RAW_MAX = _kernels_py.RAW_MAX


def backend_name() -> str:
    return _impl.BACKEND


def quantize_array(values: np.ndarray, frac_bits: int):
    """Quantize a float array to int8 codes; returns (codes, saturations)."""
    values = np.ascontiguousarray(values, dtype=np.float64)
    if np.isnan(values).any():
        raise QuantError("cannot quantize NaN")
    return _impl.quantize_core(values, frac_bits)


def round_shift_sat8(vals: np.ndarray, rshift: int):
    """Round-half-even right shift of int64 values, saturated to int8."""
    if rshift < 0:
        raise ValueError("rshift must be >= 0; left shifts are exact, do them first")
    return _impl.round_shift_sat8(np.ascontiguousarray(vals, dtype=np.int64), rshift)


def gemm_i8(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Exact int8 matrix product with 64-bit accumulation."""
    a = np.ascontiguousarray(a, dtype=np.int8)
    b = np.ascontiguousarray(b, dtype=np.int8)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"shape mismatch: {a.shape} @ {b.shape}")
    return _impl.gemm_i8(a, b)


def cube_copy(mem, mc, mh, mw, sc, sh, sw, fc, fh, fw, src_off, dst_off, mode):
    """Execute one cube move on a flat int8 or float64 buffer."""
    _impl.cube_copy(
        mem, int(mc), int(mh), int(mw), int(sc), int(sh), int(sw),
        int(fc), int(fh), int(fw), int(src_off), int(dst_off), int(mode),
    )
