"""Compute components: the stream matrix multiply and the nonlinear functions.

The matrix multiply is the fixed module: it reads its weights strictly
sequentially (from the parameter stream or from a strided memory region),
feeds B processing elements per cycle-equivalent, and writes requantized
results.  SoftMax, LayerNorm and Gelu are variable modules; they evaluate in
an internal high-precision domain and requantize at the boundary, so
quantization error stays at the interfaces.

Fixed-point discipline: int8 operands, exact 32-bit accumulation of the
16-bit products, one final rounding when converting back to 8 bits.  The
output scale is folded into a (multiplier, shift) pair so the integer path
never divides.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import as_strided

from . import kernels
from .errors import ParamError, ProgramError

INT32_MIN = -(1 << 31)
INT32_MAX = (1 << 31) - 1

BIAS_NONE = "none"
BIAS_STREAM = "stream"
BIAS_MEM = "mem"


@dataclass
class Diagnostics:
    """Counters a run accumulates: 8-bit saturations, divisions, 32-bit overflows."""

    saturations: int = 0
    divisions: int = 0
    overflows: int = 0

    def merge(self, other: "Diagnostics"):
        self.saturations += other.saturations
        self.divisions += other.divisions
        self.overflows += other.overflows


@dataclass(frozen=True)
class AccumSpec:
    """Accumulation discipline of one fixed-point matmul."""

    product_frac: int
    requant_shift: int
    acc_bits: int = 32


@dataclass(frozen=True)
class MatmulJob:
    """One concrete stream-matmul invocation over flat memory.

    The input region is an (m, k) matrix read with element strides
    (rs_m, rs_k) from ``src``; the output is (m, n) written with strides
    (ds_m, ds_n) at ``dst``.  Weights either come off the parameter stream
    (``w_src < 0``; k*n elements, k-major within each output column) or from
    memory at ``w_src`` with strides (ws_k, ws_n).  An optional bias is a
    stream vector of n or a strided (m, n) memory matrix; it is applied after
    the output scale.  ``accumulate`` adds the previous destination contents
    (how residual connections are realized).
    """

    m: int
    k: int
    n: int
    src: int
    rs_m: int
    rs_k: int
    dst: int
    ds_m: int
    ds_n: int
    w_src: int = -1
    ws_k: int = 0
    ws_n: int = 0
    bias_kind: str = BIAS_NONE
    b_src: int = -1
    bs_m: int = 0
    bs_n: int = 0
    out_scale: float = 1.0
    accumulate: bool = False
    f_in: int = 4
    f_w: int = 6
    f_out: int = 4
    f_bias: int = 6
    tag: str = ""

    @property
    def stream_weights(self) -> bool:
        return self.w_src < 0

    @property
    def param_count(self) -> int:
        """Parameter-stream elements this job consumes."""
        count = self.k * self.n if self.stream_weights else 0
        if self.bias_kind == BIAS_STREAM:
            count += self.n
        return count

    @property
    def macs(self) -> int:
        return self.m * self.k * self.n

    def accum_spec(self) -> AccumSpec:
        return AccumSpec(self.f_in + self.f_w, self.f_in + self.f_w - self.f_out)


def _scale_to_mult_shift(scale: float) -> tuple[int, int]:
    """Represent a positive real scale as mult / 2**shift with a 15-bit mult."""
    if scale == 1.0:
        return 1, 0
    if not (scale > 0) or not math.isfinite(scale):
        raise ParamError(f"output scale must be finite and positive, got {scale}")
    e = math.floor(math.log2(scale)) + 1
    mant = scale / (2.0 ** e)  # in (0.5, 1]
    return int(round(mant * (1 << 15))), 15 - e


def _in_view(mem, job: MatmulJob):
    isz = mem.itemsize
    return as_strided(mem[job.src:], (job.m, job.k), (job.rs_m * isz, job.rs_k * isz))


def _out_view(mem, job: MatmulJob):
    isz = mem.itemsize
    return as_strided(mem[job.dst:], (job.m, job.n), (job.ds_m * isz, job.ds_n * isz))


def _mem_weights(mem, job: MatmulJob):
    isz = mem.itemsize
    return as_strided(mem[job.w_src:], (job.k, job.n), (job.ws_k * isz, job.ws_n * isz))


def _mem_bias(mem, job: MatmulJob):
    isz = mem.itemsize
    return as_strided(mem[job.b_src:], (job.m, job.n), (job.bs_m * isz, job.bs_n * isz))


def matmul_stream(mem: np.ndarray, job: MatmulJob, weights: np.ndarray | None,
                  bias: np.ndarray | None, diag: Diagnostics) -> None:
    """Execute one matmul job on a flat float64 or int8 memory.

    ``weights``/``bias`` are the stream slices for stream-sourced operands
    (raw codes in fix_8 memory, reals in float memory) and must be None for
    memory-sourced ones.  Summation over k is a single fused reduction per
    output element, so row-parallel execution is bit-identical to sequential.
    """
    if job.stream_weights:
        if weights is None or weights.size != job.k * job.n:
            raise ProgramError(
                f"matmul {job.tag or '?'}: stream supplied {0 if weights is None else weights.size} "
                f"weights, job needs {job.k * job.n}"
            )
        w = weights.reshape(job.n, job.k).T  # stream is k-major per output column
    else:
        w = _mem_weights(mem, job)

    b = None
    if job.bias_kind == BIAS_STREAM:
        if bias is None or bias.size != job.n:
            raise ProgramError(f"matmul {job.tag or '?'}: bias vector of {job.n} missing")
        b = bias
    elif job.bias_kind == BIAS_MEM:
        b = _mem_bias(mem, job)

    a = _in_view(mem, job)
    out = _out_view(mem, job)

    if mem.dtype == np.float64:
        acc = np.ascontiguousarray(a) @ np.ascontiguousarray(w, dtype=np.float64)
        val = acc * job.out_scale if job.out_scale != 1.0 else acc
        if b is not None:
            val = val + b
        if job.accumulate:
            val = val + out
        out[...] = val
        return

    # fix_8 path: exact integer accumulation, one rounding at the end
    mult, sh = _scale_to_mult_shift(job.out_scale)
    f_acc = job.f_in + job.f_w + sh
    acc = kernels.gemm_i8(np.ascontiguousarray(a), np.ascontiguousarray(w))
    over = int(np.count_nonzero((acc < INT32_MIN) | (acc > INT32_MAX)))
    if over:
        diag.overflows += over
        acc = np.clip(acc, INT32_MIN, INT32_MAX)
    val = acc * np.int64(mult)
    if b is not None:
        if f_acc < job.f_bias:
            raise ProgramError(f"matmul {job.tag or '?'}: bias fraction {job.f_bias} finer than accumulator")
        val = val + (b.astype(np.int64) << (f_acc - job.f_bias))
    if job.accumulate:
        if f_acc < job.f_out:
            raise ProgramError(f"matmul {job.tag or '?'}: output fraction finer than accumulator")
        val = val + (out.astype(np.int64) << (f_acc - job.f_out))
    rshift = f_acc - job.f_out
    if rshift < 0:
        val = val << (-rshift)
        rshift = 0
    codes, sats = kernels.round_shift_sat8(val, rshift)
    diag.saturations += sats
    out[...] = codes.reshape(job.m, job.n)


# ---------------------------------------------------------------------------
# Nonlinear functions (real-valued cores)
# ---------------------------------------------------------------------------

SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
GELU_CUBIC = 0.044715


def softmax_rows(x: np.ndarray, diag: Diagnostics | None = None) -> np.ndarray:
    """Numerically stable softmax along the last axis (max-subtracted)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] < 1:
        raise ParamError("softmax needs at least one element per row")
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    if diag is not None:
        diag.divisions += int(np.prod(x.shape[:-1], dtype=np.int64)) if x.ndim > 1 else 1
    return e / e.sum(axis=-1, keepdims=True)


def softmax(row: np.ndarray) -> np.ndarray:
    row = np.atleast_1d(np.asarray(row, dtype=np.float64))
    if row.ndim != 1 or row.size < 1:
        raise ParamError("softmax expects a non-empty vector")
    return softmax_rows(row)


def layernorm_rows(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
                   eps: float = 1e-5, diag: Diagnostics | None = None) -> np.ndarray:
    """Row-wise layer normalization with the one-pass variance identity.

    The variance is E[x^2] - (E[x])^2 (clamped at zero), accumulated in the
    same sweep as the mean, rather than a second centered pass.
    """
    x = np.asarray(x, dtype=np.float64)
    d = x.shape[-1]
    if d < 1:
        raise ParamError("layernorm needs at least one element per row")
    gamma = np.asarray(gamma, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    if gamma.shape[-1] != d or beta.shape[-1] != d:
        raise ParamError("gamma/beta length must match the row length")
    mean = x.mean(axis=-1, keepdims=True)
    var = np.maximum(np.square(x).mean(axis=-1, keepdims=True) - mean * mean, 0.0)
    if diag is not None:
        diag.divisions += int(np.prod(x.shape[:-1], dtype=np.int64)) if x.ndim > 1 else 1
    return gamma * ((x - mean) / np.sqrt(var + eps)) + beta


def layernorm(row, gamma, beta, eps: float = 1e-5) -> np.ndarray:
    row = np.atleast_1d(np.asarray(row, dtype=np.float64))
    if row.ndim != 1 or row.size < 1:
        raise ParamError("layernorm expects a non-empty vector")
    return layernorm_rows(row, gamma, beta, eps)


def gelu(x):
    """Gelu via the tanh fitting curve x*0.5*(1 + tanh(sqrt(2/pi)(x + 0.044715 x^3)))."""
    x = np.asarray(x, dtype=np.float64)
    return x * 0.5 * (1.0 + np.tanh(SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)))


# ---------------------------------------------------------------------------
# Patch pre-processing and the attention composition
# ---------------------------------------------------------------------------


def preprocess_patches(image: np.ndarray, patch: int = 4) -> np.ndarray:
    """Flatten non-overlapping patch x patch blocks into per-token feature rows.

    (C, H, W) -> (H/patch * W/patch, C*patch*patch); feature order within a
    token is channel-major then row then column of the patch.
    """
    image = np.asarray(image)
    if image.ndim != 3:
        raise ParamError(f"expected (C, H, W) image, got shape {image.shape}")
    c, h, w = image.shape
    if h % patch or w % patch:
        raise ParamError(f"image {h}x{w} not divisible by patch size {patch}")
    blocks = image.reshape(c, h // patch, patch, w // patch, patch)
    tokens = blocks.transpose(1, 3, 0, 2, 4).reshape((h // patch) * (w // patch), c * patch * patch)
    return np.ascontiguousarray(tokens)


@dataclass
class AttentionWeights:
    """Projection set of one window-attention invocation (real-valued)."""

    w_qkv: np.ndarray
    b_qkv: np.ndarray
    w_proj: np.ndarray
    b_proj: np.ndarray
    rel_bias: np.ndarray | None = None  # (heads, L, L)

    def check(self, dim: int):
        if self.w_qkv.shape != (dim, 3 * dim) or self.w_proj.shape != (dim, dim):
            raise ProgramError("attention weight set has inconsistent projection shapes")


def attention_block(tokens: np.ndarray, weights: AttentionWeights, heads: int,
                    diag: Diagnostics | None = None) -> np.ndarray:
    """Multi-head self-attention over one window of tokens (real arithmetic).

    tokens is (L, dim); heads must divide dim.  Scores are QK^T scaled by
    1/sqrt(head_dim) plus the optional per-head relative position bias,
    softmaxed per row, applied to V, concatenated and projected.
    """
    tokens = np.asarray(tokens, dtype=np.float64)
    length, dim = tokens.shape
    if dim % heads:
        raise ParamError(f"head count {heads} does not divide embedding dim {dim}")
    weights.check(dim)
    dh = dim // heads
    qkv = tokens @ weights.w_qkv + weights.b_qkv
    q, k, v = qkv[:, :dim], qkv[:, dim:2 * dim], qkv[:, 2 * dim:]
    out = np.empty_like(tokens)
    for hd in range(heads):
        sl = slice(hd * dh, (hd + 1) * dh)
        scores = (q[:, sl] @ k[:, sl].T) / math.sqrt(dh)
        if weights.rel_bias is not None:
            scores = scores + weights.rel_bias[hd]
        probs = softmax_rows(scores, diag)
        out[:, sl] = probs @ v[:, sl]
    return out @ weights.w_proj + weights.b_proj
