"""Linearized tensor storage and the fix_8 numeric representation.

Every tensor the simulator touches is a logical (C, H, W) block spread out
into one contiguous buffer in W-fastest order: element (c, h, w) lives at
linear index ``c*H*W + h*W + w``.  Data selection reads along W, then H,
then C, which is exactly the access order the rest of the machine assumes.

Quantized values are signed 8-bit fixed point with a per-tensor power-of-two
scale (Q(8-F).F).  Power-of-two scales keep every requantization a plain
arithmetic shift; no division is needed anywhere on the integer path.
"""

from __future__ import annotations

import json
import os
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import BoundsError, ParamError, QuantError

RAW_MIN = -128
RAW_MAX = 127

# Role tags a manifest entry may carry.  "weight" entries are K x N matrices,
# everything else is streamed flat.
TENSOR_ROLES = ("weight", "bias", "gamma", "beta", "rel_bias", "const", "input")


@dataclass(frozen=True)
class QuantSpec:
    """Fixed-point format descriptor: signed 8 bit with ``frac_bits`` fraction bits."""

    frac_bits: int
    total_bits: int = 8
    signed: bool = True

    def __post_init__(self):
        if self.total_bits != 8 or not self.signed:
            raise ParamError("only signed 8-bit formats are supported")
        if not 0 <= self.frac_bits <= 7:
            raise ParamError(f"frac_bits must be in 0..7, got {self.frac_bits}")

    @property
    def scale(self) -> float:
        return 2.0 ** (-self.frac_bits)

    @property
    def min_value(self) -> float:
        return RAW_MIN * self.scale

    @property
    def max_value(self) -> float:
        return RAW_MAX * self.scale


@dataclass(frozen=True)
class Fix8:
    """One quantized value: raw 8-bit code plus its format."""

    raw: int
    spec: QuantSpec

    def __post_init__(self):
        if not RAW_MIN <= self.raw <= RAW_MAX:
            raise ParamError(f"raw code {self.raw} outside signed 8-bit range")

    @property
    def value(self) -> float:
        return self.raw * self.spec.scale


def linear_index(c: int, h: int, w: int, dims: tuple[int, int, int]) -> int:
    """Map a (c, h, w) coordinate to its linear buffer index."""
    C, H, W = dims
    for name, coord, bound in (("c", c, C), ("h", h, H), ("w", w, W)):
        if not 0 <= coord < bound:
            raise BoundsError(f"axis {name}: coordinate {coord} outside [0, {bound})")
    return c * H * W + h * W + w


def quantize(x: float, spec: QuantSpec) -> Fix8:
    """Round-to-nearest-even quantization with saturation.

    NaN is rejected; infinities saturate to the range ends with a warning.
    """
    if np.isnan(x):
        raise QuantError("cannot quantize NaN")
    if np.isinf(x):
        warnings.warn("infinite input saturated during quantization", RuntimeWarning)
        return Fix8(RAW_MAX if x > 0 else RAW_MIN, spec)
    raw = int(np.rint(x / spec.scale))
    raw = min(max(raw, RAW_MIN), RAW_MAX)
    return Fix8(raw, spec)


def dequantize(v: Fix8 | int, spec: QuantSpec | None = None) -> float:
    """Exact real value of a raw code: ``raw * 2**-F``."""
    if isinstance(v, Fix8):
        return v.value
    if spec is None:
        raise ParamError("spec required when dequantizing a bare raw code")
    return int(v) * spec.scale


@dataclass
class Tensor3D:
    """A (C, H, W) tensor backed by one linear buffer in W-fastest order."""

    c: int
    h: int
    w: int
    data: np.ndarray
    quant: QuantSpec | None = None

    def __post_init__(self):
        if min(self.c, self.h, self.w) < 1:
            raise ParamError(f"dims must be >= 1, got {(self.c, self.h, self.w)}")
        n = self.c * self.h * self.w
        self.data = np.asarray(self.data).reshape(-1)
        if self.data.size != n:
            raise ParamError(f"buffer holds {self.data.size} elements, dims need {n}")
        if self.quant is not None and self.data.dtype != np.int8:
            raise ParamError("quantized tensors must use an int8 buffer")

    @property
    def dims(self) -> tuple[int, int, int]:
        return (self.c, self.h, self.w)

    def at(self, c: int, h: int, w: int):
        return self.data[linear_index(c, h, w, self.dims)]

    def to_floats(self) -> np.ndarray:
        """Real-valued copy, shape (C, H, W)."""
        arr = self.data.reshape(self.c, self.h, self.w)
        if self.quant is None:
            return arr.astype(np.float64)
        return arr.astype(np.float64) * self.quant.scale

    @classmethod
    def from_floats(cls, values: np.ndarray, quant: QuantSpec | None = None) -> "Tensor3D":
        """Build from a (C, H, W) float array, quantizing when a spec is given."""
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 3:
            raise ParamError(f"expected a 3-d array, got shape {values.shape}")
        c, h, w = values.shape
        if quant is None:
            return cls(c, h, w, values.reshape(-1).copy())
        from . import kernels

        raw, _ = kernels.quantize_array(values.reshape(-1), quant.frac_bits)
        return cls(c, h, w, raw, quant)


# ---------------------------------------------------------------------------
# Weight manifest and raw tensor files
# ---------------------------------------------------------------------------
#
# On disk a tensor is a little-endian raw array: int8 codes for fix_8 data
# (one byte per element, W-fastest order) or float32 values.  A JSON manifest
# lists every tensor with its dims, role, fraction bits, file and byte offset,
# so many tensors may share one packed file.

_DTYPES = {"int8": np.int8, "float32": np.dtype("<f4")}


@dataclass
class ManifestEntry:
    name: str
    role: str
    dims: tuple[int, ...]
    frac_bits: int
    file: str
    byte_offset: int = 0
    dtype: str = "int8"

    def __post_init__(self):
        if self.role not in TENSOR_ROLES:
            raise ParamError(f"unknown tensor role {self.role!r}")
        if self.dtype not in _DTYPES:
            raise ParamError(f"unknown tensor dtype {self.dtype!r}")
        self.dims = tuple(int(d) for d in self.dims)
        if any(d < 1 for d in self.dims):
            raise ParamError(f"{self.name}: dims must be >= 1")

    @property
    def count(self) -> int:
        n = 1
        for d in self.dims:
            n *= d
        return n


@dataclass
class WeightManifest:
    entries: list[ManifestEntry] = field(default_factory=list)
    base_dir: str = "."

    def __post_init__(self):
        names = [e.name for e in self.entries]
        if len(names) != len(set(names)):
            raise ParamError("manifest contains duplicate tensor names")
        self._by_name = {e.name: e for e in self.entries}

    def get(self, name: str) -> ManifestEntry:
        try:
            return self._by_name[name]
        except KeyError:
            raise ParamError(f"manifest has no tensor named {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._by_name

    @property
    def total_elements(self) -> int:
        return sum(e.count for e in self.entries)

    def load_raw(self, entry: ManifestEntry) -> np.ndarray:
        """Raw stored codes/values of one tensor, flat."""
        path = os.path.join(self.base_dir, entry.file)
        dt = _DTYPES[entry.dtype]
        with open(path, "rb") as f:
            f.seek(entry.byte_offset)
            buf = f.read(entry.count * dt.itemsize)
        if len(buf) != entry.count * dt.itemsize:
            raise ParamError(f"{entry.name}: file {entry.file} truncated")
        return np.frombuffer(buf, dtype=dt).copy()

    def load_floats(self, entry: ManifestEntry) -> np.ndarray:
        """Real values of one tensor (int8 codes are dequantized)."""
        raw = self.load_raw(entry)
        if entry.dtype == "int8":
            return raw.astype(np.float64) * 2.0 ** (-entry.frac_bits)
        return raw.astype(np.float64)

    def to_json(self) -> str:
        return json.dumps(
            {
                "tensors": [
                    {
                        "name": e.name,
                        "role": e.role,
                        "dims": list(e.dims),
                        "frac_bits": e.frac_bits,
                        "file": e.file,
                        "byte_offset": e.byte_offset,
                        "dtype": e.dtype,
                    }
                    for e in self.entries
                ]
            },
            indent=2,
        )

    def save(self, path: str):
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.to_json())

    @classmethod
    def load(cls, path: str) -> "WeightManifest":
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
        entries = [
            ManifestEntry(
                name=t["name"],
                role=t["role"],
                dims=tuple(t["dims"]),
                frac_bits=int(t["frac_bits"]),
                file=t["file"],
                byte_offset=int(t.get("byte_offset", 0)),
                dtype=t.get("dtype", "int8"),
            )
            for t in doc["tensors"]
        ]
        return cls(entries, base_dir=os.path.dirname(os.path.abspath(path)))
