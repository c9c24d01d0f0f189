"""Binary program format and the textual disassembler.

Layout: magic ``VTOP``, a u16 format version, then the sections in fixed
order (meta, memory map, bundle table, instructions, stream layout).  All
integers are little-endian; strings are u16-length-prefixed UTF-8.  The
decoder bounds-checks every read and reports the byte offset on failure, so
corrupted files produce errors rather than crashes.
"""

from __future__ import annotations

import struct

from .errors import DecodeError, ParamError
from .isa import (
    BundleProgram,
    BundleTableEntry,
    ComponentInvocation,
    ComponentKind,
    Instruction,
    InstrKind,
    MemoryMap,
    MemoryRegion,
    StreamTensorRef,
)

MAGIC = b"VTOP"
VERSION = 1

_ATTR_INT = 0
_ATTR_FLOAT = 1
_ATTR_STR = 2

_TRANSFORMS = ["flat", "colmajor"]
_VISIBILITIES = ["public", "private"]


class _Writer:
    def __init__(self):
        self.parts: list[bytes] = []

    def pack(self, fmt: str, *vals):
        self.parts.append(struct.pack("<" + fmt, *vals))

    def string(self, s: str):
        raw = s.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ParamError("string too long to encode")
        self.pack("H", len(raw))
        self.parts.append(raw)

    def bytes(self) -> bytes:
        return b"".join(self.parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.off = 0

    def unpack(self, fmt: str):
        fmt = "<" + fmt
        size = struct.calcsize(fmt)
        if self.off + size > len(self.data):
            raise DecodeError(f"truncated while reading {fmt!r}", self.off)
        vals = struct.unpack_from(fmt, self.data, self.off)
        self.off += size
        return vals if len(vals) > 1 else vals[0]

    def string(self) -> str:
        n = self.unpack("H")
        if self.off + n > len(self.data):
            raise DecodeError("truncated string", self.off)
        raw = self.data[self.off:self.off + n]
        self.off += n
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError:
            raise DecodeError("string is not valid UTF-8", self.off - n) from None

    def expect_count(self, n: int, what: str, limit: int = 1 << 24) -> int:
        if n < 0 or n > limit:
            raise DecodeError(f"implausible {what} count {n}", self.off)
        return n


def encode(program: BundleProgram) -> bytes:
    """Serialize a program; ``decode(encode(p))`` is structurally equal to p."""
    w = _Writer()
    w.parts.append(MAGIC)
    w.pack("H", VERSION)

    w.pack("H", len(program.meta))
    for key in program.meta:
        w.string(key)
        w.pack("q", int(program.meta[key]))

    w.pack("H", len(program.memory_map.regions))
    for r in program.memory_map.regions:
        w.string(r.name)
        w.pack("QQB", r.base, r.size, r.frac_bits)

    w.pack("H", len(program.bundles))
    for b in program.bundles:
        w.pack("H", b.bundle_id)
        w.string(b.name)
        w.pack("B", _VISIBILITIES.index(b.visibility))
        w.pack("H", len(b.invocations))
        for inv in b.invocations:
            w.pack("B", int(inv.kind))
            w.string(inv.op)
            w.pack("B", len(inv.attrs))
            for key, val in inv.attrs.items():
                w.string(key)
                if isinstance(val, bool):
                    w.pack("B", _ATTR_INT)
                    w.pack("q", int(val))
                elif isinstance(val, int):
                    w.pack("B", _ATTR_INT)
                    w.pack("q", val)
                elif isinstance(val, float):
                    w.pack("B", _ATTR_FLOAT)
                    w.pack("d", val)
                else:
                    w.pack("B", _ATTR_STR)
                    w.string(str(val))
            w.pack("B", len(inv.bindings))
            for key, reg in inv.bindings.items():
                w.string(key)
                w.pack("B", reg)

    w.pack("I", len(program.instructions))
    for ins in program.instructions:
        w.pack("B", int(ins.kind))
        if ins.kind == InstrKind.PARAM_SET:
            w.pack("Bq", ins.reg, ins.value)
        else:
            w.pack("H", ins.bundle_id)

    w.pack("I", len(program.stream))
    for ref in program.stream:
        w.string(ref.name)
        w.pack("QB", ref.count, ref.frac_bits)
        w.pack("B", _TRANSFORMS.index(ref.transform))
        if ref.transform == "colmajor":
            w.pack("II", ref.k, ref.n)

    return w.bytes()


def decode(data: bytes) -> BundleProgram:
    """Parse a program file, raising DecodeError (never crashing) on bad input."""
    r = _Reader(data)
    if len(data) < 4 or data[:4] != MAGIC:
        raise DecodeError("bad magic, not a VTOP program", 0)
    r.off = 4
    version = r.unpack("H")
    if version != VERSION:
        raise DecodeError(f"unsupported format version {version}", 4)

    meta = {}
    for _ in range(r.expect_count(r.unpack("H"), "meta")):
        key = r.string()
        meta[key] = r.unpack("q")

    regions = []
    for _ in range(r.expect_count(r.unpack("H"), "region")):
        name = r.string()
        base, size, frac = r.unpack("QQB")
        try:
            regions.append(MemoryRegion(name, base, size, frac))
        except ParamError as e:
            raise DecodeError(str(e), r.off) from None

    bundles = []
    for _ in range(r.expect_count(r.unpack("H"), "bundle")):
        bundle_id = r.unpack("H")
        name = r.string()
        vis = r.unpack("B")
        if vis >= len(_VISIBILITIES):
            raise DecodeError(f"bad visibility tag {vis}", r.off)
        invocations = []
        for _ in range(r.expect_count(r.unpack("H"), "invocation")):
            kind_raw = r.unpack("B")
            try:
                kind = ComponentKind(kind_raw)
            except ValueError:
                raise DecodeError(f"bad component kind {kind_raw}", r.off) from None
            op = r.string()
            attrs: dict = {}
            for _ in range(r.expect_count(r.unpack("B"), "attr", 255)):
                key = r.string()
                tag = r.unpack("B")
                if tag == _ATTR_INT:
                    attrs[key] = r.unpack("q")
                elif tag == _ATTR_FLOAT:
                    attrs[key] = r.unpack("d")
                elif tag == _ATTR_STR:
                    attrs[key] = r.string()
                else:
                    raise DecodeError(f"bad attribute tag {tag}", r.off)
            bindings = {}
            for _ in range(r.expect_count(r.unpack("B"), "binding", 255)):
                key = r.string()
                bindings[key] = r.unpack("B")
            try:
                invocations.append(ComponentInvocation(kind, op, bindings, attrs))
            except ParamError as e:
                raise DecodeError(str(e), r.off) from None
        try:
            bundles.append(BundleTableEntry(bundle_id, name, tuple(invocations), _VISIBILITIES[vis]))
        except ParamError as e:
            raise DecodeError(str(e), r.off) from None

    instructions = []
    for _ in range(r.expect_count(r.unpack("I"), "instruction")):
        kind_raw = r.unpack("B")
        if kind_raw == InstrKind.PARAM_SET:
            reg, value = r.unpack("Bq")
            try:
                instructions.append(Instruction.param_set(reg, value))
            except ParamError as e:
                raise DecodeError(str(e), r.off) from None
        elif kind_raw == InstrKind.MODULE_EXEC:
            instructions.append(Instruction.module_exec(r.unpack("H")))
        else:
            raise DecodeError(f"bad instruction kind {kind_raw}", r.off)

    stream = []
    for _ in range(r.expect_count(r.unpack("I"), "stream ref")):
        name = r.string()
        count, frac = r.unpack("QB")
        tr = r.unpack("B")
        if tr >= len(_TRANSFORMS):
            raise DecodeError(f"bad stream transform tag {tr}", r.off)
        k = n = 0
        if _TRANSFORMS[tr] == "colmajor":
            k, n = r.unpack("II")
        try:
            stream.append(StreamTensorRef(name, count, frac, _TRANSFORMS[tr], k, n))
        except ParamError as e:
            raise DecodeError(str(e), r.off) from None

    if r.off != len(data):
        raise DecodeError(f"{len(data) - r.off} trailing bytes after program", r.off)

    try:
        return BundleProgram(MemoryMap(regions), bundles, instructions, stream, meta)
    except ParamError as e:
        raise DecodeError(str(e), r.off) from None


def save(program: BundleProgram, path: str):
    with open(path, "wb") as f:
        f.write(encode(program))


def load(path: str) -> BundleProgram:
    with open(path, "rb") as f:
        return decode(f.read())


# ---------------------------------------------------------------------------
# Disassembler
# ---------------------------------------------------------------------------


def _fmt_attr(val) -> str:
    if isinstance(val, float):
        return repr(val)
    return str(val)


def disassemble(program: BundleProgram) -> str:
    """Stable text form: one instruction per line, tab-separated fields."""
    lines = [f"; vtop program v{VERSION}"]

    lines.append("; meta")
    for key, val in program.meta.items():
        lines.append(f"meta\t{key}\t{val}")

    lines.append("; memory map")
    for r in program.memory_map.regions:
        lines.append(f"region\t{r.name}\tbase={r.base}\tsize={r.size}\tfrac={r.frac_bits}")

    lines.append("; bundle table")
    for b in program.bundles:
        lines.append(f"bundle\t{b.bundle_id}\t{b.name}\t{b.visibility}")
        for inv in b.invocations:
            binds = ",".join(f"{k}=r{v}" for k, v in inv.bindings.items())
            attrs = ",".join(f"{k}={_fmt_attr(v)}" for k, v in inv.attrs.items())
            lines.append(f"  {inv.kind.name.lower()}\t{inv.op}\t[{binds}]\t{{{attrs}}}")

    lines.append("; instructions")
    for i, ins in enumerate(program.instructions):
        if ins.kind == InstrKind.PARAM_SET:
            lines.append(f"{i}\tparam_set\tr{ins.reg}\t{ins.value}")
        else:
            name = ""
            try:
                name = program.bundle(ins.bundle_id).name
            except Exception:
                name = "?"
            lines.append(f"{i}\tmodule_exec\t{ins.bundle_id}\t{name}")

    lines.append("; parameter stream")
    for ref in program.stream:
        extra = f"\tk={ref.k}\tn={ref.n}" if ref.transform == "colmajor" else ""
        lines.append(f"stream\t{ref.name}\tcount={ref.count}\tfrac={ref.frac_bits}\t{ref.transform}{extra}")

    return "\n".join(lines) + "\n"
