"""Instruction bundles: the two instruction kinds, the bundle table and
register state, and the expansion of bundle entries into concrete jobs.

A program is a sequence of just two instruction kinds.  ``ParamSet`` writes a
scalar (dimension, channel count, offset, address) into one of 64 registers;
``ModuleExec`` names an entry of the Instruction Bundle Table.  Executing a
ModuleExec expands the entry's component sequence against the current
register file, computing the number of jobs, the data-movement counts and the
concrete storage addresses of every underlying component invocation.
Expansion is a pure function of (entry, registers), which is what makes
programs validatable without running them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from . import datamove
from .compute import BIAS_MEM, BIAS_NONE, BIAS_STREAM, MatmulJob
from .datamove import ArrangePlan, CubeStep, StepMode
from .errors import ParamError, ProgramError

REGISTER_COUNT = 64
BUNDLE_CAPACITY = 256


class ComponentKind(IntEnum):
    MATMUL = 0
    SOFTMAX = 1
    LAYERNORM = 2
    GELU = 3
    DATAMOVE = 4
    PREPROCESS = 5


class InstrKind(IntEnum):
    PARAM_SET = 0
    MODULE_EXEC = 1


@dataclass(frozen=True)
class Instruction:
    kind: InstrKind
    reg: int = 0        # ParamSet target register
    value: int = 0      # ParamSet value
    bundle_id: int = 0  # ModuleExec target bundle

    @classmethod
    def param_set(cls, reg: int, value: int) -> "Instruction":
        if not 0 <= reg < REGISTER_COUNT:
            raise ParamError(f"register id {reg} outside 0..{REGISTER_COUNT - 1}")
        return cls(InstrKind.PARAM_SET, reg=reg, value=int(value))

    @classmethod
    def module_exec(cls, bundle_id: int) -> "Instruction":
        return cls(InstrKind.MODULE_EXEC, bundle_id=bundle_id)


@dataclass(frozen=True)
class ComponentInvocation:
    """One component call inside a bundle entry.

    ``bindings`` maps parameter names to register ids (resolved at expansion
    time); ``attrs`` carries the static per-entry scalars such as layout
    tags, fraction bits and output scales.
    """

    kind: ComponentKind
    op: str
    bindings: dict[str, int] = field(default_factory=dict)
    attrs: dict[str, int | float | str] = field(default_factory=dict)

    def __post_init__(self):
        for name, reg in self.bindings.items():
            if not 0 <= reg < REGISTER_COUNT:
                raise ParamError(f"binding {name!r} uses register {reg} outside the file")


@dataclass(frozen=True)
class BundleTableEntry:
    bundle_id: int
    name: str
    invocations: tuple[ComponentInvocation, ...]
    visibility: str = "public"  # private entries are emitted only by internal lowering

    def __post_init__(self):
        if self.visibility not in ("public", "private"):
            raise ParamError(f"unknown visibility {self.visibility!r}")
        if not 0 <= self.bundle_id < BUNDLE_CAPACITY:
            raise ParamError(f"bundle id {self.bundle_id} outside table capacity")


class RegisterFile:
    """64 scalar registers with init tracking."""

    def __init__(self):
        self.values = np.zeros(REGISTER_COUNT, dtype=np.int64)
        self.written = np.zeros(REGISTER_COUNT, dtype=bool)

    def write(self, reg: int, value: int):
        self.values[reg] = value
        self.written[reg] = True

    def read(self, reg: int) -> int:
        if not self.written[reg]:
            raise ProgramError(f"register r{reg} read before any ParamSet wrote it")
        return int(self.values[reg])


@dataclass(frozen=True)
class MemoryRegion:
    name: str
    base: int
    size: int
    frac_bits: int = 4

    @property
    def end(self) -> int:
        return self.base + self.size


@dataclass
class MemoryMap:
    regions: list[MemoryRegion] = field(default_factory=list)

    def region(self, name: str) -> MemoryRegion:
        for r in self.regions:
            if r.name == name:
                return r
        raise ProgramError(f"memory map has no region {name!r}")

    @property
    def total_size(self) -> int:
        return max((r.end for r in self.regions), default=0)

    def overlaps(self) -> list[tuple[str, str]]:
        bad = []
        ordered = sorted(self.regions, key=lambda r: r.base)
        for a, b in zip(ordered, ordered[1:]):
            if b.base < a.end:
                bad.append((a.name, b.name))
        return bad


@dataclass(frozen=True)
class StreamTensorRef:
    """One tensor of the parameter stream, in first-use order.

    ``transform`` is how the stored tensor is serialized onto the stream:
    ``flat`` as stored, ``colmajor`` reorders a (k, n) matrix k-major within
    each output column so the matmul consumes it strictly sequentially.
    """

    name: str
    count: int
    frac_bits: int
    transform: str = "flat"
    k: int = 0
    n: int = 0

    def __post_init__(self):
        if self.transform not in ("flat", "colmajor"):
            raise ParamError(f"unknown stream transform {self.transform!r}")
        if self.transform == "colmajor" and self.k * self.n != self.count:
            raise ParamError(f"stream ref {self.name}: k*n != count")


@dataclass
class BundleProgram:
    """A compiled program: bundle table, instructions, stream layout, memory map."""

    memory_map: MemoryMap
    bundles: list[BundleTableEntry]
    instructions: list[Instruction]
    stream: list[StreamTensorRef]
    meta: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        ids = [b.bundle_id for b in self.bundles]
        if len(ids) != len(set(ids)):
            raise ParamError("duplicate bundle ids in table")
        if len(self.bundles) > BUNDLE_CAPACITY:
            raise ParamError("bundle table capacity exceeded")
        self._by_id = {b.bundle_id: b for b in self.bundles}

    def bundle(self, bundle_id: int) -> BundleTableEntry:
        try:
            return self._by_id[bundle_id]
        except KeyError:
            raise ProgramError(f"ModuleExec references unknown bundle id {bundle_id}") from None

    @property
    def stream_length(self) -> int:
        return sum(ref.count for ref in self.stream)


# ---------------------------------------------------------------------------
# Concrete jobs produced by expansion
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CubeJob:
    """A batch of cube moves executed by the selection/arrangement unit."""

    steps: tuple[CubeStep, ...]
    tag: str = ""

    @property
    def elements(self) -> int:
        return sum(s.params.elements for s in self.steps)


@dataclass(frozen=True)
class LoadStreamJob:
    """Copy the next ``count`` parameter-stream elements into memory."""

    count: int
    dst: int
    tag: str = ""


@dataclass(frozen=True)
class GatherJob:
    """dst[i] = mem[indices[i]] for i < count (table-driven rearrangement)."""

    indices: tuple[int, ...]
    dst: int
    tag: str = ""

    @property
    def count(self) -> int:
        return len(self.indices)


@dataclass(frozen=True)
class VectorJob:
    """One elementwise/rowwise nonlinear pass over strided rows."""

    op: str  # softmax | layernorm | gelu
    rows: int
    length: int
    src: int
    dst: int
    row_stride: int
    elem_stride: int
    param_count: int = 0  # stream elements consumed (layernorm gamma+beta)
    f_in: int = 4
    f_out: int = 4
    f_param: int = 6
    eps: float = 1e-5
    tag: str = ""

    @property
    def elements(self) -> int:
        return self.rows * self.length


@dataclass(frozen=True)
class PreprocessJob:
    """Gather patch x patch blocks of the input image into token rows."""

    c: int
    h: int
    w: int
    patch: int
    src: int
    dst: int
    tag: str = ""

    @property
    def tokens(self) -> int:
        return (self.h // self.patch) * (self.w // self.patch)


Job = MatmulJob | CubeJob | LoadStreamJob | GatherJob | VectorJob | PreprocessJob


def job_param_count(job: Job) -> int:
    if isinstance(job, MatmulJob):
        return job.param_count
    if isinstance(job, VectorJob):
        return job.param_count
    if isinstance(job, LoadStreamJob):
        return job.count
    return 0


# ---------------------------------------------------------------------------
# Expansion
# ---------------------------------------------------------------------------


class _Resolver:
    def __init__(self, inv: ComponentInvocation, regs: RegisterFile):
        self.inv = inv
        self.regs = regs

    def __call__(self, name: str, default=None):
        if name in self.inv.bindings:
            return self.regs.read(self.inv.bindings[name])
        if name in self.inv.attrs:
            return self.inv.attrs[name]
        if default is not None:
            return default
        raise ProgramError(
            f"invocation {self.inv.kind.name}/{self.inv.op}: parameter {name!r} neither bound nor static"
        )


def _layout_strides(layout: str, m: int, k_or_n: int) -> tuple[int, int]:
    """Element strides (per row, per feature) of an (m, features) matrix view."""
    if layout == "feat":
        return 1, m          # feature-major map: all of feature f contiguous
    if layout == "row":
        return k_or_n, 1     # row-major: one row of features contiguous
    raise ProgramError(f"unknown matrix layout {layout!r}")


def _expand_matmul(inv, p) -> list[Job]:
    if inv.op == "linear":
        m, k, n = p("m"), p("k"), p("n")
        rs_m, rs_k = _layout_strides(str(p("in_layout", "feat")), m, k)
        ds_m, ds_n = _layout_strides(str(p("out_layout", "feat")), m, n)
        bias = str(p("bias", BIAS_NONE))
        return [MatmulJob(
            m=m, k=k, n=n, src=p("src"), rs_m=rs_m, rs_k=rs_k,
            dst=p("dst"), ds_m=ds_m, ds_n=ds_n,
            bias_kind=bias, out_scale=float(p("out_scale", 1.0)),
            accumulate=bool(p("accumulate", 0)),
            f_in=int(p("f_in", 4)), f_w=int(p("f_w", 6)),
            f_out=int(p("f_out", 4)), f_bias=int(p("f_bias", 6)),
            tag=str(inv.attrs.get("tag", "linear")),
        )]

    if inv.op in ("attn_scores", "attn_apply"):
        windows, heads = p("windows"), p("heads")
        c, window = p("c"), p("window")
        length = window * window
        if c % heads:
            raise ProgramError(f"attention: heads {heads} do not divide dim {c}")
        dh = c // heads
        win_src = p("win_src")
        scores = p("scores")
        jobs: list[Job] = []
        for wi in range(windows):
            wbase = win_src + wi * 3 * c * length
            for hd in range(heads):
                if inv.op == "attn_scores":
                    rel = bool(p("rel", 0))
                    jobs.append(MatmulJob(
                        m=length, k=dh, n=length,
                        src=wbase + hd * dh * length, rs_m=1, rs_k=length,
                        dst=scores + (wi * heads + hd) * length * length, ds_m=length, ds_n=1,
                        w_src=wbase + c * length + hd * dh * length, ws_k=length, ws_n=1,
                        bias_kind=BIAS_MEM if rel else BIAS_NONE,
                        b_src=(p("rel_src") + hd * length * length) if rel else -1,
                        bs_m=length, bs_n=1,
                        out_scale=1.0 / math.sqrt(dh),
                        f_in=int(p("f_in", 4)), f_w=int(p("f_in", 4)),
                        f_out=int(p("f_scores", 4)), f_bias=int(p("f_rel", 6)),
                        tag="attn_scores",
                    ))
                else:
                    jobs.append(MatmulJob(
                        m=length, k=length, n=dh,
                        src=scores + (wi * heads + hd) * length * length, rs_m=length, rs_k=1,
                        dst=p("dst") + wi * c * length + hd * dh * length, ds_m=1, ds_n=length,
                        w_src=wbase + 2 * c * length + hd * dh * length, ws_k=1, ws_n=length,
                        out_scale=1.0,
                        f_in=int(p("f_probs", 7)), f_w=int(p("f_in", 4)),
                        f_out=int(p("f_out", 4)),
                        tag="attn_apply",
                    ))
        return jobs

    raise ProgramError(f"unknown matmul op {inv.op!r}")


def _expand_datamove(inv, p) -> list[Job]:
    tag = inv.op
    if inv.op == "select":
        params = datamove.CubeSelectParams(
            mc=p("mc"), mh=p("mh"), mw=p("mw"), sc=p("sc"), sh=p("sh"), sw=p("sw"),
            fc=p("fc", 0), fh=p("fh", 0), fw=p("fw", 0),
            src_offset=p("src"), dst_offset=p("dst"),
        )
        return [CubeJob((CubeStep(params, StepMode.SELECT),), tag)]

    if inv.op in ("window_partition", "window_merge"):
        dims = (p("c"), p("h"), p("w"))
        build = (datamove.window_partition_plan if inv.op == "window_partition"
                 else datamove.window_merge_plan)
        plan = build(dims, p("window"), src=p("src"), dst=p("dst"))
        return [CubeJob(tuple(plan.steps), tag)]

    if inv.op == "cyclic_shift":
        shift = p("shift")
        if shift == 0:
            return []  # single-window maps compile the shift away
        plan = datamove.cyclic_shift_plan(
            (p("c"), p("h"), p("w")), shift,
            src=p("src"), dst=p("dst"), inverse=bool(p("inverse", 0)),
        )
        return [CubeJob(tuple(plan.steps), tag)]

    if inv.op == "patch_merge":
        plan = datamove.patch_merge_plan(
            (p("c"), p("h"), p("w")), src=p("src"), dst=p("dst"), scratch=p("scratch"),
        )
        return [CubeJob(tuple(plan.steps), tag)]

    if inv.op == "load_stream":
        return [LoadStreamJob(count=p("count"), dst=p("dst"), tag=tag)]

    if inv.op == "rel_bias_expand":
        heads, window = p("heads"), p("window")
        src, dst = p("src"), p("dst")
        table = datamove.relative_index_table(window)
        span = (2 * window - 1) ** 2
        idx = (np.arange(heads, dtype=np.int64)[:, None] * span + table[None, :]).reshape(-1)
        return [GatherJob(indices=tuple(int(i) + src for i in idx), dst=dst, tag=tag)]

    raise ProgramError(f"unknown datamove op {inv.op!r}")


def _expand_vector(inv, p, kind: ComponentKind) -> list[Job]:
    if kind == ComponentKind.SOFTMAX:
        rows, length = p("rows"), p("length")
        src = p("src")
        return [VectorJob(
            op="softmax", rows=rows, length=length, src=src, dst=p("dst", src),
            row_stride=length, elem_stride=1,
            f_in=int(p("f_in", 4)), f_out=int(p("f_out", 7)), tag="softmax",
        )]
    if kind == ComponentKind.LAYERNORM:
        rows, d = p("rows"), p("d")
        row_stride, elem_stride = _layout_strides(str(p("layout", "feat")), rows, d)
        return [VectorJob(
            op="layernorm", rows=rows, length=d, src=p("src"), dst=p("dst"),
            row_stride=row_stride, elem_stride=elem_stride,
            param_count=2 * d, f_in=int(p("f_in", 4)), f_out=int(p("f_out", 4)),
            f_param=int(p("f_param", 6)), eps=float(p("eps", 1e-5)), tag="layernorm",
        )]
    if kind == ComponentKind.GELU:
        count = p("count")
        src = p("src")
        return [VectorJob(
            op="gelu", rows=1, length=count, src=src, dst=p("dst", src),
            row_stride=0, elem_stride=1,
            f_in=int(p("f_in", 4)), f_out=int(p("f_out", 4)), tag="gelu",
        )]
    raise ProgramError(f"unexpected vector kind {kind}")


def expand(entry: BundleTableEntry, regs: RegisterFile) -> list[Job]:
    """Concretize a bundle entry against the register file.

    Returns fully resolved jobs with computed counts and addresses; raises
    ProgramError for uninitialized registers or malformed invocations.
    """
    jobs: list[Job] = []
    for inv in entry.invocations:
        p = _Resolver(inv, regs)
        if inv.kind == ComponentKind.MATMUL:
            jobs.extend(_expand_matmul(inv, p))
        elif inv.kind == ComponentKind.DATAMOVE:
            jobs.extend(_expand_datamove(inv, p))
        elif inv.kind == ComponentKind.PREPROCESS:
            jobs.append(PreprocessJob(
                c=p("c"), h=p("h"), w=p("w"), patch=p("patch", 4),
                src=p("src"), dst=p("dst"), tag="patch_gather",
            ))
        else:
            jobs.extend(_expand_vector(inv, p, inv.kind))
    return jobs


# ---------------------------------------------------------------------------
# Operation accounting (shared by the timing model and the lowering report)
# ---------------------------------------------------------------------------


@dataclass
class OpCounts:
    """Per-component work totals of a program or run."""

    macs: int = 0
    softmax_elements: int = 0
    layernorm_elements: int = 0
    gelu_elements: int = 0
    datamove_elements: int = 0
    preprocess_tokens: int = 0

    def add_job(self, job: Job):
        if isinstance(job, MatmulJob):
            self.macs += job.macs
        elif isinstance(job, VectorJob):
            if job.op == "softmax":
                self.softmax_elements += job.elements
            elif job.op == "layernorm":
                self.layernorm_elements += job.elements
            else:
                self.gelu_elements += job.elements
        elif isinstance(job, CubeJob):
            self.datamove_elements += job.elements
        elif isinstance(job, LoadStreamJob):
            self.datamove_elements += job.count
        elif isinstance(job, GatherJob):
            self.datamove_elements += job.count
        elif isinstance(job, PreprocessJob):
            self.preprocess_tokens += job.tokens

    def get(self, component: str) -> int:
        return {
            "matmul": self.macs,
            "softmax": self.softmax_elements,
            "layernorm": self.layernorm_elements,
            "gelu": self.gelu_elements,
            "datamove": self.datamove_elements,
            "preprocess": self.preprocess_tokens,
        }[component]


def static_counts(program: BundleProgram) -> OpCounts:
    """Op totals from a static walk of the instruction sequence."""
    regs = RegisterFile()
    counts = OpCounts()
    for ins in program.instructions:
        if ins.kind == InstrKind.PARAM_SET:
            regs.write(ins.reg, ins.value)
            continue
        for job in expand(program.bundle(ins.bundle_id), regs):
            counts.add_job(job)
    return counts


# ---------------------------------------------------------------------------
# Static validation
# ---------------------------------------------------------------------------


def _job_spans(job: Job) -> list[tuple[int, int]]:
    """Half-open address ranges a job touches (conservative hull per operand)."""
    spans = []
    if isinstance(job, MatmulJob):
        spans.append((job.src, job.src + (job.m - 1) * job.rs_m + (job.k - 1) * job.rs_k + 1))
        spans.append((job.dst, job.dst + (job.m - 1) * job.ds_m + (job.n - 1) * job.ds_n + 1))
        if not job.stream_weights:
            spans.append((job.w_src, job.w_src + (job.k - 1) * job.ws_k + (job.n - 1) * job.ws_n + 1))
        if job.bias_kind == BIAS_MEM:
            spans.append((job.b_src, job.b_src + (job.m - 1) * job.bs_m + (job.n - 1) * job.bs_n + 1))
    elif isinstance(job, CubeJob):
        for step in job.steps:
            spans.extend(step.params.spans(step.mode))
    elif isinstance(job, LoadStreamJob):
        spans.append((job.dst, job.dst + job.count))
    elif isinstance(job, GatherJob):
        if job.indices:
            spans.append((min(job.indices), max(job.indices) + 1))
        spans.append((job.dst, job.dst + job.count))
    elif isinstance(job, VectorJob):
        hi = (job.rows - 1) * job.row_stride + (job.length - 1) * job.elem_stride + 1
        spans.append((job.src, job.src + hi))
        spans.append((job.dst, job.dst + hi))
    elif isinstance(job, PreprocessJob):
        spans.append((job.src, job.src + job.c * job.h * job.w))
        spans.append((job.dst, job.dst + job.tokens * job.c * job.patch * job.patch))
    return spans


def validate(program: BundleProgram) -> list[str]:
    """Statically check program invariants; an empty list means runnable.

    Walks the instruction sequence once, tracking register writes, expanding
    every ModuleExec, accounting stream consumption and checking that all
    touched addresses stay inside the memory map.
    """
    diags: list[str] = []
    for a, b in program.memory_map.overlaps():
        diags.append(f"memory regions {a!r} and {b!r} overlap")
    mem_size = program.memory_map.total_size

    regs = RegisterFile()
    consumed = 0
    for idx, ins in enumerate(program.instructions):
        if ins.kind == InstrKind.PARAM_SET:
            if not 0 <= ins.reg < REGISTER_COUNT:
                diags.append(f"instruction {idx}: register {ins.reg} out of range")
            else:
                regs.write(ins.reg, ins.value)
            continue
        try:
            entry = program.bundle(ins.bundle_id)
        except ProgramError as e:
            diags.append(f"instruction {idx}: {e}")
            continue
        try:
            jobs = expand(entry, regs)
        except (ProgramError, ParamError) as e:
            diags.append(f"instruction {idx} (bundle {entry.name!r}): {e}")
            continue
        for job in jobs:
            consumed += job_param_count(job)
            for lo, hi in _job_spans(job):
                if lo < 0 or hi > mem_size:
                    diags.append(
                        f"instruction {idx} (bundle {entry.name!r}): job touches "
                        f"[{lo},{hi}) outside memory of {mem_size}"
                    )
                    break

    declared = program.stream_length
    if consumed != declared:
        diags.append(
            f"parameter stream accounting: jobs consume {consumed} elements, "
            f"stream layout declares {declared}"
        )
    return diags
