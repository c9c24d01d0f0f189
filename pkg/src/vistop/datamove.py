"""Data selection and data arrangement.

Windows, shifted windows and patch-merge layouts are never computed; they
are *materialized* by moving cubes of data around a flat address space so
that downstream compute consumes them with zero random access.

One move is described by nine parameters: the large cube (MC, MH, MW) the
data sits in, the small cube (SC, SH, SW) being moved, the offset of the
small cube inside the large one (FC, FH, FW), plus linear source and
destination offsets.  The same nine parameters drive three directions:

* ``select``   - gather a cube into a packed (SC, SH, SW) destination block;
  the triple loop is ``dst[i*SH*SW + j*SW + k] = src[(i+FC)*MH*MW + (j+FH)*MW
  + (k+FW)]`` with the respective linear offsets added on both sides.
* ``arrange``  - the mirror: scatter a packed block into a cube position.
* ``copy``     - cube region to cube region inside same-geometry maps (the
  destination position is carried entirely by the linear offset).

``select`` alone cannot express a cyclic roll in four moves (a packed
destination forces the output to be four contiguous runs, which a rolled
map is not), so the arrangement directions above are first-class.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from . import kernels
from .errors import ParamError

__all__ = [
    "CubeSelectParams",
    "StepMode",
    "CubeStep",
    "ArrangePlan",
    "select_cube",
    "execute_step",
    "window_partition_plan",
    "window_merge_plan",
    "cyclic_shift_plan",
    "patch_merge_plan",
    "relative_index_table",
]


@dataclass(frozen=True)
class CubeSelectParams:
    """The nine selection parameters plus linear source/destination offsets."""

    mc: int
    mh: int
    mw: int
    sc: int
    sh: int
    sw: int
    fc: int
    fh: int
    fw: int
    src_offset: int = 0
    dst_offset: int = 0

    def __post_init__(self):
        if min(self.sc, self.sh, self.sw, self.mc, self.mh, self.mw) < 1:
            raise ParamError("cube extents must be >= 1")
        if min(self.fc, self.fh, self.fw) < 0 or min(self.src_offset, self.dst_offset) < 0:
            raise ParamError("offsets must be >= 0")
        if self.sc + self.fc > self.mc or self.sh + self.fh > self.mh or self.sw + self.fw > self.mw:
            raise ParamError(
                f"small cube {(self.sc, self.sh, self.sw)} at offset "
                f"{(self.fc, self.fh, self.fw)} does not fit in {(self.mc, self.mh, self.mw)}"
            )

    @property
    def elements(self) -> int:
        return self.sc * self.sh * self.sw

    def _cube_span(self, base: int) -> tuple[int, int]:
        lo = base + self.fc * self.mh * self.mw + self.fh * self.mw + self.fw
        hi = lo + (self.sc - 1) * self.mh * self.mw + (self.sh - 1) * self.mw + self.sw
        return lo, hi

    def _packed_span(self, base: int) -> tuple[int, int]:
        return base, base + self.elements

    def spans(self, mode: "StepMode") -> tuple[tuple[int, int], tuple[int, int]]:
        """(src, dst) half-open address ranges touched by this step."""
        if mode == StepMode.SELECT:
            return self._cube_span(self.src_offset), self._packed_span(self.dst_offset)
        if mode == StepMode.ARRANGE:
            return self._packed_span(self.src_offset), self._cube_span(self.dst_offset)
        src = self._cube_span(self.src_offset)
        lo = self.dst_offset
        hi = lo + (self.sc - 1) * self.mh * self.mw + (self.sh - 1) * self.mw + self.sw
        return src, (lo, hi)


class StepMode(IntEnum):
    SELECT = kernels.MODE_SELECT
    ARRANGE = kernels.MODE_ARRANGE
    COPY = kernels.MODE_COPY


@dataclass(frozen=True)
class CubeStep:
    params: CubeSelectParams
    mode: StepMode = StepMode.SELECT


@dataclass
class ArrangePlan:
    """An ordered batch of cube moves executed back to back.

    Destinations of the steps in one plan are pairwise disjoint, so the steps
    may run in any order or in parallel without changing the result.
    """

    steps: list[CubeStep] = field(default_factory=list)

    @property
    def total_elements(self) -> int:
        return sum(s.params.elements for s in self.steps)

    def add(self, params: CubeSelectParams, mode: StepMode = StepMode.SELECT):
        self.steps.append(CubeStep(params, mode))


def _check_step(mem_size: int, step: CubeStep):
    (slo, shi), (dlo, dhi) = step.params.spans(step.mode)
    if shi > mem_size or dhi > mem_size:
        raise ParamError(
            f"cube move touches [{slo},{shi}) -> [{dlo},{dhi}) outside memory of {mem_size}"
        )
    if slo < dhi and dlo < shi:
        raise ParamError(
            f"source [{slo},{shi}) and destination [{dlo},{dhi}) overlap; "
            "the move order would make the result order-dependent"
        )


def execute_step(mem: np.ndarray, step: CubeStep):
    """Run one cube move on a flat buffer after bounds/overlap checks."""
    _check_step(mem.size, step)
    p = step.params
    kernels.cube_copy(
        mem, p.mc, p.mh, p.mw, p.sc, p.sh, p.sw, p.fc, p.fh, p.fw,
        p.src_offset, p.dst_offset, int(step.mode),
    )


def select_cube(mem: np.ndarray, p: CubeSelectParams):
    """Gather one small cube into a packed destination block (the base move)."""
    execute_step(mem, CubeStep(p, StepMode.SELECT))


def execute_plan(mem: np.ndarray, plan: ArrangePlan):
    for step in plan.steps:
        execute_step(mem, step)


# ---------------------------------------------------------------------------
# Plan builders
# ---------------------------------------------------------------------------


def window_partition_plan(dims: tuple[int, int, int], window: int,
                          src: int = 0, dst: int = 0) -> ArrangePlan:
    """Materialize every (C, window, window) block as a contiguous run.

    Destination order is row-major over windows, so the concatenated output
    is consumed by the stream matmul strictly sequentially.
    """
    c, h, w = dims
    if h % window or w % window:
        raise ParamError(f"map {h}x{w} not divisible by window {window}")
    plan = ArrangePlan()
    block = c * window * window
    wi = 0
    for wy in range(h // window):
        for wx in range(w // window):
            plan.add(CubeSelectParams(
                mc=c, mh=h, mw=w, sc=c, sh=window, sw=window,
                fc=0, fh=wy * window, fw=wx * window,
                src_offset=src, dst_offset=dst + wi * block,
            ))
            wi += 1
    return plan


def window_merge_plan(dims: tuple[int, int, int], window: int,
                      src: int = 0, dst: int = 0) -> ArrangePlan:
    """Inverse of :func:`window_partition_plan` (packed windows back to a map)."""
    c, h, w = dims
    if h % window or w % window:
        raise ParamError(f"map {h}x{w} not divisible by window {window}")
    plan = ArrangePlan()
    block = c * window * window
    wi = 0
    for wy in range(h // window):
        for wx in range(w // window):
            plan.add(CubeSelectParams(
                mc=c, mh=h, mw=w, sc=c, sh=window, sw=window,
                fc=0, fh=wy * window, fw=wx * window,
                src_offset=src + wi * block, dst_offset=dst,
            ), StepMode.ARRANGE)
            wi += 1
    return plan


def _roll_plan(dims, sh_h, sh_w, src, dst) -> ArrangePlan:
    """Cyclic roll by (-sh_h, -sh_w) as four wrap-around quadrant copies."""
    c, h, w = dims
    plan = ArrangePlan()
    quads = [
        # (SH, SW, FH, FW, dst row, dst col)
        (h - sh_h, w - sh_w, sh_h, sh_w, 0, 0),
        (h - sh_h, sh_w, sh_h, 0, 0, w - sh_w),
        (sh_h, w - sh_w, 0, sh_w, h - sh_h, 0),
        (sh_h, sh_w, 0, 0, h - sh_h, w - sh_w),
    ]
    for qh, qw, fh, fw, dr, dc in quads:
        if qh == 0 or qw == 0:
            continue
        plan.add(CubeSelectParams(
            mc=c, mh=h, mw=w, sc=c, sh=qh, sw=qw, fc=0, fh=fh, fw=fw,
            src_offset=src, dst_offset=dst + dr * w + dc,
        ), StepMode.COPY)
    return plan


def cyclic_shift_plan(dims: tuple[int, int, int], shift: int,
                      src: int = 0, dst: int = 0, inverse: bool = False) -> ArrangePlan:
    """Roll the map by (-shift, -shift) using the four wrap-around quadrants.

    ``inverse=True`` builds the plan of the opposite roll (+shift), used to
    restore the layout after shifted-window attention.
    """
    c, h, w = dims
    if shift <= 0:
        raise ParamError("shift must be > 0; a zero shift should simply be skipped")
    if shift >= h or shift >= w:
        raise ParamError(f"shift {shift} must be smaller than the map {h}x{w}")
    if inverse:
        return _roll_plan(dims, h - shift, w - shift, src, dst)
    return _roll_plan(dims, shift, shift, src, dst)


def patch_merge_plan(dims: tuple[int, int, int], src: int = 0, dst: int = 0,
                     scratch: int | None = None) -> ArrangePlan:
    """Gather the four parity sub-grids of a (C, H, W) map into (4C, H/2, W/2).

    Channel order of the output is (even-row even-col, odd-row even-col,
    even-row odd-col, odd-row odd-col).  Runs in two passes: the map is first
    split by column parity into a scratch area (reading the map as a
    (C*H, W/2, 2) cube), then each half is split by row parity (reading it as
    a (C, H/2, W) cube).  Six selections total.
    """
    c, h, w = dims
    if h % 2 or w % 2:
        raise ParamError(f"patch merge needs even H and W, got {h}x{w}")
    n = c * h * w
    if scratch is None:
        scratch = dst + n
    half = n // 2
    quarter = n // 4
    plan = ArrangePlan()
    # pass 1: column parity -> scratch (even cols first, then odd cols)
    for p in (0, 1):
        plan.add(CubeSelectParams(
            mc=c * h, mh=w // 2, mw=2, sc=c * h, sh=w // 2, sw=1,
            fc=0, fh=0, fw=p, src_offset=src, dst_offset=scratch + p * half,
        ))
    # pass 2: row parity within each half -> (4C, H/2, W/2) at dst
    for p in (0, 1):
        for q in (0, 1):
            plan.add(CubeSelectParams(
                mc=c, mh=h // 2, mw=w, sc=c, sh=h // 2, sw=w // 2,
                fc=0, fh=0, fw=q * (w // 2),
                src_offset=scratch + p * half,
                dst_offset=dst + (2 * p + q) * quarter,
            ))
    return plan


def relative_index_table(window: int) -> np.ndarray:
    """Flat index into the (2w-1)^2 relative-offset table for each token pair.

    Entry [i*window^2 + j] is the table slot of the offset between tokens i
    and j of a window, with i, j in row-major window order.
    """
    n = window * window
    ys, xs = np.divmod(np.arange(n), window)
    dy = ys[:, None] - ys[None, :] + window - 1
    dx = xs[:, None] - xs[None, :] + window - 1
    return (dy * (2 * window - 1) + dx).astype(np.int64).reshape(-1)
