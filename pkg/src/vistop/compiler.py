"""Model-to-program lowering.

A declarative window-attention transformer description (the model layer) is
lowered through bundle selection (the container layer) into a validated
instruction-bundle program (the component layer).  The compiler owns all the
geometry: window counts, shift quadrants, selection parameters and storage
addresses are computed here and bound to registers via ParamSet
instructions, so one bundle-table entry per block shape serves every stage.

Block structure per transformer block: LN -> attention -> residual -> LN ->
MLP(dim -> ratio*dim -> dim with Gelu) -> residual.  Residual adds are
realized by the closing matmul of each half accumulating into its
destination.  Between stages a patch-merge bundle gathers 2x2 neighborhoods
and a reduction matmul folds 4C channels to 2C.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import GeometryError, LoweringError, ParamError, StreamError
from .isa import (
    BundleProgram,
    BundleTableEntry,
    ComponentInvocation,
    ComponentKind,
    Instruction,
    MemoryMap,
    MemoryRegion,
    StreamTensorRef,
)
from .store import ManifestEntry, WeightManifest

PROBS_FRAC = 7  # attention probabilities live in [0, 1]; use the finest split

_CONFIG_FIELDS = {
    "image_size", "in_channels", "patch_size", "window_size", "shift_size",
    "depths", "dims", "heads", "mlp_ratio", "num_classes",
    "relative_position_bias", "final_norm",
}


@dataclass(frozen=True)
class ModelConfig:
    """Hyper-parameters of one window-attention transformer model."""

    image_size: int = 224
    in_channels: int = 3
    patch_size: int = 4
    window_size: int = 7
    shift_size: int = 3
    depths: tuple[int, ...] = (2, 2, 6, 2)
    dims: tuple[int, ...] = (96, 192, 384, 768)
    heads: tuple[int, ...] = (3, 6, 12, 24)
    mlp_ratio: int = 4
    num_classes: int = 1000
    relative_position_bias: bool = True
    final_norm: bool = True

    def __post_init__(self):
        object.__setattr__(self, "depths", tuple(int(d) for d in self.depths))
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "heads", tuple(int(h) for h in self.heads))
        if not (len(self.depths) == len(self.dims) == len(self.heads)):
            raise GeometryError("depths, dims and heads must have equal length")
        if not self.depths:
            raise GeometryError("at least one stage required")
        if self.image_size % self.patch_size:
            raise GeometryError(
                f"image {self.image_size} not divisible by patch {self.patch_size}")
        if not 0 <= self.shift_size < self.window_size:
            raise GeometryError("shift size must be in [0, window)")
        if any(d < 1 for d in self.depths) or any(c < 1 for c in self.dims):
            raise GeometryError("stage depths and dims must be >= 1")
        for s, (c, h) in enumerate(zip(self.dims, self.heads)):
            if c % h:
                raise GeometryError(f"stage {s}: heads {h} do not divide dim {c}")
        for s in range(len(self.depths)):
            side = self.stage_side(s)
            if side < 1 or side % self.window_size:
                raise GeometryError(
                    f"stage {s}: feature map {side}x{side} not divisible by "
                    f"window {self.window_size}")
            if s + 1 < len(self.depths) and side % 2:
                raise GeometryError(f"stage {s}: map side {side} must be even to merge")

    @property
    def n_stages(self) -> int:
        return len(self.depths)

    def stage_side(self, stage: int) -> int:
        return self.image_size // self.patch_size // (1 << stage)

    def stage_shift(self, stage: int) -> int:
        """Shift actually applied: suppressed on single-window maps, where a
        roll followed by its inverse around window attention changes nothing."""
        if self.stage_side(stage) <= self.window_size:
            return 0
        return self.shift_size

    @property
    def patch_features(self) -> int:
        return self.in_channels * self.patch_size * self.patch_size

    @classmethod
    def from_json(cls, path: str) -> "ModelConfig":
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
        unknown = set(doc) - _CONFIG_FIELDS
        if unknown:
            raise LoweringError(f"unknown config fields: {sorted(unknown)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in doc.items()})

    def to_json(self) -> str:
        return json.dumps({
            "image_size": self.image_size,
            "in_channels": self.in_channels,
            "patch_size": self.patch_size,
            "window_size": self.window_size,
            "shift_size": self.shift_size,
            "depths": list(self.depths),
            "dims": list(self.dims),
            "heads": list(self.heads),
            "mlp_ratio": self.mlp_ratio,
            "num_classes": self.num_classes,
            "relative_position_bias": self.relative_position_bias,
            "final_norm": self.final_norm,
        }, indent=2)


def swin_tiny_config() -> ModelConfig:
    """The stock 4-stage tiny model this simulator ships with."""
    return ModelConfig()


def geometry(config: ModelConfig, stage: int) -> tuple[int, int, int, int]:
    """(H, W, C, window count) of one stage's feature map."""
    if not 0 <= stage < config.n_stages:
        raise GeometryError(f"stage {stage} out of range")
    side = config.stage_side(stage)
    wins = (side // config.window_size) ** 2
    return side, side, config.dims[stage], wins


# ---------------------------------------------------------------------------
# Tensor naming and the expected shape set
# ---------------------------------------------------------------------------


def expected_tensors(config: ModelConfig, frac_w: int = 6, frac_v: int = 6,
                     frac_pool: int = 7) -> list[tuple[str, str, tuple[int, ...], int]]:
    """Every (name, role, dims, frac) the model needs, in first-use order.

    Weight matrices are (K, N): outputs are input @ W.  The average pool is a
    constant column of 1/token-count quantized like a weight.
    """
    out: list[tuple[str, str, tuple[int, ...], int]] = []
    c0 = config.dims[0]
    out.append(("patch_embed.weight", "weight", (config.patch_features, c0), frac_w))
    out.append(("patch_embed.bias", "bias", (c0,), frac_v))
    out.append(("patch_embed.norm.gamma", "gamma", (c0,), frac_v))
    out.append(("patch_embed.norm.beta", "beta", (c0,), frac_v))
    span = (2 * config.window_size - 1) ** 2
    for s in range(config.n_stages):
        c, h = config.dims[s], config.heads[s]
        for b in range(config.depths[s]):
            pre = f"stage{s}.block{b}."
            out.append((pre + "norm1.gamma", "gamma", (c,), frac_v))
            out.append((pre + "norm1.beta", "beta", (c,), frac_v))
            out.append((pre + "attn.qkv.weight", "weight", (c, 3 * c), frac_w))
            out.append((pre + "attn.qkv.bias", "bias", (3 * c,), frac_v))
            if config.relative_position_bias:
                out.append((pre + "attn.rel_bias", "rel_bias", (h, span), frac_v))
            out.append((pre + "attn.proj.weight", "weight", (c, c), frac_w))
            out.append((pre + "attn.proj.bias", "bias", (c,), frac_v))
            out.append((pre + "norm2.gamma", "gamma", (c,), frac_v))
            out.append((pre + "norm2.beta", "beta", (c,), frac_v))
            out.append((pre + "mlp.fc1.weight", "weight", (c, config.mlp_ratio * c), frac_w))
            out.append((pre + "mlp.fc1.bias", "bias", (config.mlp_ratio * c,), frac_v))
            out.append((pre + "mlp.fc2.weight", "weight", (config.mlp_ratio * c, c), frac_w))
            out.append((pre + "mlp.fc2.bias", "bias", (c,), frac_v))
        if s + 1 < config.n_stages:
            pre = f"merge{s}."
            out.append((pre + "norm.gamma", "gamma", (4 * c,), frac_v))
            out.append((pre + "norm.beta", "beta", (4 * c,), frac_v))
            out.append((pre + "reduce.weight", "weight", (4 * c, config.dims[s + 1]), frac_w))
    c_last = config.dims[-1]
    tokens_last = config.stage_side(config.n_stages - 1) ** 2
    if config.final_norm:
        out.append(("head.norm.gamma", "gamma", (c_last,), frac_v))
        out.append(("head.norm.beta", "beta", (c_last,), frac_v))
    out.append(("head.pool", "const", (tokens_last, 1), frac_pool))
    out.append(("head.fc.weight", "weight", (c_last, config.num_classes), frac_w))
    out.append(("head.fc.bias", "bias", (config.num_classes,), frac_v))
    return out


# ---------------------------------------------------------------------------
# Register conventions (geometry is re-bound per stage; bases set once)
# ---------------------------------------------------------------------------

R_C, R_H, R_W, R_HEADS, R_SHIFT, R_WINDOW = 0, 1, 2, 3, 4, 5
R_TOKENS, R_WINDOWS, R_C3, R_HIDDEN = 6, 7, 8, 9
R_RELCOUNT, R_SMROWS, R_SMLEN, R_GELU = 10, 11, 12, 13
R_MC, R_MH, R_MW, R_MTOK, R_M4C, R_M2C = 14, 15, 16, 17, 18, 19
R_HTOK, R_HC, R_NCLS, R_EMBK, R_EMBTOK = 20, 21, 22, 23, 24
R_IMGC, R_IMGH, R_IMGW = 25, 26, 27

R_IMAGE, R_TOKBUF, R_ACT, R_LN, R_QKV, R_QKVS = 32, 33, 34, 35, 36, 37
R_WIN, R_SCORES, R_ATTN, R_AMAP, R_AMAPS = 38, 39, 40, 41, 42
R_MLP, R_RELRAW, R_RELEXP, R_MTMP, R_MCAT = 43, 44, 45, 46, 47
R_POOL, R_LOGITS = 48, 49

B_PREPROCESS, B_WMSA, B_SWMSA, B_MERGE, B_HEAD = 0, 1, 2, 3, 4

ATTENTION_BUNDLES = {B_WMSA: "wmsa_block", B_SWMSA: "swmsa_block"}


@dataclass
class LoweringReport:
    """What the lowering produced, for inspection and golden-file tests."""

    bundle_execs: dict[str, int]
    total_module_execs: int
    datamove_elements: int
    macs: int
    total_parameters: int
    stage_geometry: list[tuple[int, int, int, int, int]]  # stage, H, W, C, windows

    def format(self) -> str:
        lines = ["lowering report", "  bundle executions:"]
        for name, count in self.bundle_execs.items():
            lines.append(f"    {name:<16} {count}")
        lines.append(f"  module execs      {self.total_module_execs}")
        lines.append(f"  datamove elements {self.datamove_elements}")
        lines.append(f"  matmul MACs       {self.macs}")
        lines.append(f"  stream parameters {self.total_parameters}")
        lines.append("  stage geometry (stage H W C windows):")
        for s, h, w, c, wins in self.stage_geometry:
            lines.append(f"    {s} {h} {w} {c} {wins}")
        return "\n".join(lines) + "\n"


def _check_manifest(config: ModelConfig, manifest: WeightManifest) -> None:
    for name, role, dims, _frac in expected_tensors(config):
        try:
            entry = manifest.get(name)
        except ParamError:
            raise LoweringError(f"manifest is missing tensor {name!r}") from None
        if tuple(entry.dims) != tuple(dims):
            raise LoweringError(
                f"tensor {name!r}: manifest dims {tuple(entry.dims)} do not match "
                f"the configured {tuple(dims)}")
        if entry.role != role:
            raise LoweringError(f"tensor {name!r}: role {entry.role!r}, expected {role!r}")


def _build_memory_map(config: ModelConfig, act_frac: int) -> MemoryMap:
    img = config.in_channels * config.image_size ** 2
    tok0 = (config.image_size // config.patch_size) ** 2
    tokens = tok0 * config.patch_features
    act = max(config.dims[s] * config.stage_side(s) ** 2 for s in range(config.n_stages))
    win2 = config.window_size ** 2
    scores = max(
        geometry(config, s)[3] * config.heads[s] * win2 * win2
        for s in range(config.n_stages))
    span = (2 * config.window_size - 1) ** 2
    rel_raw = max(config.heads) * span
    rel_exp = max(config.heads) * win2 * win2
    sizes = [
        ("image", img, act_frac),
        ("tokens", tokens, act_frac),
        ("act", act, act_frac),
        ("ln", act, act_frac),
        ("qkv", 3 * act, act_frac),
        ("qkv_shift", 3 * act, act_frac),
        ("windows", 3 * act, act_frac),
        ("scores", scores, act_frac),
        ("attn", act, act_frac),
        ("attn_map", act, act_frac),
        ("attn_unshift", act, act_frac),
        ("mlp", config.mlp_ratio * act, act_frac),
        ("rel_raw", rel_raw, 6),
        ("rel_exp", rel_exp, 6),
        ("merge_tmp", act, act_frac),
        ("merge_cat", act, act_frac),
        ("pool", config.dims[-1], act_frac),
        ("logits", config.num_classes, act_frac),
    ]
    regions, base = [], 0
    for name, size, frac in sizes:
        regions.append(MemoryRegion(name, base, size, frac))
        base += size
    return MemoryMap(regions)


def _fr(manifest: WeightManifest, name: str) -> int:
    return manifest.get(name).frac_bits


def _build_bundles(config: ModelConfig, manifest: WeightManifest,
                   act_frac: int) -> list[BundleTableEntry]:
    """The five bundle-table entries; geometry comes from registers."""
    fa = act_frac
    inv = ComponentInvocation
    mm, dm = ComponentKind.MATMUL, ComponentKind.DATAMOVE
    ln, sm, gl, pp = (ComponentKind.LAYERNORM, ComponentKind.SOFTMAX,
                      ComponentKind.GELU, ComponentKind.PREPROCESS)

    def linear(tag, m, k, n, src, dst, f_w, f_b=None, bias="stream",
               accumulate=0, in_layout="feat", out_layout="feat", n_attr=None, m_attr=None):
        bindings = {"k": k, "src": src, "dst": dst}
        attrs = {"tag": tag, "bias": bias, "accumulate": accumulate,
                 "in_layout": in_layout, "out_layout": out_layout,
                 "f_in": fa, "f_w": f_w, "f_out": fa,
                 "f_bias": f_b if f_b is not None else f_w}
        if m_attr is None:
            bindings["m"] = m
        else:
            attrs["m"] = m_attr
        if n_attr is None:
            bindings["n"] = n
        else:
            attrs["n"] = n_attr
        return inv(mm, "linear", bindings, attrs)

    def norm(src, dst):
        return inv(ln, "layernorm", {"rows": R_TOKENS, "d": R_C, "src": src, "dst": dst},
                   {"layout": "feat", "f_in": fa, "f_out": fa, "eps": 1e-5})

    def block_invocations(shifted: bool) -> tuple[ComponentInvocation, ...]:
        frac_w = _fr(manifest, "stage0.block0.attn.qkv.weight")
        frac_v = _fr(manifest, "stage0.block0.attn.qkv.bias")
        seq = [
            norm(R_ACT, R_LN),
            linear("qkv", R_TOKENS, R_C, R_C3, R_LN, R_QKV, frac_w, frac_v),
        ]
        if config.relative_position_bias:
            frac_rel = _fr(manifest, "stage0.block0.attn.rel_bias")
            seq.append(inv(dm, "load_stream", {"count": R_RELCOUNT, "dst": R_RELRAW}, {}))
            seq.append(inv(dm, "rel_bias_expand",
                           {"heads": R_HEADS, "window": R_WINDOW, "src": R_RELRAW, "dst": R_RELEXP}, {}))
        else:
            frac_rel = 6
        if shifted:
            seq.append(inv(dm, "cyclic_shift",
                           {"c": R_C3, "h": R_H, "w": R_W, "shift": R_SHIFT,
                            "src": R_QKV, "dst": R_QKVS}, {"inverse": 0}))
        part_src = R_QKVS if shifted else R_QKV
        seq.append(inv(dm, "window_partition",
                       {"c": R_C3, "h": R_H, "w": R_W, "window": R_WINDOW,
                        "src": part_src, "dst": R_WIN}, {}))
        scores_bind = {"windows": R_WINDOWS, "heads": R_HEADS, "c": R_C, "window": R_WINDOW,
                       "win_src": R_WIN, "scores": R_SCORES}
        if config.relative_position_bias:
            scores_bind["rel_src"] = R_RELEXP
        seq.append(inv(mm, "attn_scores", scores_bind,
                       {"rel": int(config.relative_position_bias),
                        "f_in": fa, "f_scores": fa, "f_rel": frac_rel}))
        seq.append(inv(sm, "softmax", {"rows": R_SMROWS, "length": R_SMLEN, "src": R_SCORES},
                       {"f_in": fa, "f_out": PROBS_FRAC}))
        seq.append(inv(mm, "attn_apply",
                       {"windows": R_WINDOWS, "heads": R_HEADS, "c": R_C, "window": R_WINDOW,
                        "win_src": R_WIN, "scores": R_SCORES, "dst": R_ATTN},
                       {"f_probs": PROBS_FRAC, "f_in": fa, "f_out": fa}))
        seq.append(inv(dm, "window_merge",
                       {"c": R_C, "h": R_H, "w": R_W, "window": R_WINDOW,
                        "src": R_ATTN, "dst": R_AMAP}, {}))
        if shifted:
            seq.append(inv(dm, "cyclic_shift",
                           {"c": R_C, "h": R_H, "w": R_W, "shift": R_SHIFT,
                            "src": R_AMAP, "dst": R_AMAPS}, {"inverse": 1}))
        proj_src = R_AMAPS if shifted else R_AMAP
        seq.extend([
            linear("proj", R_TOKENS, R_C, R_C, proj_src, R_ACT, frac_w, frac_v, accumulate=1),
            norm(R_ACT, R_LN),
            linear("mlp_fc1", R_TOKENS, R_C, R_HIDDEN, R_LN, R_MLP, frac_w, frac_v),
            inv(gl, "gelu", {"count": R_GELU, "src": R_MLP}, {"f_in": fa, "f_out": fa}),
            linear("mlp_fc2", R_TOKENS, R_HIDDEN, R_C, R_MLP, R_ACT, frac_w, frac_v, accumulate=1),
        ])
        return tuple(seq)

    frac_w = _fr(manifest, "patch_embed.weight")
    frac_v = _fr(manifest, "patch_embed.bias")
    preprocess = BundleTableEntry(B_PREPROCESS, "preprocess", (
        inv(pp, "patch_gather",
            {"c": R_IMGC, "h": R_IMGH, "w": R_IMGW, "src": R_IMAGE, "dst": R_TOKBUF},
            {"patch": config.patch_size}),
        linear("embed", R_EMBTOK, R_EMBK, R_C, R_TOKBUF, R_ACT, frac_w, frac_v, in_layout="row"),
        norm(R_ACT, R_ACT),
    ))

    merge_fw = _fr(manifest, "merge0.reduce.weight") if config.n_stages > 1 else 6
    merge = BundleTableEntry(B_MERGE, "patch_merge", (
        inv(dm, "patch_merge",
            {"c": R_MC, "h": R_MH, "w": R_MW, "src": R_ACT, "dst": R_MCAT, "scratch": R_MTMP}, {}),
        inv(ln, "layernorm", {"rows": R_MTOK, "d": R_M4C, "src": R_MCAT, "dst": R_MCAT},
            {"layout": "feat", "f_in": fa, "f_out": fa, "eps": 1e-5}),
        linear("reduce", R_MTOK, R_M4C, R_M2C, R_MCAT, R_ACT, merge_fw, bias="none"),
    ))

    head_seq = []
    if config.final_norm:
        head_seq.append(inv(ln, "layernorm",
                            {"rows": R_HTOK, "d": R_HC, "src": R_ACT, "dst": R_ACT},
                            {"layout": "feat", "f_in": fa, "f_out": fa, "eps": 1e-5}))
    head_seq.append(linear("pool", R_HC, R_HTOK, None, R_ACT, R_POOL,
                           _fr(manifest, "head.pool"), bias="none",
                           in_layout="row", out_layout="row", n_attr=1))
    head_seq.append(linear("classifier", None, R_HC, R_NCLS, R_POOL, R_LOGITS,
                           _fr(manifest, "head.fc.weight"), _fr(manifest, "head.fc.bias"),
                           in_layout="row", out_layout="row", m_attr=1))
    head = BundleTableEntry(B_HEAD, "head", tuple(head_seq))

    return [
        preprocess,
        BundleTableEntry(B_WMSA, "wmsa_block", block_invocations(False)),
        BundleTableEntry(B_SWMSA, "swmsa_block", block_invocations(True)),
        merge,
        head,
    ]


def _stage_paramsets(config: ModelConfig, stage: int, mem: MemoryMap) -> list[Instruction]:
    h, w, c, wins = geometry(config, stage)
    shift = config.stage_shift(stage)
    win2 = config.window_size ** 2
    ps = Instruction.param_set
    sets = [
        ps(R_C, c), ps(R_H, h), ps(R_W, w),
        ps(R_HEADS, config.heads[stage]), ps(R_SHIFT, shift),
        ps(R_TOKENS, h * w), ps(R_WINDOWS, wins),
        ps(R_C3, 3 * c), ps(R_HIDDEN, config.mlp_ratio * c),
        ps(R_RELCOUNT, config.heads[stage] * (2 * config.window_size - 1) ** 2),
        ps(R_SMROWS, wins * config.heads[stage] * win2), ps(R_SMLEN, win2),
        ps(R_GELU, config.mlp_ratio * c * h * w),
        # shift scratch aliases back to the unshifted buffers when no roll runs
        ps(R_QKVS, mem.region("qkv_shift" if shift else "qkv").base),
        ps(R_AMAPS, mem.region("attn_unshift" if shift else "attn_map").base),
    ]
    return sets


def lower(config: ModelConfig, manifest: WeightManifest,
          act_frac: int = 4) -> tuple[BundleProgram, LoweringReport]:
    """Lower a model configuration against its weight manifest.

    Emits, in order: the pre-process bundle, each stage's blocks alternating
    plain and shifted window attention (starting plain), a patch-merge bundle
    between stages, and the head (final norm, average pool, classifier).
    """
    _check_manifest(config, manifest)
    mem = _build_memory_map(config, act_frac)
    bundles = _build_bundles(config, manifest, act_frac)

    ps = Instruction.param_set
    mex = Instruction.module_exec
    instructions: list[Instruction] = [
        ps(R_WINDOW, config.window_size),
        ps(R_IMGC, config.in_channels), ps(R_IMGH, config.image_size), ps(R_IMGW, config.image_size),
        ps(R_EMBK, config.patch_features),
        ps(R_EMBTOK, (config.image_size // config.patch_size) ** 2),
    ]
    for reg, region in [
        (R_IMAGE, "image"), (R_TOKBUF, "tokens"), (R_ACT, "act"), (R_LN, "ln"),
        (R_QKV, "qkv"), (R_WIN, "windows"), (R_SCORES, "scores"), (R_ATTN, "attn"),
        (R_AMAP, "attn_map"), (R_MLP, "mlp"), (R_RELRAW, "rel_raw"),
        (R_RELEXP, "rel_exp"), (R_MTMP, "merge_tmp"), (R_MCAT, "merge_cat"),
        (R_POOL, "pool"), (R_LOGITS, "logits"),
    ]:
        instructions.append(ps(reg, mem.region(region).base))

    stream_names: list[str] = []

    def use(*names: str):
        for name in names:
            if name in stream_names:
                raise StreamError(f"tensor {name!r} referenced twice in the stream")
            stream_names.append(name)

    instructions.extend(_stage_paramsets(config, 0, mem))
    instructions.append(mex(B_PREPROCESS))
    use("patch_embed.weight", "patch_embed.bias",
        "patch_embed.norm.gamma", "patch_embed.norm.beta")

    for s in range(config.n_stages):
        if s > 0:
            instructions.extend(_stage_paramsets(config, s, mem))
        for b in range(config.depths[s]):
            shifted = b % 2 == 1  # alternate plain, shifted, plain, ...
            instructions.append(mex(B_SWMSA if shifted else B_WMSA))
            pre = f"stage{s}.block{b}."
            use(pre + "norm1.gamma", pre + "norm1.beta",
                pre + "attn.qkv.weight", pre + "attn.qkv.bias")
            if config.relative_position_bias:
                use(pre + "attn.rel_bias")
            use(pre + "attn.proj.weight", pre + "attn.proj.bias",
                pre + "norm2.gamma", pre + "norm2.beta",
                pre + "mlp.fc1.weight", pre + "mlp.fc1.bias",
                pre + "mlp.fc2.weight", pre + "mlp.fc2.bias")
        if s + 1 < config.n_stages:
            h, w, c, _ = geometry(config, s)
            instructions.extend([
                ps(R_MC, c), ps(R_MH, h), ps(R_MW, w),
                ps(R_MTOK, (h // 2) * (w // 2)),
                ps(R_M4C, 4 * c), ps(R_M2C, config.dims[s + 1]),
            ])
            instructions.append(mex(B_MERGE))
            use(f"merge{s}.norm.gamma", f"merge{s}.norm.beta", f"merge{s}.reduce.weight")

    instructions.extend([
        ps(R_HTOK, config.stage_side(config.n_stages - 1) ** 2),
        ps(R_HC, config.dims[-1]),
        ps(R_NCLS, config.num_classes),
    ])
    instructions.append(mex(B_HEAD))
    if config.final_norm:
        use("head.norm.gamma", "head.norm.beta")
    use("head.pool", "head.fc.weight", "head.fc.bias")

    stream = layout_parameter_stream(stream_names, manifest)

    meta = {
        "image_c": config.in_channels, "image_h": config.image_size,
        "image_w": config.image_size, "patch": config.patch_size,
        "window": config.window_size, "act_frac": act_frac,
        "num_classes": config.num_classes,
        "rel_bias": int(config.relative_position_bias),
    }
    program = BundleProgram(mem, bundles, instructions, stream, meta)
    report = _build_report(config, program, manifest)
    return program, report


def layout_parameter_stream(order: list[str], manifest: WeightManifest) -> list[StreamTensorRef]:
    """Serialize tensors in first-use order, weight matrices k-major per column."""
    seen = set()
    refs = []
    for name in order:
        if name in seen:
            raise StreamError(f"tensor {name!r} referenced twice in the stream")
        seen.add(name)
        entry = manifest.get(name)
        if entry.role in ("weight", "const") and len(entry.dims) == 2:
            refs.append(StreamTensorRef(name, entry.count, entry.frac_bits,
                                        "colmajor", entry.dims[0], entry.dims[1]))
        else:
            refs.append(StreamTensorRef(name, entry.count, entry.frac_bits))
    return refs


def _build_report(config: ModelConfig, program: BundleProgram,
                  manifest: WeightManifest) -> LoweringReport:
    from .isa import InstrKind, static_counts

    counts = static_counts(program)
    execs: dict[str, int] = {}
    for ins in program.instructions:
        if ins.kind == InstrKind.MODULE_EXEC:
            name = program.bundle(ins.bundle_id).name
            execs[name] = execs.get(name, 0) + 1
    return LoweringReport(
        bundle_execs=execs,
        total_module_execs=sum(execs.values()),
        datamove_elements=counts.datamove_elements,
        macs=counts.macs,
        total_parameters=program.stream_length,
        stage_geometry=[(s, *geometry(config, s)) for s in range(config.n_stages)],
    )


# ---------------------------------------------------------------------------
# Weight synthesis (packed random weights matching the expected shape set)
# ---------------------------------------------------------------------------


def synthesize_weights(config: ModelConfig, out_dir: str, seed: int = 0,
                       frac_w: int = 6, frac_v: int = 6,
                       weight_sigma: float = 0.4) -> WeightManifest:
    """Write a packed random weight set plus manifest for the given config.

    Weights are drawn at trained-network-like magnitudes (std
    ``weight_sigma / sqrt(K)`` per matrix), norms start near identity, the
    pool constant is the exact 1/token-count column.  Everything is stored
    as int8 codes at each tensor's fraction split.
    """
    import os

    from . import kernels

    rng = np.random.default_rng(seed)
    entries = []
    blobs = []
    offset = 0
    for name, role, dims, frac in expected_tensors(config, frac_w, frac_v):
        n = int(np.prod(dims))
        if role == "weight":
            vals = rng.normal(0.0, weight_sigma / np.sqrt(dims[0]), size=n)
        elif role == "gamma":
            vals = rng.normal(1.0, 0.05, size=n)
        elif role == "const":
            vals = np.full(n, 1.0 / dims[0])
        else:  # bias, beta, rel_bias
            vals = rng.normal(0.0, 0.05, size=n)
        codes, _ = kernels.quantize_array(vals, frac)
        entries.append(ManifestEntry(name, role, dims, frac, "weights.bin", offset))
        blobs.append(codes.tobytes())
        offset += n

    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "weights.bin"), "wb") as f:
        for blob in blobs:
            f.write(blob)
    manifest = WeightManifest(entries, base_dir=out_dir)
    manifest.save(os.path.join(out_dir, "manifest.json"))
    return manifest
