"""Monolithic dense-math reference model.

Executes the same window-attention transformer as the compiled programs, but
with plain token-major tensor math and none of the simulator's machinery: no
bundles, no linearized memory, no cube moves.  Used to check end-to-end
float-mode correctness of the whole lowering pipeline, so it deliberately
shares no code with the datamove/compute/runtime modules.
"""

from __future__ import annotations

import numpy as np

from .compiler import ModelConfig

EPS = 1e-5


def _layer_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray) -> np.ndarray:
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)  # centered two-pass variance
    return gamma * (x - mean) / np.sqrt(var + EPS) + beta


def _softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) * (x + 0.044715 * x ** 3)))


def _patch_tokens(image: np.ndarray, patch: int) -> np.ndarray:
    """(C, H, W) image to (tokens, C*patch*patch) rows, channel-major features."""
    c, h, w = image.shape
    grid_h, grid_w = h // patch, w // patch
    tokens = np.empty((grid_h * grid_w, c * patch * patch))
    t = 0
    for ph in range(grid_h):
        for pw in range(grid_w):
            block = image[:, ph * patch:(ph + 1) * patch, pw * patch:(pw + 1) * patch]
            tokens[t] = block.reshape(-1)
            t += 1
    return tokens


def _rel_bias_matrix(table: np.ndarray, window: int) -> np.ndarray:
    """(heads, span) parameter table to per-head (L, L) bias matrices."""
    heads = table.shape[0]
    length = window * window
    bias = np.empty((heads, length, length))
    for i in range(length):
        yi, xi = divmod(i, window)
        for j in range(length):
            yj, xj = divmod(j, window)
            slot = (yi - yj + window - 1) * (2 * window - 1) + (xi - xj + window - 1)
            bias[:, i, j] = table[:, slot]
    return bias


def _windows(grid: np.ndarray, window: int) -> np.ndarray:
    """(H, W, C) grid to (n_windows, window*window, C), row-major over windows."""
    h, w, c = grid.shape
    x = grid.reshape(h // window, window, w // window, window, c)
    return x.transpose(0, 2, 1, 3, 4).reshape(-1, window * window, c)


def _unwindows(wins: np.ndarray, h: int, w: int, window: int) -> np.ndarray:
    c = wins.shape[-1]
    x = wins.reshape(h // window, w // window, window, window, c)
    return x.transpose(0, 2, 1, 3, 4).reshape(h, w, c)


def _attention(tokens: np.ndarray, w_qkv, b_qkv, w_proj, b_proj, heads: int,
               rel_bias: np.ndarray | None) -> np.ndarray:
    length, dim = tokens.shape
    dh = dim // heads
    qkv = tokens @ w_qkv + b_qkv
    q, k, v = np.split(qkv, 3, axis=-1)
    parts = []
    for hd in range(heads):
        sl = slice(hd * dh, (hd + 1) * dh)
        scores = q[:, sl] @ k[:, sl].T / np.sqrt(dh)
        if rel_bias is not None:
            scores = scores + rel_bias[hd]
        parts.append(_softmax(scores) @ v[:, sl])
    return np.concatenate(parts, axis=-1) @ w_proj + b_proj


def run_dense(config: ModelConfig, weights: dict[str, np.ndarray],
              image: np.ndarray) -> np.ndarray:
    """Full forward pass; returns the logits vector."""
    win = config.window_size
    image = np.asarray(image, dtype=np.float64)

    tokens = _patch_tokens(image, config.patch_size)
    x = tokens @ weights["patch_embed.weight"].reshape(config.patch_features, config.dims[0])
    x = x + weights["patch_embed.bias"]
    x = _layer_norm(x, weights["patch_embed.norm.gamma"], weights["patch_embed.norm.beta"])

    side = config.image_size // config.patch_size
    for s in range(config.n_stages):
        c, heads = config.dims[s], config.heads[s]
        shift = config.stage_shift(s)
        for b in range(config.depths[s]):
            pre = f"stage{s}.block{b}."
            rel = None
            if config.relative_position_bias:
                table = weights[pre + "attn.rel_bias"].reshape(heads, (2 * win - 1) ** 2)
                rel = _rel_bias_matrix(table, win)

            shortcut = x
            y = _layer_norm(x, weights[pre + "norm1.gamma"], weights[pre + "norm1.beta"])
            grid = y.reshape(side, side, c)
            do_shift = shift if b % 2 == 1 else 0
            if do_shift:
                grid = np.roll(grid, (-do_shift, -do_shift), axis=(0, 1))
            wins = _windows(grid, win)
            outs = np.stack([
                _attention(wtok, weights[pre + "attn.qkv.weight"].reshape(c, 3 * c),
                           weights[pre + "attn.qkv.bias"],
                           weights[pre + "attn.proj.weight"].reshape(c, c),
                           weights[pre + "attn.proj.bias"], heads, rel)
                for wtok in wins
            ])
            grid = _unwindows(outs, side, side, win)
            if do_shift:
                grid = np.roll(grid, (do_shift, do_shift), axis=(0, 1))
            x = shortcut + grid.reshape(side * side, c)

            shortcut = x
            y = _layer_norm(x, weights[pre + "norm2.gamma"], weights[pre + "norm2.beta"])
            y = _gelu(y @ weights[pre + "mlp.fc1.weight"].reshape(c, config.mlp_ratio * c)
                      + weights[pre + "mlp.fc1.bias"])
            y = y @ weights[pre + "mlp.fc2.weight"].reshape(config.mlp_ratio * c, c)
            x = shortcut + y + weights[pre + "mlp.fc2.bias"]

        if s + 1 < config.n_stages:
            grid = x.reshape(side, side, c)
            merged = np.concatenate([
                grid[0::2, 0::2], grid[1::2, 0::2], grid[0::2, 1::2], grid[1::2, 1::2],
            ], axis=-1)
            side //= 2
            x = merged.reshape(side * side, 4 * c)
            x = _layer_norm(x, weights[f"merge{s}.norm.gamma"], weights[f"merge{s}.norm.beta"])
            x = x @ weights[f"merge{s}.reduce.weight"].reshape(4 * c, config.dims[s + 1])

    if config.final_norm:
        x = _layer_norm(x, weights["head.norm.gamma"], weights["head.norm.beta"])
    pooled = x.T @ weights["head.pool"].reshape(-1)
    logits = pooled @ weights["head.fc.weight"].reshape(config.dims[-1], config.num_classes)
    return logits + weights["head.fc.bias"]


def load_weight_floats(manifest) -> dict[str, np.ndarray]:
    """Dequantized real values of every manifest tensor, keyed by name."""
    return {e.name: manifest.load_floats(e) for e in manifest.entries}
