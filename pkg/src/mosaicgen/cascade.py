"""Multi-scale cascaded attention scores.

The fine score map Q K^T is augmented with average-pooled query/key score
maps, bilinearly upsampled back to full size and added only on the
[target-query x reference-key] slice. Softmax (with the single 1/sqrt(d)
scaling) happens after aggregation.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .grids import MosaicLayout, PanelMask


@dataclass(frozen=True)
class TokenGrid:
    """Tokens of a 2-D grid, flattened row-major into (n, d)."""

    rows: int
    cols: int
    data: np.ndarray

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError("token grid dims must be positive")
        if self.data.ndim != 2 or self.data.shape[0] != self.rows * self.cols:
            raise ValueError(f"data shape {self.data.shape} != ({self.rows * self.cols}, d)")
        if not np.isfinite(self.data).all():
            raise ValueError("token grid contains non-finite values")

    @property
    def n(self) -> int:
        return self.rows * self.cols

    @property
    def dim(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class TokenSlices:
    """Query indices inside the masked panel and key indices outside it."""

    target_indices: np.ndarray
    reference_indices: np.ndarray

    @property
    def empty(self) -> bool:
        return self.target_indices.size == 0 or self.reference_indices.size == 0


def slices_from_mask(mask: PanelMask, patch_size: int) -> TokenSlices:
    """Token slices for a pixel mask: a token is a target if any of its
    patch pixels is masked, a reference only if none is."""
    h, w = mask.shape
    if h % patch_size or w % patch_size:
        raise ValueError(f"mask {mask.shape} not divisible by patch size {patch_size}")
    gh, gw = h // patch_size, w // patch_size
    hit = mask.reshape(gh, patch_size, gw, patch_size).any(axis=(1, 3)).reshape(-1)
    idx = np.arange(gh * gw)
    return TokenSlices(target_indices=idx[hit], reference_indices=idx[~hit])


def slices_from_layout(layout: MosaicLayout, patch_size: int) -> TokenSlices:
    from .grids import target_mask

    return slices_from_mask(target_mask(layout), patch_size)


def _prime_factors(k: int) -> list[int]:
    out, p = [], 2
    while k > 1:
        while k % p == 0:
            out.append(p)
            k //= p
        p += 1
    return sorted(out, reverse=True)


def pool_window(rows: int, cols: int, level: int) -> tuple[int, int]:
    """Window (wh, ww) whose area equals `level`, so the pooled token count
    is ~n/level.

    The prime factors of `level` are distributed greedily: each factor goes
    to the axis with the larger remaining extent (ties prefer rows), so a
    prime level reduces the longer axis only and composite levels alternate.
    A factor that fits neither remaining extent is an error.
    """
    if level < 2:
        raise ValueError("pooled levels start at 2")
    wh = ww = 1
    for f in _prime_factors(level):
        r_left, c_left = rows // wh, cols // ww
        if r_left >= c_left and r_left >= f:
            wh *= f
        elif c_left >= f:
            ww *= f
        elif r_left >= f:
            wh *= f
        else:
            raise ValueError(f"pooling window for level {level} exceeds {rows}x{cols} token grid")
    return wh, ww


def pool_tokens(grid: TokenGrid, level: int) -> TokenGrid:
    """Average-pool the token grid down to ~n/level tokens.

    Windows tile the grid with ceil division; ragged edge windows average
    over the cells they actually cover.
    """
    wh, ww = pool_window(grid.rows, grid.cols, level)
    return _pool_by_window(grid, wh, ww)


def _pool_by_window(grid: TokenGrid, wh: int, ww: int) -> TokenGrid:
    rows, cols, d = grid.rows, grid.cols, grid.dim
    out_r = -(-rows // wh)
    out_c = -(-cols // ww)
    x = grid.data.reshape(rows, cols, d)
    r_starts = np.arange(0, rows, wh)
    c_starts = np.arange(0, cols, ww)
    sums = np.add.reduceat(np.add.reduceat(x, r_starts, axis=0), c_starts, axis=1)
    r_counts = np.minimum(r_starts + wh, rows) - r_starts
    c_counts = np.minimum(c_starts + ww, cols) - c_starts
    counts = np.multiply.outer(r_counts, c_counts).astype(x.dtype)
    pooled = sums / counts[:, :, None]
    return TokenGrid(out_r, out_c, pooled.reshape(out_r * out_c, d))


def score_map(q: TokenGrid, k: TokenGrid) -> np.ndarray:
    """Raw (unscaled) dot-product scores Q K^T; scaling happens at softmax."""
    if q.dim != k.dim:
        raise ValueError(f"query dim {q.dim} != key dim {k.dim}")
    return q.data @ k.data.T


def _axis_interp(n_in: int, coords: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Border-clamped linear interpolation taps for half-pixel-center coords."""
    src = np.clip(coords, 0.0, n_in - 1.0)
    i0 = np.floor(src).astype(np.intp)
    i0 = np.minimum(i0, n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    return i0, i1, frac


def _half_pixel_coords(n_in: int, n_out: int, idx: np.ndarray) -> np.ndarray:
    return (idx + 0.5) * (n_in / n_out) - 0.5


def upsample_scores(scores: np.ndarray, n: int) -> np.ndarray:
    """Bilinearly upsample a score matrix (treated as an image) to n x n."""
    if scores.ndim != 2:
        raise ValueError("score map must be 2-D")
    h_in, w_in = scores.shape
    if h_in > n or w_in > n:
        raise ValueError(f"cannot upsample {scores.shape} down to {n}x{n}")
    rows = _interp_rows(scores, h_in, n, np.arange(n))
    return _interp_cols(rows, w_in, n, np.arange(n))


def _interp_rows(scores: np.ndarray, n_in: int, n_out: int, row_idx: np.ndarray) -> np.ndarray:
    i0, i1, f = _axis_interp(n_in, _half_pixel_coords(n_in, n_out, row_idx))
    f = f.astype(scores.dtype)[:, None]
    return scores[i0, :] * (1 - f) + scores[i1, :] * f


def _interp_cols(rows: np.ndarray, n_in: int, n_out: int, col_idx: np.ndarray) -> np.ndarray:
    j0, j1, g = _axis_interp(n_in, _half_pixel_coords(n_in, n_out, col_idx))
    g = g.astype(rows.dtype)[None, :]
    return rows[:, j0] * (1 - g) + rows[:, j1] * g


def upsampled_slice(scores: np.ndarray, n: int, row_idx: np.ndarray, col_idx: np.ndarray) -> np.ndarray:
    """The [row_idx x col_idx] block of upsample_scores(scores, n), computed
    without materializing the full n x n map."""
    h_in, w_in = scores.shape
    rows = _interp_rows(scores, h_in, n, np.asarray(row_idx))
    return _interp_cols(rows, w_in, n, np.asarray(col_idx))


@dataclass
class TokenScorePyramid:
    """Fine score map, pooled per-level maps, and the aggregated result."""

    levels: list[np.ndarray]  # levels[0] is the fine map
    level_grids: list[tuple[int, int]]  # query-grid dims per level, for viz
    aggregated: np.ndarray
    score_macs: list[int]  # multiply-accumulates of each level's Q K^T


def cascade_scores(
    q: TokenGrid,
    k: TokenGrid,
    slices: TokenSlices,
    levels: int,
    recursive: bool = False,
) -> TokenScorePyramid:
    """Fine scores plus pooled levels 2..levels added on the target/reference
    slice only; every entry outside the slice equals the fine map bit-exact.

    `recursive` switches to iterated factor-2 pooling of the previous level
    (an experimentation mode; level shapes then shrink as n/2^(i-1) instead
    of n/i).
    """
    if levels < 1:
        raise ValueError("levels must be >= 1")
    if q.rows != k.rows or q.cols != k.cols:
        raise ValueError("query and key token grids must share their layout")
    n, d = q.n, q.dim
    fine = score_map(q, k)
    maps = [fine]
    grids = [(q.rows, q.cols)]
    macs = [n * n * d]
    aggregated = fine.copy()
    tgt = np.asarray(slices.target_indices)
    ref = np.asarray(slices.reference_indices)
    q_i, k_i = q, k
    for i in range(2, levels + 1):
        if recursive:
            q_i, k_i = _pool_by_window(q_i, *pool_window(q_i.rows, q_i.cols, 2)), \
                       _pool_by_window(k_i, *pool_window(k_i.rows, k_i.cols, 2))
        else:
            q_i, k_i = pool_tokens(q, i), pool_tokens(k, i)
        pooled = score_map(q_i, k_i)
        maps.append(pooled)
        grids.append((q_i.rows, q_i.cols))
        macs.append(q_i.n * k_i.n * d)
        if not slices.empty:
            aggregated[np.ix_(tgt, ref)] += upsampled_slice(pooled, n, tgt, ref)
    return TokenScorePyramid(levels=maps, level_grids=grids, aggregated=aggregated, score_macs=macs)


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def cascade_attention(
    q: TokenGrid,
    k: TokenGrid,
    v: TokenGrid,
    slices: TokenSlices,
    levels: int,
    extra_keys: np.ndarray | None = None,
    extra_values: np.ndarray | None = None,
    return_weights: bool = False,
):
    """Softmax-weighted value aggregation over the cascaded score map.

    Condition tokens enter as extra keys/values whose scores pass through
    unmodified. With levels=1 this is plain scaled dot-product attention.
    """
    if v.data.shape[0] != k.data.shape[0]:
        raise ValueError("V row count must equal K row count")
    pyramid = cascade_scores(q, k, slices, levels)
    logits = pyramid.aggregated
    values = v.data
    if extra_keys is not None:
        if extra_values is None or extra_values.shape[0] != extra_keys.shape[0]:
            raise ValueError("extra keys and values must pair up")
        logits = np.concatenate([logits, q.data @ extra_keys.T], axis=1)
        values = np.concatenate([values, extra_values], axis=0)
    weights = _softmax_rows(logits / np.sqrt(q.dim))
    out = weights @ values
    if return_weights:
        return out, weights
    return out


def export_score_heatmaps(pyramid: TokenScorePyramid, out_dir: str | Path, prefix: str = "scores") -> list[Path]:
    """Write each level map and the aggregated map as a grayscale PNG plus a
    raw latent dump (shape h x w x 1)."""
    from .fileio import save_latent, write_heatmap_png

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    named = [(f"{prefix}_level{i + 1}", m) for i, m in enumerate(pyramid.levels)]
    named.append((f"{prefix}_aggregated", pyramid.aggregated))
    for name, arr in named:
        png = out_dir / f"{name}.png"
        write_heatmap_png(png, arr)
        save_latent(out_dir / f"{name}.lat", arr[:, :, None].astype(np.float32))
        written.append(png)
    return written
