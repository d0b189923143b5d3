"""Velocity-prediction denoisers for the mosaic completion loop.

Two implementations of the sampler's contract:

* an analytic Gaussian denoiser whose velocity is the exact conditional
  expectation E[data - noise | x_t] under a linear noise-data path, used as
  a closed-form oracle;
* a small patch-token transformer with hand-written forward/backward passes,
  trained with the squared-error flow-matching loss, hosting the cascaded
  attention hook at inference time.

Path convention everywhere: x_t = (1-t)*noise + t*data, target velocity
v* = data - noise.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .cascade import TokenGrid, TokenSlices, cascade_scores, pool_window, slices_from_mask, \
    upsampled_slice
from .grids import Latent, PanelMask

SHAPE_CLASSES = ("circle", "square", "triangle", "star", "cross", "ring")
BACKGROUND_CLASSES = ("plain", "gradient", "noise", "checker")

# condition vector layout:
#   [0:6)   shape one-hot
#   [6:9)   hue sin, hue cos, hue-known flag
#   [9:11)  stripe frequency / 10, texture-known flag
#   [11:15) background one-hot
#   [15]    pose flag
#   [16]    null flag
COND_DIM = 17


@dataclass(frozen=True)
class Condition:
    """Structured stand-in for a text prompt: partial subject attributes
    plus an edit descriptor. Unknown fields stay None and encode to zeros."""

    shape_class: str | None = None
    hue: float | None = None
    texture: float | None = None
    background: str | None = None
    pose: bool = False
    null: bool = False

    def __post_init__(self):
        if self.shape_class is not None and self.shape_class not in SHAPE_CLASSES:
            raise ValueError(f"unknown shape class {self.shape_class!r}")
        if self.background is not None and self.background not in BACKGROUND_CLASSES:
            raise ValueError(f"unknown background class {self.background!r}")
        if self.null and (self.shape_class or self.hue is not None or self.texture is not None
                          or self.background or self.pose):
            raise ValueError("null condition must have all fields empty")

    @classmethod
    def null_condition(cls) -> "Condition":
        return cls(null=True)

    def to_vector(self) -> np.ndarray:
        v = np.zeros(COND_DIM, dtype=np.float32)
        if self.shape_class is not None:
            v[SHAPE_CLASSES.index(self.shape_class)] = 1.0
        if self.hue is not None:
            rad = np.deg2rad(self.hue)
            v[6], v[7], v[8] = np.sin(rad), np.cos(rad), 1.0
        if self.texture is not None:
            v[9], v[10] = self.texture / 10.0, 1.0
        if self.background is not None:
            v[11 + BACKGROUND_CLASSES.index(self.background)] = 1.0
        v[15] = 1.0 if self.pose else 0.0
        v[16] = 1.0 if self.null else 0.0
        return v


def drop_condition(cond: Condition, rng: np.random.Generator, rate: float) -> Condition:
    """Replace the condition by the null condition with probability `rate`."""
    if rng.random() < rate:
        return Condition.null_condition()
    return cond


# ---------------------------------------------------------------------------
# analytic Gaussian oracle
# ---------------------------------------------------------------------------

def analytic_velocity(mean, variance: float, x: np.ndarray, t: float) -> np.ndarray:
    """Exact E[data - noise | x_t = x] for data ~ N(mean, variance*I) and
    noise ~ N(0, I) under the linear path.

    Joint-Gaussian conditioning gives the affine form
        v(x, t) = mean + c(t) * (x - t*mean),
        c(t) = (t*variance - (1-t)) / ((1-t)^2 + t^2*variance),
    whose denominator is the marginal variance of x_t. Only t=1 with
    variance=0 makes it singular.
    """
    if not (0.0 <= t <= 1.0):
        raise ValueError(f"t={t} outside [0, 1]")
    if variance < 0:
        raise ValueError("variance must be >= 0")
    a = 1.0 - t
    denom = a * a + t * t * variance
    if denom <= 0.0:
        raise ValueError("singular path: t=1 with zero variance")
    c = (t * variance - a) / denom
    mean = np.asarray(mean, dtype=x.dtype)
    return (mean + c * (x - t * mean)).astype(x.dtype)


class AnalyticGaussianDenoiser:
    """Closed-form velocity oracle for an isotropic Gaussian data
    distribution; ignores the condition."""

    def __init__(self, mean, variance: float):
        if variance <= 0:
            raise ValueError("variance must be > 0")
        self.mean = mean
        self.variance = float(variance)

    def velocity(self, x: Latent, cond, t: float) -> Latent:
        return analytic_velocity(self.mean, self.variance, x, t)

    def null_condition(self):
        return Condition.null_condition()


# ---------------------------------------------------------------------------
# toy transformer
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ToyModelConfig:
    patch_size: int = 4
    layers: int = 4
    heads: int = 4
    dim: int = 64
    ffn_mult: int = 4
    channels: int = 3
    cond_dim: int = COND_DIM
    pos_encoding: bool = True

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError("dim must be divisible by heads")
        if self.dim % 4:
            raise ValueError("dim must be divisible by 4 (2-D positional encoding)")
        if min(self.patch_size, self.layers, self.heads, self.dim, self.ffn_mult, self.channels) < 1:
            raise ValueError("config fields must be positive")

    def to_dict(self) -> dict:
        return {
            "patch_size": self.patch_size, "layers": self.layers, "heads": self.heads,
            "dim": self.dim, "ffn_mult": self.ffn_mult, "channels": self.channels,
            "cond_dim": self.cond_dim, "pos_encoding": self.pos_encoding,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ToyModelConfig":
        return cls(**d)


def _uniform_fan_in(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def init_params(config: ToyModelConfig, seed: int = 0) -> dict[str, np.ndarray]:
    """Fan-in-scaled uniform init; the output head starts at zero so the
    initial velocity field is exactly zero."""
    rng = np.random.default_rng(seed)
    d, h = config.dim, config.dim * config.ffn_mult
    pdim = config.patch_size * config.patch_size * config.channels
    p: dict[str, np.ndarray] = {}
    p["embed.W"] = _uniform_fan_in(rng, pdim, (pdim, d))
    p["embed.b"] = np.zeros(d, dtype=np.float32)
    p["time.W"] = _uniform_fan_in(rng, d, (d, d))
    p["time.b"] = np.zeros(d, dtype=np.float32)
    p["cond.W"] = _uniform_fan_in(rng, config.cond_dim, (config.cond_dim, d))
    p["cond.b"] = np.zeros(d, dtype=np.float32)
    for l in range(config.layers):
        pre = f"block{l}."
        for ln in ("ln1", "ln2"):
            p[pre + ln + ".g"] = np.ones(d, dtype=np.float32)
            p[pre + ln + ".b"] = np.zeros(d, dtype=np.float32)
        for name in ("q", "k", "v", "o"):
            p[pre + f"attn.W{name}"] = _uniform_fan_in(rng, d, (d, d))
            p[pre + f"attn.b{name}"] = np.zeros(d, dtype=np.float32)
        p[pre + "ffn.W1"] = _uniform_fan_in(rng, d, (d, h))
        p[pre + "ffn.b1"] = np.zeros(h, dtype=np.float32)
        p[pre + "ffn.W2"] = _uniform_fan_in(rng, h, (h, d))
        p[pre + "ffn.b2"] = np.zeros(d, dtype=np.float32)
    p["final.g"] = np.ones(d, dtype=np.float32)
    p["final.b"] = np.zeros(d, dtype=np.float32)
    p["head.W"] = np.zeros((d, pdim), dtype=np.float32)
    p["head.b"] = np.zeros(pdim, dtype=np.float32)
    return p


def _sin_time_features(t: np.ndarray, dim: int, dtype) -> np.ndarray:
    half = dim // 2
    k = np.arange(half, dtype=np.float64) / max(half - 1, 1)
    omega = 1000.0 ** (1.0 - k)  # frequencies from 1000 down to 1 over t in [0,1]
    ang = t[:, None].astype(np.float64) * omega[None, :]
    feats = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    if dim % 2:
        feats = np.pad(feats, ((0, 0), (0, 1)))
    return feats.astype(dtype)


def _axis_pos_encoding(positions: np.ndarray, dim: int) -> np.ndarray:
    half = dim // 2
    k = np.arange(half, dtype=np.float64) / max(half - 1, 1)
    omega = 100.0 ** (-k)
    ang = positions[:, None] * omega[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def pos_encoding_2d(grid_rows: int, grid_cols: int, dim: int) -> np.ndarray:
    """Fixed sinusoidal encoding: half the channels encode the token row,
    half the column."""
    rows = np.repeat(np.arange(grid_rows, dtype=np.float64), grid_cols)
    cols = np.tile(np.arange(grid_cols, dtype=np.float64), grid_rows)
    return np.concatenate(
        [_axis_pos_encoding(rows, dim // 2), _axis_pos_encoding(cols, dim // 2)], axis=1
    )


def _patchify(x: np.ndarray, p: int) -> np.ndarray:
    b, h, w, c = x.shape
    gh, gw = h // p, w // p
    x = x.reshape(b, gh, p, gw, p, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, gh * gw, p * p * c)


def _unpatchify(tokens: np.ndarray, gh: int, gw: int, p: int, c: int) -> np.ndarray:
    b = tokens.shape[0]
    x = tokens.reshape(b, gh, gw, p, p, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, gh * p, gw * p, c)


_GELU_C = np.sqrt(2.0 / np.pi)


def _gelu(x):
    """tanh-approximated GELU; returns (value, tanh term) so the backward
    pass never recomputes the transcendental."""
    x2 = x * x
    th = np.tanh(_GELU_C * (x + 0.044715 * (x2 * x)))
    return 0.5 * x * (1.0 + th), th


def _gelu_grad(x, th):
    x2 = x * x
    return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * _GELU_C * (1.0 + 3 * 0.044715 * x2)


def _layer_norm(x, g, b, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv)


def _layer_norm_backward(dy, cache, g):
    xhat, inv = cache
    dg = (dy * xhat).sum(axis=(0, 1))
    db = dy.sum(axis=(0, 1))
    dxhat = dy * g
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = inv * (dxhat - m1 - xhat * m2)
    return dx, dg, db


def _softmax_last(x):
    out = x - x.max(axis=-1, keepdims=True)
    np.exp(out, out=out)
    out /= out.sum(axis=-1, keepdims=True)
    return out


@dataclass
class CascadeContext:
    """Inference-time attention override: pooled-level score deltas added to
    the [target x reference] slice of the image-token block, per head."""

    slices: TokenSlices
    levels: int
    grid: tuple[int, int]
    layer_mask: tuple[bool, ...] | None = None  # None = every layer
    capture_layer: int | None = None
    capture_step: int = 0
    records: list = field(default_factory=list)

    def enabled_for(self, layer: int) -> bool:
        if self.levels < 2 or self.slices.empty:
            return False
        return self.layer_mask is None or self.layer_mask[layer]


def _pool_tokens_batched(x: np.ndarray, gh: int, gw: int, wh: int, ww: int) -> tuple[np.ndarray, int, int]:
    """Average-pool (..., gh*gw, hd) tokens with a (wh, ww) window; same
    window arithmetic as cascade.pool_tokens, vectorized over leading dims."""
    lead = x.shape[:-2]
    hd = x.shape[-1]
    grid = x.reshape(*lead, gh, gw, hd)
    r_starts = np.arange(0, gh, wh)
    c_starts = np.arange(0, gw, ww)
    sums = np.add.reduceat(np.add.reduceat(grid, r_starts, axis=-3), c_starts, axis=-2)
    r_counts = np.minimum(r_starts + wh, gh) - r_starts
    c_counts = np.minimum(c_starts + ww, gw) - c_starts
    counts = np.multiply.outer(r_counts, c_counts).astype(x.dtype)
    pooled = sums / counts[..., :, :, None]
    out_r, out_c = len(r_starts), len(c_starts)
    return pooled.reshape(*lead, out_r * out_c, hd), out_r, out_c


def cascade_slice_delta_batched(
    q: np.ndarray, k: np.ndarray, grid: tuple[int, int], slices: TokenSlices, levels: int
) -> np.ndarray:
    """Sum of upsampled pooled-level scores on the slice, for (..., n, hd)
    query/key stacks. Matches cascade_scores level by level (tested against
    the single-head reference)."""
    gh, gw = grid
    n = gh * gw
    tgt = np.asarray(slices.target_indices)
    ref = np.asarray(slices.reference_indices)
    delta = None
    for i in range(2, levels + 1):
        wh, ww = pool_window(gh, gw, i)
        q_i, _, _ = _pool_tokens_batched(q, gh, gw, wh, ww)
        k_i, _, _ = _pool_tokens_batched(k, gh, gw, wh, ww)
        pooled = q_i @ np.swapaxes(k_i, -1, -2)
        n_i = pooled.shape[-1]
        flat = pooled.reshape(-1, n_i, n_i)
        part = np.stack([upsampled_slice(m, n, tgt, ref) for m in flat])
        part = part.reshape(*pooled.shape[:-2], tgt.size, ref.size)
        delta = part if delta is None else delta + part
    return delta


def _forward(
    params: dict[str, np.ndarray],
    config: ToyModelConfig,
    x: np.ndarray,
    cond_vec: np.ndarray,
    t: np.ndarray,
    cascade: CascadeContext | None = None,
    want_cache: bool = False,
):
    """Velocity forward pass over a batch. Returns (velocity, cache)."""
    dtype = params["embed.W"].dtype
    b, hgt, wid, c = x.shape
    p = config.patch_size
    if hgt % p or wid % p:
        raise ValueError(f"latent {x.shape[1:3]} not divisible by patch size {p}")
    if c != config.channels:
        raise ValueError(f"latent has {c} channels, model expects {config.channels}")
    if cond_vec.shape != (b, config.cond_dim):
        raise ValueError(f"condition batch shape {cond_vec.shape} != ({b}, {config.cond_dim})")
    gh, gw = hgt // p, wid // p
    n = gh * gw
    d = config.dim
    nh, hd = config.heads, d // config.heads
    scale = 1.0 / np.sqrt(hd)

    xp = _patchify(x.astype(dtype), p)
    h = xp @ params["embed.W"] + params["embed.b"]
    if config.pos_encoding:
        h = h + pos_encoding_2d(gh, gw, d).astype(dtype)[None]
    cond_tok = (cond_vec.astype(dtype) @ params["cond.W"] + params["cond.b"])[:, None, :]
    seq = np.concatenate([h, cond_tok], axis=1)
    tfeat = _sin_time_features(np.asarray(t, dtype=np.float64), d, dtype)
    seq = seq + (tfeat @ params["time.W"] + params["time.b"])[:, None, :]
    nt = n + 1

    cache = {"xp": xp, "tfeat": tfeat, "cond_vec": cond_vec.astype(dtype), "layers": [],
             "shape": (b, hgt, wid, c, gh, gw, n)} if want_cache else None

    for l in range(config.layers):
        pre = f"block{l}."
        a, ln1_cache = _layer_norm(seq, params[pre + "ln1.g"], params[pre + "ln1.b"])
        q = a @ params[pre + "attn.Wq"] + params[pre + "attn.bq"]
        k = a @ params[pre + "attn.Wk"] + params[pre + "attn.bk"]
        v = a @ params[pre + "attn.Wv"] + params[pre + "attn.bv"]
        qh = q.reshape(b, nt, nh, hd).transpose(0, 2, 1, 3)
        kh = k.reshape(b, nt, nh, hd).transpose(0, 2, 1, 3)
        vh = v.reshape(b, nt, nh, hd).transpose(0, 2, 1, 3)
        logits = (qh @ np.swapaxes(kh, -1, -2)) * scale
        if cascade is not None and cascade.enabled_for(l):
            if want_cache:
                raise RuntimeError("cascade attention is an inference-time hook; no backward pass")
            tgt = cascade.slices.target_indices
            ref = cascade.slices.reference_indices
            delta = cascade_slice_delta_batched(
                qh[:, :, :n, :], kh[:, :, :n, :], cascade.grid, cascade.slices, cascade.levels
            )
            logits[:, :, tgt[:, None], ref[None, :]] += delta * scale
            if cascade.capture_layer == l:
                cascade.records.append([
                    cascade_scores(TokenGrid(*cascade.grid, qh[0, h_i, :n, :]),
                                   TokenGrid(*cascade.grid, kh[0, h_i, :n, :]),
                                   cascade.slices, cascade.levels)
                    for h_i in range(nh)
                ])
        attn = _softmax_last(logits)
        oh = attn @ vh
        om = oh.transpose(0, 2, 1, 3).reshape(b, nt, d)
        proj = om @ params[pre + "attn.Wo"] + params[pre + "attn.bo"]
        seq1 = seq + proj
        f_in, ln2_cache = _layer_norm(seq1, params[pre + "ln2.g"], params[pre + "ln2.b"])
        z1 = f_in @ params[pre + "ffn.W1"] + params[pre + "ffn.b1"]
        g1, th1 = _gelu(z1)
        z2 = g1 @ params[pre + "ffn.W2"] + params[pre + "ffn.b2"]
        seq_next = seq1 + z2
        if want_cache:
            cache["layers"].append({
                "ln1": ln1_cache, "a": a, "qh": qh, "kh": kh, "vh": vh,
                "attn": attn, "om": om, "ln2": ln2_cache, "f_in": f_in,
                "z1": z1, "g1": g1, "th1": th1,
            })
        seq = seq_next

    u, lnf_cache = _layer_norm(seq, params["final.g"], params["final.b"])
    v_tok = u[:, :n, :] @ params["head.W"] + params["head.b"]
    vel = _unpatchify(v_tok, gh, gw, p, c)
    if want_cache:
        cache["lnf"] = lnf_cache
        cache["u"] = u
    return vel.astype(dtype), cache


def _backward(params: dict[str, np.ndarray], config: ToyModelConfig, cache: dict,
              d_vel: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss w.r.t. every parameter, given d(loss)/d(velocity)."""
    b, hgt, wid, c, gh, gw, n = cache["shape"]
    p = config.patch_size
    d = config.dim
    nh, hd = config.heads, d // config.heads
    scale = 1.0 / np.sqrt(hd)
    grads = {name: np.zeros_like(arr) for name, arr in params.items()}

    def _mat_grad(x, g):
        # sum_b x[b]^T @ g[b] as one flat GEMM
        return x.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])

    d_vtok = _patchify(d_vel, p)
    u = cache["u"]
    grads["head.W"] += _mat_grad(u[:, :n, :], d_vtok)
    grads["head.b"] += d_vtok.sum(axis=(0, 1))
    d_u = np.zeros_like(u)
    d_u[:, :n, :] = d_vtok @ params["head.W"].T
    d_seq, dg, db = _layer_norm_backward(d_u, cache["lnf"], params["final.g"])
    grads["final.g"] += dg
    grads["final.b"] += db

    for l in reversed(range(config.layers)):
        pre = f"block{l}."
        lc = cache["layers"][l]
        # FFN residual branch
        d_z2 = d_seq
        grads[pre + "ffn.W2"] += _mat_grad(lc["g1"], d_z2)
        grads[pre + "ffn.b2"] += d_z2.sum(axis=(0, 1))
        d_g1 = d_z2 @ params[pre + "ffn.W2"].T
        d_z1 = d_g1 * _gelu_grad(lc["z1"])
        grads[pre + "ffn.W1"] += _mat_grad(lc["f_in"], d_z1)
        grads[pre + "ffn.b1"] += d_z1.sum(axis=(0, 1))
        d_fin = d_z1 @ params[pre + "ffn.W1"].T
        d_seq1, dg, db = _layer_norm_backward(d_fin, lc["ln2"], params[pre + "ln2.g"])
        grads[pre + "ln2.g"] += dg
        grads[pre + "ln2.b"] += db
        d_seq1 = d_seq1 + d_seq  # residual
        # attention residual branch
        d_proj = d_seq1
        grads[pre + "attn.Wo"] += _mat_grad(lc["om"], d_proj)
        grads[pre + "attn.bo"] += d_proj.sum(axis=(0, 1))
        d_om = d_proj @ params[pre + "attn.Wo"].T
        nt = n + 1
        d_oh = d_om.reshape(b, nt, nh, hd).transpose(0, 2, 1, 3)
        attn, vh, qh, kh = lc["attn"], lc["vh"], lc["qh"], lc["kh"]
        d_attn = d_oh @ np.swapaxes(vh, -1, -2)
        d_vh = np.swapaxes(attn, -1, -2) @ d_oh
        d_logits = attn * (d_attn - (d_attn * attn).sum(axis=-1, keepdims=True))
        d_qh = (d_logits @ kh) * scale
        d_kh = (np.swapaxes(d_logits, -1, -2) @ qh) * scale
        d_q = d_qh.transpose(0, 2, 1, 3).reshape(b, nt, d)
        d_k = d_kh.transpose(0, 2, 1, 3).reshape(b, nt, d)
        d_v = d_vh.transpose(0, 2, 1, 3).reshape(b, nt, d)
        a = lc["a"]
        d_a = d_q @ params[pre + "attn.Wq"].T + d_k @ params[pre + "attn.Wk"].T \
            + d_v @ params[pre + "attn.Wv"].T
        grads[pre + "attn.Wq"] += _mat_grad(a, d_q)
        grads[pre + "attn.Wk"] += _mat_grad(a, d_k)
        grads[pre + "attn.Wv"] += _mat_grad(a, d_v)
        grads[pre + "attn.bq"] += d_q.sum(axis=(0, 1))
        grads[pre + "attn.bk"] += d_k.sum(axis=(0, 1))
        grads[pre + "attn.bv"] += d_v.sum(axis=(0, 1))
        d_seq0, dg, db = _layer_norm_backward(d_a, lc["ln1"], params[pre + "ln1.g"])
        grads[pre + "ln1.g"] += dg
        grads[pre + "ln1.b"] += db
        d_seq = d_seq0 + d_seq1  # residual

    # embeddings: seq = concat(xp@We + pos, cond@Wc)[...] + time@Wt broadcast
    grads["time.W"] += cache["tfeat"].T @ d_seq.sum(axis=1)
    grads["time.b"] += d_seq.sum(axis=(0, 1))
    d_img = d_seq[:, :n, :]
    d_cond = d_seq[:, n, :]
    grads["embed.W"] += _mat_grad(cache["xp"], d_img)
    grads["embed.b"] += d_img.sum(axis=(0, 1))
    grads["cond.W"] += cache["cond_vec"].T @ d_cond
    grads["cond.b"] += d_cond.sum(axis=0)
    return grads


class TransformerDenoiser:
    """Patch-token transformer velocity model over mosaic latents."""

    def __init__(self, config: ToyModelConfig, params: dict[str, np.ndarray]):
        self.config = config
        self.params = params

    @classmethod
    def create(cls, config: ToyModelConfig, seed: int = 0) -> "TransformerDenoiser":
        return cls(config, init_params(config, seed))

    def astype(self, dtype) -> "TransformerDenoiser":
        return TransformerDenoiser(self.config, {k: v.astype(dtype) for k, v in self.params.items()})

    def null_condition(self) -> Condition:
        return Condition.null_condition()

    def _cond_batch(self, conds) -> np.ndarray:
        return np.stack([c.to_vector() for c in conds])

    def forward_batch(self, x: np.ndarray, conds, t: np.ndarray,
                      cascade: CascadeContext | None = None) -> np.ndarray:
        vel, _ = _forward(self.params, self.config, x, self._cond_batch(conds),
                          np.asarray(t, dtype=np.float64), cascade=cascade)
        return vel

    def velocity(self, x: Latent, cond: Condition, t: float,
                 cascade: CascadeContext | None = None) -> Latent:
        vel = self.forward_batch(x[None], [cond], np.array([t]), cascade=cascade)
        return vel[0]

    def velocity_pair(self, x: Latent, cond: Condition, t: float,
                      cascade: CascadeContext | None = None) -> tuple[Latent, Latent]:
        """(conditional, null) velocities in one batched pass."""
        stacked = np.stack([x, x])
        vel = self.forward_batch(stacked, [cond, Condition.null_condition()],
                                 np.array([t, t]), cascade=cascade)
        return vel[0], vel[1]

    def with_cascade(self, mask: PanelMask, levels: int,
                     layer_mask: tuple[bool, ...] | None = None,
                     capture_layer: int | None = None) -> "CascadedDenoiser":
        slices = slices_from_mask(mask, self.config.patch_size)
        gh = mask.shape[0] // self.config.patch_size
        gw = mask.shape[1] // self.config.patch_size
        ctx = CascadeContext(slices=slices, levels=levels, grid=(gh, gw),
                             layer_mask=layer_mask, capture_layer=capture_layer)
        return CascadedDenoiser(self, ctx)


class CascadedDenoiser:
    """View of a TransformerDenoiser with the multi-scale score override
    active; shares parameters with the wrapped model."""

    def __init__(self, model: TransformerDenoiser, ctx: CascadeContext):
        self.model = model
        self.ctx = ctx

    def velocity(self, x: Latent, cond: Condition, t: float) -> Latent:
        return self.model.velocity(x, cond, t, cascade=self.ctx)

    def velocity_pair(self, x: Latent, cond: Condition, t: float):
        return self.model.velocity_pair(x, cond, t, cascade=self.ctx)

    def null_condition(self) -> Condition:
        return Condition.null_condition()


def fm_loss_given(
    model: TransformerDenoiser,
    data: np.ndarray,
    conds,
    t: np.ndarray,
    noise: np.ndarray,
    with_grads: bool = True,
):
    """Squared-error flow-matching loss on explicit (t, noise) draws.

    x_t = (1-t)*noise + t*data; the regression target is the exact path
    velocity data - noise. Returns (loss, grads_or_None).
    """
    if data.ndim != 4 or data.shape[0] == 0:
        raise ValueError("batch must be (B, H, W, C) with B >= 1")
    dtype = model.params["embed.W"].dtype
    data = data.astype(dtype)
    noise = noise.astype(dtype)
    tt = np.asarray(t, dtype=np.float64)
    tb = tt[:, None, None, None].astype(dtype)
    x_t = (1 - tb) * noise + tb * data
    target = data - noise
    cond_vec = np.stack([c.to_vector() for c in conds])
    vel, cache = _forward(model.params, model.config, x_t, cond_vec, tt, want_cache=with_grads)
    diff = vel - target
    loss = float(np.mean(diff.astype(np.float64) ** 2))
    if not with_grads:
        return loss, None
    d_vel = (2.0 / diff.size) * diff
    grads = _backward(model.params, model.config, cache, d_vel.astype(dtype))
    return loss, grads


def fm_loss(model: TransformerDenoiser, data: np.ndarray, conds,
            rng: np.random.Generator, with_grads: bool = True):
    """Flow-matching loss with t ~ U(0,1) and noise ~ N(0,I) drawn per item."""
    if data.ndim != 4 or data.shape[0] == 0:
        raise ValueError("batch must be (B, H, W, C) with B >= 1")
    t = rng.uniform(0.0, 1.0, size=data.shape[0])
    noise = rng.standard_normal(data.shape).astype(np.float32)
    return fm_loss_given(model, data, conds, t, noise, with_grads=with_grads)
