"""The noise-prediction transformer: prior-modulated layer norm, channel
attention with quality-map-gated keys/values, map-guided positional
embedding, and blocks that concatenate the low-light feature then drop the
latter half of the channels on exit.

Blocks run internally at width 2w (hidden state plus low-light tokens);
attention is computed along the channel dimension so cost stays linear in the
token count and any latent size works with one set of weights.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DimensionError, ValidationError
from .tensor import Tensor

GLOBAL_INJECT_MODES = ("gpp_ln", "add_to_latent")
NEUTRAL_SCORE = 0.5
T_EMBED_DIM = 64
MOD_HIDDEN = 128


@dataclass(frozen=True)
class GppConfig:
    d: int = 4                      # latent channels
    w: int = 64                     # block width (blocks run at 2w internally)
    blocks: int = 4
    heads: int = 4
    ffn_mult: int = 2
    grid: int = 4
    max_t: int = 1000
    use_global_prior: bool = True
    use_local_prior: bool = True
    global_inject: str = "gpp_ln"

    def __post_init__(self):
        if self.blocks < 1:
            raise ConfigurationError("need at least one block")
        if self.w % self.heads or (2 * self.w) % self.heads:
            raise ConfigurationError(
                f"width {self.w} and 2*width must divide heads {self.heads}")
        if self.global_inject not in GLOBAL_INJECT_MODES:
            raise ConfigurationError(f"global_inject must be one of {GLOBAL_INJECT_MODES}")
        if min(self.d, self.ffn_mult, self.grid, self.max_t) < 1:
            raise ConfigurationError("d, ffn_mult, grid, max_t must be positive")

    def ablation(self, name: str) -> "GppConfig":
        """Named configurations: full, variant1 (no local prior), variant3
        (no priors at all), variant4 (mean score added to the latent)."""
        table = {
            "full": dict(use_global_prior=True, use_local_prior=True, global_inject="gpp_ln"),
            "variant1": dict(use_global_prior=True, use_local_prior=False,
                             global_inject="gpp_ln"),
            "variant3": dict(use_global_prior=False, use_local_prior=False,
                             global_inject="gpp_ln"),
            "variant4": dict(use_global_prior=True, use_local_prior=False,
                             global_inject="add_to_latent"),
        }
        if name not in table:
            raise ConfigurationError(f"unknown ablation {name!r}; choose from {sorted(table)}")
        from dataclasses import replace
        return replace(self, **table[name])


@dataclass
class PriorBatch:
    """Stacked conditioning arrays for a batch of samples."""

    s: np.ndarray        # [B,3] global scores (contrast, visibility, sharpness)
    qmap: np.ndarray     # [B,3,G,G]
    s_mean: np.ndarray   # [B]
    grid: int

    @classmethod
    def from_priors(cls, priors) -> "PriorBatch":
        if not isinstance(priors, (list, tuple)):
            priors = [priors]
        grid = priors[0].grid
        return cls(
            s=np.stack([p.s_vector for p in priors]),
            qmap=np.stack([p.map for p in priors]),
            s_mean=np.array([p.s_mean for p in priors]),
            grid=grid,
        )


# ---------------------------------------------------------------- parameters

def _glorot(rng, fan_in, fan_out, shape=None, dtype=np.float32) -> Tensor:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    data = rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))
    return Tensor(data.astype(dtype), dtype=dtype, requires_grad=True)


def _zeros(shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), dtype=dtype, requires_grad=True)


def _ones(shape, dtype) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), dtype=dtype, requires_grad=True)


def init_params(cfg: GppConfig, seed: int = 0, dtype=np.float32) -> dict[str, Tensor]:
    """All learnable weights. Modulation-MLP output layers, the gate
    projection, the local-attention branch scalar, and the output projection
    start at zero so every block is a near-identity residual at init."""
    rng = np.random.default_rng([seed, 0x6E7])
    d, w = cfg.d, cfg.w
    c = 2 * w
    cond = 3 + T_EMBED_DIM
    p: dict[str, Tensor] = {}
    p["in_proj.w"] = _glorot(rng, d, w, dtype=dtype)
    p["in_proj.b"] = _zeros((w,), dtype)
    p["ll_proj.w"] = _glorot(rng, d, w, dtype=dtype)
    p["ll_proj.b"] = _zeros((w,), dtype)
    p["pos.w"] = Tensor(rng.normal(0.0, 0.02, size=(5, w)).astype(dtype),
                        dtype=dtype, requires_grad=True)
    for i in range(cfg.blocks):
        pre = f"blk{i}."
        for ln in ("ln1", "ln2"):
            p[pre + ln + ".w1"] = _glorot(rng, cond, MOD_HIDDEN, dtype=dtype)
            p[pre + ln + ".b1"] = _zeros((MOD_HIDDEN,), dtype)
            p[pre + ln + ".w2"] = _zeros((MOD_HIDDEN, 2 * c), dtype)
            p[pre + ln + ".b2"] = _zeros((2 * c,), dtype)
        for branch in ("msa", "lpp"):
            for name in ("wq", "wk", "wv", "wo"):
                p[pre + branch + "." + name] = _glorot(rng, c, c, dtype=dtype)
            p[pre + branch + ".tau"] = _ones((cfg.heads,), dtype)
        p[pre + "lpp.wm"] = _zeros((3, c), dtype)
        p[pre + "s_msa"] = _ones((1,), dtype)
        p[pre + "s_lpp"] = _zeros((1,), dtype)
        p[pre + "ffn.w1"] = _glorot(rng, c, cfg.ffn_mult * c, dtype=dtype)
        p[pre + "ffn.b1"] = _zeros((cfg.ffn_mult * c,), dtype)
        p[pre + "ffn.w2"] = _glorot(rng, cfg.ffn_mult * c, c, dtype=dtype)
        p[pre + "ffn.b2"] = _zeros((c,), dtype)
    p["out_proj.w"] = _zeros((w, d), dtype)
    p["out_proj.b"] = _zeros((d,), dtype)
    return p


def param_count(params: dict[str, Tensor]) -> int:
    return sum(t.size for t in params.values())


# ---------------------------------------------------------------- helpers

@functools.lru_cache(maxsize=8)
def _t_table(max_t: int) -> np.ndarray:
    return T.sinusoidal_table(max_t, T_EMBED_DIM, dtype=np.float64)


def t_embed(t, cfg: GppConfig, dtype=np.float32) -> Tensor:
    """Sinusoidal timestep embedding, [64] for a scalar t or [B,64] for a batch."""
    t_arr = np.asarray(t)
    if (t_arr < 0).any() or (t_arr > cfg.max_t).any():
        raise ValidationError(f"timestep outside 0..{cfg.max_t}: {t}")
    return Tensor(_t_table(cfg.max_t)[t_arr].astype(dtype), dtype=dtype)


def _linear(x: Tensor, params, prefix: str) -> Tensor:
    return T.add(T.matmul(x, params[prefix + ".w"]), params[prefix + ".b"])


def gpp_ln(x: Tensor, s_vec: Tensor, temb: Tensor, params: dict[str, Tensor],
           prefix: str = "ln") -> Tensor:
    """(1 + dgamma) * LN(x) + beta, with (dgamma, beta) produced by a one-hidden-
    layer MLP from the global scores and the timestep embedding. The MLP output
    layer is zero-initialized, so at init this is plain LN."""
    c = x.shape[-1]
    if params[prefix + ".w2"].shape[-1] != 2 * c:
        raise DimensionError(
            f"modulation MLP emits {params[prefix + '.w2'].shape[-1]} values, "
            f"needs {2 * c} for width {c}")
    cond = T.concat([s_vec, temb], axis=-1)
    hidden = T.gelu(T.add(T.matmul(cond, params[prefix + ".w1"]), params[prefix + ".b1"]))
    mod = T.add(T.matmul(hidden, params[prefix + ".w2"]), params[prefix + ".b2"])
    batched = mod.ndim == 2
    shape = (mod.shape[0], 1, 2 * c) if batched else (1, 2 * c)
    mod = T.reshape(mod, shape)
    dgamma = T.slice_axis(mod, -1, 0, c)
    beta = T.slice_axis(mod, -1, c, 2 * c)
    normed = T.layer_norm_normalize(x)
    return T.add(T.mul(normed, T.add(dgamma, 1.0)), beta)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    """[B,N,c] -> [B,H,p,N]: each of the p channels becomes a length-N vector."""
    b, n, c = x.shape
    y = T.reshape(x, (b, n, heads, c // heads))
    return T.contiguous(T.transpose(y, (0, 2, 3, 1)))


def _merge_heads(y: Tensor) -> Tensor:
    b, h, p, n = y.shape
    z = T.transpose(y, (0, 3, 1, 2))
    return T.reshape(z, (b, n, h * p))


def _channel_attention(q: Tensor, k: Tensor, v: Tensor, tau: Tensor,
                       heads: int) -> Tensor:
    """Attention along the channel dimension with L2-normalized channel
    descriptors and a learnable per-head temperature."""
    qh = T.l2_normalize(_split_heads(q, heads), axis=-1)
    kh = T.l2_normalize(_split_heads(k, heads), axis=-1)
    vh = _split_heads(v, heads)
    logits = T.matmul(qh, T.transpose(kh, (0, 1, 3, 2)))          # [B,H,p,p]
    logits = T.mul(logits, T.reshape(tau, (1, heads, 1, 1)))
    att = T.softmax(logits, axis=-1)
    return _merge_heads(T.matmul(att, vh))


def _ensure_batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 2:
        return T.reshape(x, (1,) + x.shape), True
    return x, False


def channel_msa(x: Tensor, params: dict[str, Tensor], prefix: str = "msa",
                heads: int = 4) -> Tensor:
    xb, squeezed = _ensure_batched(x)
    c = xb.shape[-1]
    if c % heads:
        raise ConfigurationError(f"channels {c} not divisible by heads {heads}")
    q = T.matmul(xb, params[prefix + ".wq"])
    k = T.matmul(xb, params[prefix + ".wk"])
    v = T.matmul(xb, params[prefix + ".wv"])
    out = _channel_attention(q, k, v, params[prefix + ".tau"], heads)
    out = T.matmul(out, params[prefix + ".wo"])
    return T.reshape(out, x.shape) if squeezed else out


def lpp_attn(x: Tensor, m_up: Tensor, params: dict[str, Tensor],
             prefix: str = "lpp", heads: int = 4) -> Tensor:
    """Channel attention whose key/value inputs are gated per position by the
    upsampled quality map: gate = 1 + tanh(m_up @ Wm). Wm starts at zero, so
    the branch begins as plain channel attention."""
    xb, squeezed = _ensure_batched(x)
    mb, _ = _ensure_batched(m_up)
    if mb.shape[:2] != xb.shape[:2]:
        raise DimensionError(f"quality map rows {mb.shape} do not align with tokens {xb.shape}")
    c = xb.shape[-1]
    if c % heads:
        raise ConfigurationError(f"channels {c} not divisible by heads {heads}")
    gate = T.add(T.tanh(T.matmul(mb, params[prefix + ".wm"])), 1.0)
    gated = T.mul(xb, gate)
    q = T.matmul(xb, params[prefix + ".wq"])
    k = T.matmul(gated, params[prefix + ".wk"])
    v = T.matmul(gated, params[prefix + ".wv"])
    out = _channel_attention(q, k, v, params[prefix + ".tau"], heads)
    out = T.matmul(out, params[prefix + ".wo"])
    return T.reshape(out, x.shape) if squeezed else out


def pos_embed(m_up: Tensor, coords: Tensor, params: dict[str, Tensor]) -> Tensor:
    """[m_up | coords] @ W -> [.., N, w]; learned, guided by the quality map."""
    return T.matmul(T.concat([m_up, coords], axis=-1), params["pos.w"])


def ffn(x: Tensor, params: dict[str, Tensor], prefix: str) -> Tensor:
    h = T.gelu(T.add(T.matmul(x, params[prefix + ".w1"]), params[prefix + ".b1"]))
    return T.add(T.matmul(h, params[prefix + ".w2"]), params[prefix + ".b2"])


def gpp_block(x: Tensor, ll_tokens: Tensor, s_vec: Tensor, temb: Tensor,
              m_up: Tensor | None, params: dict[str, Tensor], cfg: GppConfig,
              index: int = 0) -> Tensor:
    """Concatenate low-light tokens, run modulated-LN attention and FFN
    residuals at width 2w, then keep only the first w channels."""
    pre = f"blk{index}."
    w = x.shape[-1]
    h = T.concat([x, ll_tokens], axis=-1)
    a = gpp_ln(h, s_vec, temb, params, pre + "ln1")
    att = T.mul(channel_msa(a, params, pre + "msa", cfg.heads), params[pre + "s_msa"])
    if cfg.use_local_prior:
        if m_up is None:
            raise ConfigurationError("local prior enabled but no quality map provided")
        lpp = T.mul(lpp_attn(a, m_up, params, pre + "lpp", cfg.heads), params[pre + "s_lpp"])
        att = T.add(att, lpp)
    h = T.add(h, att)
    h = T.add(h, ffn(gpp_ln(h, s_vec, temb, params, pre + "ln2"), params, pre + "ffn"))
    return T.slice_axis(h, -1, 0, w)


# ---------------------------------------------------------------- full network

def _coords(n_rows: int, n_cols: int, dtype) -> np.ndarray:
    """Per-token (x, y) cell centers in [0,1], row-major token order."""
    ys = (np.arange(n_rows) + 0.5) / n_rows
    xs = (np.arange(n_cols) + 0.5) / n_cols
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    return np.stack([gx.reshape(-1), gy.reshape(-1)], axis=1).astype(dtype)


def _prior_arrays(prior, batch: int, cfg: GppConfig) -> PriorBatch:
    if prior is None:
        neutral = np.full((batch, 3), NEUTRAL_SCORE)
        nmap = np.full((batch, 3, cfg.grid, cfg.grid), NEUTRAL_SCORE)
        return PriorBatch(s=neutral, qmap=nmap, s_mean=np.full(batch, NEUTRAL_SCORE),
                          grid=cfg.grid)
    pb = prior if isinstance(prior, PriorBatch) else PriorBatch.from_priors(prior)
    if pb.s.shape[0] == 1 and batch > 1:
        pb = PriorBatch(s=np.repeat(pb.s, batch, 0), qmap=np.repeat(pb.qmap, batch, 0),
                        s_mean=np.repeat(pb.s_mean, batch, 0), grid=pb.grid)
    if pb.s.shape[0] != batch:
        raise DimensionError(f"prior batch {pb.s.shape[0]} != latent batch {batch}")
    return pb


def eps_forward(z_t: Tensor, t, z_ll: Tensor, prior, params: dict[str, Tensor],
                cfg: GppConfig) -> Tensor:
    """Predict the noise in z_t given the low-light latent and the perceptual
    prior. Accepts [d,h,w] or [B,d,h,w]; any spatial size >= 1 works.

    ``prior`` may be a PerceptualPrior, a sequence of them (one per batch
    element), a prebuilt PriorBatch, or None when both prior paths are off.
    """
    if z_t.shape != z_ll.shape:
        raise DimensionError(f"z_t {z_t.shape} and z_ll {z_ll.shape} must share shape")
    squeezed = z_t.ndim == 3
    zb = T.reshape(z_t, (1,) + z_t.shape) if squeezed else z_t
    lb = T.reshape(z_ll, (1,) + z_ll.shape) if squeezed else z_ll
    if zb.ndim != 4:
        raise DimensionError(f"latent must be rank 3 or 4, got {z_t.shape}")
    b, d, hh, ww = zb.shape
    if d != cfg.d:
        raise ConfigurationError(f"latent channels {d} != configured d {cfg.d}")
    n = hh * ww
    dtype = params["in_proj.w"].dtype

    uses_prior = cfg.use_local_prior or cfg.use_global_prior
    if prior is None and uses_prior:
        raise ConfigurationError("configuration consumes the prior but none was given")
    pb = _prior_arrays(prior if uses_prior else None, b, cfg)

    # local map, upsampled to the latent grid and flattened per token
    if cfg.use_local_prior:
        if pb.grid != cfg.grid:
            raise ConfigurationError(f"prior grid {pb.grid} != configured grid {cfg.grid}")
        with T.no_grad():
            up = T.bilinear_resize(Tensor(pb.qmap.astype(dtype), dtype=dtype), hh, ww)
            m_up = T.transpose(T.reshape(up, (b, 3, n)), (0, 2, 1))    # [B,N,3]
    else:
        m_up = Tensor(np.full((b, n, 3), NEUTRAL_SCORE, dtype=dtype), dtype=dtype)

    # global scores: replaced by the neutral constant when disabled or when
    # injected additively (variant 4) instead of through the modulated LN
    if cfg.use_global_prior and cfg.global_inject == "gpp_ln":
        s_vec = Tensor(pb.s.astype(dtype), dtype=dtype)
    else:
        s_vec = Tensor(np.full((b, 3), NEUTRAL_SCORE, dtype=dtype), dtype=dtype)
    if cfg.use_global_prior and cfg.global_inject == "add_to_latent":
        shift = Tensor(pb.s_mean.reshape(b, 1, 1, 1).astype(dtype), dtype=dtype)
        zb = T.add(zb, shift)

    t_arr = np.asarray(t)
    if t_arr.ndim == 0:
        t_arr = np.repeat(t_arr[None], b)
    temb = t_embed(t_arr, cfg, dtype=dtype)

    tokens = T.transpose(T.reshape(zb, (b, d, n)), (0, 2, 1))          # [B,N,d]
    ll_tokens_in = T.transpose(T.reshape(lb, (b, d, n)), (0, 2, 1))
    coords = Tensor(np.broadcast_to(_coords(hh, ww, dtype), (b, n, 2)).copy(), dtype=dtype)

    x = T.add(_linear(tokens, params, "in_proj"), pos_embed(m_up, coords, params))
    ll_tokens = _linear(ll_tokens_in, params, "ll_proj")
    lpp_map = m_up if cfg.use_local_prior else None
    for i in range(cfg.blocks):
        x = gpp_block(x, ll_tokens, s_vec, temb, lpp_map, params, cfg, i)
    out = _linear(x, params, "out_proj")                               # [B,N,d]
    out = T.reshape(T.transpose(out, (0, 2, 1)), (b, d, hh, ww))
    return T.reshape(out, z_t.shape) if squeezed else out


class GppModel:
    """Callable bundle of parameters and configuration for the samplers."""

    def __init__(self, params: dict[str, Tensor], cfg: GppConfig):
        self.params = params
        self.cfg = cfg

    def __call__(self, z_t: Tensor, t, z_ll: Tensor, prior) -> Tensor:
        return eps_forward(z_t, t, z_ll, prior, self.params, self.cfg)
