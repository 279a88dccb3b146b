"""Encoder-only temporal backbone with random sequence masking and a multi-quantile head.

Token layout per series (fixed capacity)::

    [ ctx slot 0 ... ctx slot C-1 | register | fut slot 0 ... fut slot F-1 ]

Context patches are right-aligned: when a window carries fewer than C patches
(short input, or a training-time mask), the leading ``l_mask`` slots hold
zero patches before the input projection.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .config import BackboneConfig
from .errors import DataError, NumericError, WindowError


@dataclass
class NormStats:
    mu: float
    sigma: float


@dataclass
class SeriesWindow:
    context: np.ndarray
    target: np.ndarray | None = None
    context_timestamps: np.ndarray | None = None
    target_timestamps: np.ndarray | None = None

    def __post_init__(self):
        self.context = np.asarray(self.context, dtype=np.float64)
        if self.target is not None:
            self.target = np.asarray(self.target, dtype=np.float64)
        for name in ("context_timestamps", "target_timestamps"):
            ts = getattr(self, name)
            if ts is None:
                continue
            ts = np.asarray(ts, dtype=np.int64)
            if len(ts) > 1:
                steps = np.diff(ts)
                if steps[0] <= 0 or np.any(steps != steps[0]):
                    raise DataError(f"{name}: timestamps must be strictly increasing with constant stride")
            setattr(self, name, ts)

    @property
    def stride(self) -> int | None:
        ts = self.context_timestamps
        if ts is None or len(ts) < 2:
            return None
        return int(ts[1] - ts[0])


@dataclass
class QuantileForecast:
    values: np.ndarray  # [H, |Q|], original scale
    quantiles: tuple[float, ...]
    timestamps: np.ndarray | None = None

    def at(self, q: float) -> np.ndarray:
        try:
            return self.values[:, list(self.quantiles).index(q)]
        except ValueError:
            raise KeyError(f"quantile level {q} not in {self.quantiles}") from None

    @property
    def median(self) -> np.ndarray:
        return self.at(0.5)

    @property
    def horizon(self) -> int:
        return self.values.shape[0]


@dataclass
class TokenSequence:
    tokens: Tensor           # [n_tokens, d_model]
    positions: Tensor        # [n_tokens]
    valid_from: int
    n_ctx: int
    n_fut: int = field(default=0)

    @property
    def register_index(self) -> int:
        return self.n_ctx


# ----------------------------------------------------------------------------
# data-side transforms (numpy, no parameters)
# ----------------------------------------------------------------------------

def instance_normalize(context, eps: float = 1e-5) -> tuple[np.ndarray, NormStats]:
    x = np.asarray(context, dtype=np.float64)
    if x.size == 0:
        raise DataError("instance_normalize: empty context")
    if not np.all(np.isfinite(x)):
        raise DataError("instance_normalize: context contains non-finite values")
    mu = float(x.mean())
    sigma = float(x.std())
    return (x - mu) / (sigma + eps), NormStats(mu, sigma)


def denormalize(normed, stats: NormStats, eps: float = 1e-5) -> np.ndarray:
    return np.asarray(normed, dtype=np.float64) * (stats.sigma + eps) + stats.mu


def patchify(normed, patch_len: int) -> np.ndarray:
    x = np.asarray(normed)
    if x.shape[-1] % patch_len:
        raise WindowError(
            f"series length {x.shape[-1]} is not a multiple of patch_len={patch_len}")
    return x.reshape(*x.shape[:-1], x.shape[-1] // patch_len, patch_len)


def sample_mask_length(rng: np.random.Generator, min_ctx: int, max_ctx: int, size=None):
    """Uniform integer in [0, max_ctx - min_ctx] (patch units)."""
    return rng.integers(0, max_ctx - min_ctx + 1, size=size)


def prepare_contexts(contexts: np.ndarray, cfg: BackboneConfig,
                     keep_patches: np.ndarray | None = None):
    """Right-align, mask and normalize a batch of contexts.

    ``contexts`` is ``[B, L]``. Contexts longer than the capacity are truncated
    to their most recent values. ``keep_patches`` (training) caps the number
    of visible patches per row; by default every available patch is kept.
    Statistics are computed over the visible values only.

    Returns ``(normed [B, L_max], l_mask [B], mu [B], sigma [B])``.
    """
    x = np.asarray(contexts, dtype=np.float64)
    if x.ndim == 1:
        x = x[None]
    if x.shape[-1] == 0:
        raise WindowError("empty context")
    if not np.all(np.isfinite(x)):
        raise DataError("context contains non-finite values")
    P, cap = cfg.patch_len, cfg.max_context
    B, L = x.shape
    if L > cap:
        x = x[:, L - cap:]
        L = cap
    keep_len = np.full(B, L, dtype=np.int64)
    if keep_patches is not None:
        keep_len = np.minimum(keep_len, np.asarray(keep_patches, dtype=np.int64) * P)
    n_patches = -(-keep_len // P)
    if np.any(n_patches < cfg.min_ctx_patches):
        raise WindowError(
            f"context of {int(keep_len.min())} steps is shorter than the minimum "
            f"{cfg.min_ctx_patches} patches x {P}")
    l_mask = cfg.max_ctx_patches - n_patches
    buf = np.zeros((B, cap))
    buf[:, cap - L:] = x
    visible = np.arange(cap)[None, :] >= (cap - keep_len)[:, None]
    count = keep_len.astype(np.float64)
    mu = np.where(visible, buf, 0.0).sum(1) / count
    centered = np.where(visible, buf - mu[:, None], 0.0)
    sigma = np.sqrt((centered ** 2).sum(1) / count)
    normed = centered / (sigma + cfg.eps)[:, None]
    return normed, l_mask, mu, sigma


# ----------------------------------------------------------------------------
# partial rotary embedding
# ----------------------------------------------------------------------------

def rope_tables(positions: Tensor, cfg: BackboneConfig, rotate: Tensor | None = None,
                dtype=torch.float64) -> tuple[Tensor, Tensor]:
    """cos/sin tables ``[T, rope_dim/2]``. Rows with ``rotate == False`` get the identity."""
    half = cfg.rope_dim // 2
    i = torch.arange(half, dtype=torch.float64)
    inv_freq = cfg.rope_base ** (-2.0 * i / cfg.d_head)
    angles = positions.to(torch.float64)[:, None] * inv_freq[None, :]
    if rotate is not None:
        angles = angles * rotate.to(torch.float64)[:, None]
    return torch.cos(angles).to(dtype), torch.sin(angles).to(dtype)


def apply_rope(x: Tensor, cos: Tensor, sin: Tensor) -> Tensor:
    """Rotate interleaved pairs (2i, 2i+1) of the leading ``2*cos.shape[-1]`` dims of ``x``."""
    r = 2 * cos.shape[-1]
    head, tail = x[..., :r], x[..., r:]
    even, odd = head[..., 0::2], head[..., 1::2]
    rot_even = even * cos - odd * sin
    rot_odd = even * sin + odd * cos
    rotated = torch.stack((rot_even, rot_odd), dim=-1).flatten(-2)
    return torch.cat((rotated, tail), dim=-1)


def p_rope(vec, position, cfg: BackboneConfig):
    """Apply partial RoPE to ``vec`` (``[..., d_head]``) at integer ``position``.

    Only the highest-frequency ``rope_dim`` dimensions are rotated; the rest
    pass through untouched. Accepts numpy arrays or tensors; ``position`` may
    be a scalar or a ``[T]`` vector aligned with ``vec``'s second-to-last axis.
    """
    as_numpy = not isinstance(vec, Tensor)
    x = torch.as_tensor(np.asarray(vec) if as_numpy else vec)
    if x.shape[-1] != cfg.d_head:
        raise ValueError(f"expected last dim {cfg.d_head}, got {x.shape[-1]}")
    pos = torch.as_tensor(position).reshape(-1)
    cos, sin = rope_tables(pos, cfg, dtype=x.dtype)
    if pos.numel() == 1:
        cos, sin = cos[0], sin[0]
    out = apply_rope(x, cos, sin)
    return out.numpy() if as_numpy else out


# ----------------------------------------------------------------------------
# network
# ----------------------------------------------------------------------------

def _init_linear(layer: nn.Linear, bias: float = 0.0):
    nn.init.trunc_normal_(layer.weight, std=0.02, a=-0.04, b=0.04)
    if layer.bias is not None:
        nn.init.constant_(layer.bias, bias)


class GatedAttention(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        d = cfg.d_model
        self.n_heads = cfg.n_heads
        self.d_head = cfg.d_head
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d)
        self.v = nn.Linear(d, d)
        self.gate = nn.Linear(d, d)
        self.out = nn.Linear(d, d)
        for layer in (self.q, self.k, self.v, self.out):
            _init_linear(layer)
        # gates start near-open
        _init_linear(self.gate, bias=2.0)

    def _split(self, t: Tensor) -> Tensor:
        B, T, _ = t.shape
        return t.view(B, T, self.n_heads, self.d_head).transpose(1, 2)

    def forward(self, x: Tensor, cos: Tensor, sin: Tensor, layer_index: int = 0,
                return_weights: bool = False, use_gate: bool = True):
        B, T, d = x.shape
        q = apply_rope(self._split(self.q(x)), cos, sin)
        k = apply_rope(self._split(self.k(x)), cos, sin)
        v = self._split(self.v(x))
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.d_head)
        if torch.isnan(scores).any():
            bad = torch.isnan(scores).flatten(2).any(-1).any(0).nonzero().flatten().tolist()
            raise NumericError(
                f"NaN in attention scores at layer {layer_index}, head(s) {bad}; "
                f"input finite={bool(torch.isfinite(x).all())}, max|x|={float(x.detach().abs().max()):.3g}")
        weights = torch.softmax(scores, dim=-1)
        heads = weights @ v
        if use_gate:
            heads = heads * torch.sigmoid(self._split(self.gate(x)))
        merged = heads.transpose(1, 2).reshape(B, T, d)
        out = self.out(merged)
        return (out, weights) if return_weights else out


class EncoderBlock(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.norm1 = nn.LayerNorm(cfg.d_model)
        self.attn = GatedAttention(cfg)
        self.norm2 = nn.LayerNorm(cfg.d_model)
        self.ff1 = nn.Linear(cfg.d_model, cfg.d_ff)
        self.ff2 = nn.Linear(cfg.d_ff, cfg.d_model)
        _init_linear(self.ff1)
        _init_linear(self.ff2)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x: Tensor, cos: Tensor, sin: Tensor, layer_index: int = 0) -> Tensor:
        x = x + self.drop(self.attn(self.norm1(x), cos, sin, layer_index))
        x = x + self.drop(self.ff2(F.gelu(self.ff1(self.norm2(x)))))
        return x


class Backbone(nn.Module):
    """Patch projection, register/future tokens, encoder stack and quantile head."""

    def __init__(self, cfg: BackboneConfig, seed: int | None = None):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        if seed is not None:
            torch.manual_seed(seed)
        d = cfg.d_model
        self.proj = nn.Linear(cfg.patch_len, d)
        _init_linear(self.proj)
        self.register_token = nn.Parameter(torch.empty(d))
        self.future_token = nn.Parameter(torch.empty(d))
        nn.init.trunc_normal_(self.register_token, std=0.02, a=-0.04, b=0.04)
        nn.init.trunc_normal_(self.future_token, std=0.02, a=-0.04, b=0.04)
        self.blocks = nn.ModuleList(EncoderBlock(cfg) for _ in range(cfg.n_layers))
        self.head = nn.Linear(d, cfg.patch_len * len(cfg.quantiles))
        _init_linear(self.head)

    @property
    def dtype(self):
        return self.proj.weight.dtype

    def embed(self, ctx_patches: Tensor, l_mask: Tensor) -> Tensor:
        """``[B, C, patch_len]`` patches -> ``[B, n_tokens, d]`` input tokens."""
        B, C, _ = ctx_patches.shape
        if C != self.cfg.max_ctx_patches:
            raise WindowError(f"expected {self.cfg.max_ctx_patches} context slots, got {C}")
        slot = torch.arange(C)
        keep = (slot[None, :] >= l_mask.reshape(-1, 1)).to(ctx_patches.dtype)
        z_ctx = self.proj(ctx_patches * keep[..., None])
        d = self.cfg.d_model
        reg = self.register_token.view(1, 1, d).expand(B, 1, d)
        fut = self.future_token.view(1, 1, d).expand(B, self.cfg.max_fut_patches, d)
        return torch.cat((z_ctx, reg, fut), dim=1)

    def encode(self, tokens: Tensor, n_prefix: int = 0) -> Tensor:
        """Run the encoder stack. The first ``n_prefix`` tokens are prompts and are not rotated."""
        T = tokens.shape[1]
        positions = torch.cat((torch.zeros(n_prefix, dtype=torch.long), torch.arange(T - n_prefix)))
        rotate = torch.cat((torch.zeros(n_prefix), torch.ones(T - n_prefix)))
        cos, sin = rope_tables(positions, self.cfg, rotate, dtype=tokens.dtype)
        x = tokens
        for i, block in enumerate(self.blocks):
            x = block(x, cos, sin, layer_index=i)
        return x

    def quantiles(self, encoded: Tensor, fut_count: int, n_prefix: int = 0) -> Tensor:
        """Future-slot representations -> normalized quantiles ``[B, fut_count*patch_len, |Q|]``."""
        cfg = self.cfg
        if fut_count > cfg.max_fut_patches:
            raise WindowError(
                f"horizon needs {fut_count} future patches but capacity is {cfg.max_fut_patches}; "
                "use rolling_forecast")
        start = n_prefix + cfg.max_ctx_patches + 1
        fut = encoded[:, start:start + fut_count]
        out = self.head(fut)
        B = out.shape[0]
        return out.view(B, fut_count, cfg.patch_len, len(cfg.quantiles)).reshape(
            B, fut_count * cfg.patch_len, len(cfg.quantiles))

    def forward(self, ctx_normed: Tensor, l_mask: Tensor, fut_count: int) -> Tensor:
        """``ctx_normed`` is ``[B, L_max]`` (normalized, right-aligned)."""
        patches = ctx_normed.view(ctx_normed.shape[0], self.cfg.max_ctx_patches, self.cfg.patch_len)
        return self.quantiles(self.encode(self.embed(patches, l_mask)), fut_count)


# ----------------------------------------------------------------------------
# functional surface
# ----------------------------------------------------------------------------

def build_token_sequence(ctx_patches, l_mask: int, fut_count: int, model: Backbone,
                         cfg: BackboneConfig | None = None) -> TokenSequence:
    cfg = cfg or model.cfg
    if not 0 <= l_mask <= cfg.max_ctx_patches - cfg.min_ctx_patches:
        raise WindowError(
            f"mask length {l_mask} outside [0, {cfg.max_ctx_patches - cfg.min_ctx_patches}]")
    if fut_count > cfg.max_fut_patches:
        raise WindowError(f"fut_count {fut_count} exceeds max_fut_patches={cfg.max_fut_patches}")
    patches = torch.as_tensor(np.asarray(ctx_patches), dtype=model.dtype)[None]
    tokens = model.embed(patches, torch.tensor([l_mask]))[0]
    return TokenSequence(tokens=tokens, positions=torch.arange(cfg.n_tokens), valid_from=l_mask,
                         n_ctx=cfg.max_ctx_patches, n_fut=fut_count)


def gated_attention(tokens: Tensor, layer: GatedAttention, cfg: BackboneConfig,
                    positions: Tensor | None = None, return_weights: bool = False):
    """Gated multi-head attention over a ``[T, d]`` or ``[B, T, d]`` token matrix."""
    squeeze = tokens.dim() == 2
    x = tokens[None] if squeeze else tokens
    if positions is None:
        positions = torch.arange(x.shape[1])
    cos, sin = rope_tables(positions, cfg, dtype=x.dtype)
    out = layer(x, cos, sin, return_weights=return_weights)
    if return_weights:
        out, w = out
        return (out[0], w[0]) if squeeze else (out, w)
    return out[0] if squeeze else out


def encoder_forward(seq: TokenSequence | Tensor, model: Backbone, train_mode: bool = False) -> Tensor:
    tokens = seq.tokens if isinstance(seq, TokenSequence) else seq
    squeeze = tokens.dim() == 2
    model.train(train_mode)
    out = model.encode(tokens[None] if squeeze else tokens)
    return out[0] if squeeze else out


def quantile_head(encoded: Tensor, fut_count: int, model: Backbone) -> Tensor:
    squeeze = encoded.dim() == 2
    out = model.quantiles(encoded[None] if squeeze else encoded, fut_count)
    return out[0] if squeeze else out


def pinball_loss(pred, target, quantiles) -> Tensor:
    """Mean pinball loss. ``pred`` is ``[..., H, |Q|]``, ``target`` is ``[..., H]``."""
    pred_t = torch.as_tensor(pred)
    target_t = torch.as_tensor(target, dtype=pred_t.dtype)
    q = torch.as_tensor(quantiles, dtype=pred_t.dtype)
    diff = target_t[..., None] - pred_t
    return torch.maximum((q - 1) * diff, q * diff).mean()


def l1_median_loss(pred: Tensor, target: Tensor, median_index: int) -> Tensor:
    return (pred[..., median_index] - target).abs().mean()


def _to_tensor(x, model: Backbone) -> Tensor:
    return torch.as_tensor(np.asarray(x), dtype=model.dtype)


def forecast_normalized(model: Backbone, contexts: np.ndarray, horizon: int,
                        keep_patches: np.ndarray | None = None):
    """Batched forward from raw contexts. Returns (normalized preds tensor, mu, sigma)."""
    cfg = model.cfg
    fut_count = -(-horizon // cfg.patch_len)
    if fut_count > cfg.max_fut_patches:
        raise WindowError(
            f"horizon {horizon} exceeds capacity {cfg.max_horizon}; use rolling_forecast")
    normed, l_mask, mu, sigma = prepare_contexts(contexts, cfg, keep_patches)
    pred = model(_to_tensor(normed, model), torch.as_tensor(l_mask), fut_count)[:, :horizon]
    return pred, mu, sigma


def utp_forward(window: SeriesWindow, model: Backbone, rng: np.random.Generator | None = None,
                train_mode: bool = False, horizon: int | None = None,
                loss_kind: str = "pinball") -> tuple[QuantileForecast, Tensor | None]:
    """Forecast one window. In train mode a random mask length is drawn from ``rng``."""
    cfg = model.cfg
    if horizon is None:
        if window.target is None:
            raise WindowError("horizon required when the window has no target")
        horizon = len(window.target)
    keep = None
    if train_mode:
        rng = rng if rng is not None else np.random.default_rng()
        l_mask = int(sample_mask_length(rng, cfg.min_ctx_patches, cfg.max_ctx_patches))
        keep = np.array([cfg.max_ctx_patches - l_mask])
    model.train(train_mode)
    pred, mu, sigma = forecast_normalized(model, window.context[None], horizon, keep)
    loss = None
    if window.target is not None:
        target = (window.target[:horizon] - mu[0]) / (sigma[0] + cfg.eps)
        target_t = _to_tensor(target, model)[None]
        if loss_kind == "pinball":
            loss = pinball_loss(pred, target_t, cfg.quantiles)
        else:
            loss = l1_median_loss(pred, target_t, cfg.median_index)
    values = pred[0].detach().cpu().numpy().astype(np.float64) * (sigma[0] + cfg.eps) + mu[0]
    ts = None
    if window.context_timestamps is not None and window.stride is not None:
        ts = window.context_timestamps[-1] + window.stride * np.arange(1, horizon + 1)
    return QuantileForecast(values, tuple(cfg.quantiles), ts), loss


def rolling(step_fn, context: np.ndarray, total_horizon: int, max_horizon: int,
            max_context: int, median_index: int) -> np.ndarray:
    """Generic rolling driver.

    ``step_fn(context, offset, h)`` returns ``[..., h, |Q|]`` original-scale
    forecasts for the ``h`` steps following ``context`` (``offset`` steps past
    the original context end). The median path is appended to the context
    after every pass and the context is trimmed to ``max_context``.
    """
    if total_horizon <= 0:
        raise WindowError(f"total_horizon must be positive, got {total_horizon}")
    ctx = np.asarray(context, dtype=np.float64)
    chunks = []
    done = 0
    while done < total_horizon:
        h = min(max_horizon, total_horizon - done)
        out = step_fn(ctx, done, h)
        chunks.append(out)
        ctx = np.concatenate((ctx, out[..., median_index]), axis=-1)[..., -max_context:]
        done += h
    return np.concatenate(chunks, axis=-2)


def rolling_forecast(window: SeriesWindow, model: Backbone, total_horizon: int,
                     cfg: BackboneConfig | None = None) -> QuantileForecast:
    cfg = cfg or model.cfg
    model.eval()

    def step(ctx, _offset, h):
        with torch.no_grad():
            pred, mu, sigma = forecast_normalized(model, ctx[None], h)
        return pred[0].numpy().astype(np.float64) * (sigma[0] + cfg.eps) + mu[0]

    values = rolling(step, window.context, total_horizon, cfg.max_horizon, cfg.max_context,
                     cfg.median_index)
    ts = None
    if window.context_timestamps is not None and window.stride is not None:
        ts = window.context_timestamps[-1] + window.stride * np.arange(1, total_horizon + 1)
    return QuantileForecast(values, tuple(cfg.quantiles), ts)
