"""Spatio-temporal adapter: metadata fusion, affinity-gated filtering and low-rank prompts.

Every operation acts independently per node (no node-by-node intermediate),
so cost grows linearly in the number of nodes.
"""

from __future__ import annotations

import math

import numpy as np
import torch
from torch import Tensor, nn

from .backbone import Backbone, l1_median_loss, pinball_loss, prepare_contexts
from .config import AdapterConfig
from .data import calendar_features
from .errors import AdapterShapeError, ConfigError, MetadataError


class STAdapter(nn.Module):
    def __init__(self, cfg: AdapterConfig, d_model: int, seed: int | None = None):
        super().__init__()
        cfg.validate(d_model)
        self.cfg = cfg
        self.d_model = d_model
        if seed is not None:
            torch.manual_seed(seed)
        c = cfg.id_dim
        cycles = cfg.cycle_sizes()
        self.node_bank = nn.Parameter(0.1 * torch.randn(cfg.n_nodes, c))
        self.calendar_banks = nn.ParameterDict(
            {name: nn.Parameter(0.1 * torch.randn(k, c)) for name, k in cycles})
        self.meta_proj = nn.Linear((1 + len(cycles)) * c, d_model, bias=False)
        self.spatial_proj = nn.Linear(c, d_model, bias=False)
        self.temporal_proj = nn.Linear(c, d_model, bias=False)
        for layer in (self.meta_proj, self.spatial_proj, self.temporal_proj):
            nn.init.trunc_normal_(layer.weight, std=0.02, a=-0.04, b=0.04)
        self.fusion_logits = nn.Parameter(torch.zeros(3))          # w_s, w_t, w_d
        self.lag_weights = nn.Parameter(torch.full((cfg.n_nodes, cfg.max_lag), 1.0 / cfg.max_lag))
        self.prototypes = nn.Parameter(0.02 * torch.randn(cfg.n_prototypes, d_model))
        self.prompt_u = nn.Parameter(0.02 * torch.randn(cfg.n_prompts, cfg.prompt_rank))
        self.prompt_v = nn.Parameter(0.02 * torch.randn(d_model, cfg.prompt_rank))

    @property
    def cycle_names(self) -> list[str]:
        return list(self.cfg.calendar_cycles)

    def zero_(self) -> "STAdapter":
        """Zero banks and prompts (identity adapter when prompts are disabled)."""
        with torch.no_grad():
            self.node_bank.zero_()
            for bank in self.calendar_banks.values():
                bank.zero_()
            self.meta_proj.weight.zero_()
            self.prompt_u.zero_()
        return self


# ----------------------------------------------------------------------------
# metadata fusion
# ----------------------------------------------------------------------------

def _lookup(adapter: STAdapter, cal_idx: dict) -> list[Tensor]:
    out = []
    for name in adapter.cycle_names:
        if name not in cal_idx:
            raise MetadataError(f"calendar index for cycle {name!r} missing")
        bank = adapter.calendar_banks[name]
        idx = torch.as_tensor(np.asarray(cal_idx[name]), dtype=torch.long)
        if idx.numel() and (int(idx.min()) < 0 or int(idx.max()) >= bank.shape[0]):
            raise MetadataError(
                f"cycle {name!r}: index out of range [0, {bank.shape[0]}) "
                f"(got min {int(idx.min())}, max {int(idx.max())})")
        out.append(bank[idx])
    return out


def stmf_identifiers(node_ids, cal_idx: dict, adapter: STAdapter) -> Tensor:
    """Identifier per (node, patch).

    ``cal_idx`` maps cycle name to an index array of shape ``[..., P]``; the
    result is ``[..., N, P, d_model]``. The projection of the concatenated
    embeddings is computed block-wise so the concatenation is never built.
    """
    node_idx = torch.as_tensor(np.asarray(node_ids), dtype=torch.long)
    if node_idx.numel() and (int(node_idx.min()) < 0 or int(node_idx.max()) >= adapter.cfg.n_nodes):
        raise MetadataError(f"node id out of range [0, {adapter.cfg.n_nodes})")
    c = adapter.cfg.id_dim
    W = adapter.meta_proj.weight                       # [d, (1+C)c]
    node_part = adapter.node_bank[node_idx] @ W[:, :c].T          # [N, d]
    cal_part = 0
    for j, emb in enumerate(_lookup(adapter, cal_idx), start=1):
        cal_part = cal_part + emb @ W[:, j * c:(j + 1) * c].T    # [..., P, d]
    if not torch.is_tensor(cal_part):
        raise MetadataError("at least one calendar cycle is required")
    return node_part[:, None, :] + cal_part[..., None, :, :]


def temporal_embedding(cal_idx: dict, adapter: STAdapter) -> Tensor:
    """Mean over cycles of the projected retrieved calendar embeddings, ``[..., P, d]``."""
    embs = _lookup(adapter, cal_idx)
    return sum(adapter.temporal_proj(e) for e in embs) / len(embs)


def spatial_affinity(I_st: Tensor, node_emb_proj: Tensor) -> Tensor:
    """``<I_st[i, tau], E'_n[i]>`` -> ``[..., N, P]``."""
    return torch.einsum("...npd,nd->...np", I_st, node_emb_proj)


def temporal_affinity(I_st: Tensor, time_emb_proj: Tensor) -> Tensor:
    """``<I_st[i, tau], E'_t[tau]>``; ``time_emb_proj`` is ``[..., P, d]`` or ``[..., N, P, d]``."""
    if time_emb_proj.dim() == I_st.dim() - 1:
        time_emb_proj = time_emb_proj.unsqueeze(-3)
    return (I_st * time_emb_proj).sum(-1)


def prototype_pool(x: Tensor, prototypes: Tensor) -> Tensor:
    """Cross-attention pooling of each row of ``x`` onto the prototype set."""
    w = torch.softmax(x @ prototypes.T / math.sqrt(prototypes.shape[-1]), dim=-1)
    return w @ prototypes


def lag_shift(x: Tensor, delta: int) -> Tensor:
    """Shift along the patch axis (-2) by ``delta``, edge-padding with the first patch."""
    if delta == 0:
        return x
    pad = x[..., :1, :].expand(*x.shape[:-2], delta, x.shape[-1])
    return torch.cat((pad, x[..., :-delta, :]), dim=-2)


def lagged_affinity(I_st: Tensor, lag_weights: Tensor, prototypes: Tensor) -> Tensor:
    """``sum_delta gamma[i, delta] <I_st, Agg(I_st shifted by delta)>`` -> ``[..., N, P]``."""
    P = I_st.shape[-2]
    n_lags = lag_weights.shape[-1]
    if n_lags >= P:
        raise ConfigError(f"adapter.max_lag: {n_lags} lags need more than {P} context patches")
    # pooling is position-wise, so pooling then shifting equals shifting then pooling
    pooled = prototype_pool(I_st, prototypes)
    out = 0
    for delta in range(1, n_lags + 1):
        sim = (I_st * lag_shift(pooled, delta)).sum(-1)
        out = out + lag_weights[:, delta - 1:delta] * sim
    return out


def fusion_weights(logits: Tensor) -> Tensor:
    return torch.softmax(logits, dim=0)


def stf_gate(I_st: Tensor, S_s: Tensor, S_t: Tensor, S_d: Tensor, fusion_logits: Tensor,
             return_gate: bool = False):
    a = fusion_weights(fusion_logits)
    gate = torch.sigmoid(a[0] * S_s + a[1] * S_t + a[2] * S_d)
    out = gate[..., None] * I_st
    return (out, gate) if return_gate else out


def compose_prompts(prompt_u: Tensor, prompt_v: Tensor) -> Tensor:
    return prompt_u @ prompt_v.T


def filtered_identifiers(adapter: STAdapter, cal_idx: dict, use_stf: bool = True) -> Tensor:
    N = adapter.cfg.n_nodes
    nodes = np.arange(N)
    I_st = stmf_identifiers(nodes, cal_idx, adapter)
    if not use_stf:
        return I_st
    S_s = spatial_affinity(I_st, adapter.spatial_proj(adapter.node_bank))
    S_t = temporal_affinity(I_st, temporal_embedding(cal_idx, adapter))
    S_d = lagged_affinity(I_st, adapter.lag_weights, adapter.prototypes)
    return stf_gate(I_st, S_s, S_t, S_d, adapter.fusion_logits)


# ----------------------------------------------------------------------------
# adapted forward
# ----------------------------------------------------------------------------

def patch_timestamps(last_ts: np.ndarray, n_patches: int, patch_len: int, stride: int) -> np.ndarray:
    """Start timestamp of each visible context patch; ``last_ts`` is ``[B]``."""
    offsets = (n_patches * patch_len - 1 - patch_len * np.arange(n_patches)) * stride
    return np.asarray(last_ts, dtype=np.int64)[:, None] - offsets[None, :]


def sta_forward(panel, timestamps, backbone: Backbone, adapter: STAdapter, targets=None,
                loss_kind: str = "l1_median", train_mode: bool = False, stride: int | None = None,
                return_tensor: bool = False):
    """Adapted forecast for a batch of panel slices.

    ``panel`` is ``[B, N, L]`` (or ``[N, L]``), ``timestamps`` the matching
    ``[B, L]`` (or ``[L]``) context epoch seconds. ``targets`` ``[B, N, H]``
    sets the horizon; otherwise pass the horizon through ``targets=int``.

    Returns ``(forecasts [B, N, H, |Q|] original scale, loss or None)``.
    """
    bcfg, acfg = backbone.cfg, adapter.cfg
    x = np.asarray(panel, dtype=np.float64)
    ts = np.asarray(timestamps, dtype=np.int64)
    squeeze = x.ndim == 2
    if squeeze:
        x, ts = x[None], ts[None]
    B, N, L = x.shape
    if N != acfg.n_nodes:
        raise AdapterShapeError(f"panel has {N} nodes but the adapter was built for {acfg.n_nodes}")
    if isinstance(targets, (int, np.integer)):
        horizon, y = int(targets), None
    else:
        y = np.asarray(targets, dtype=np.float64)
        y = y[None] if squeeze else y
        horizon = y.shape[-1]
    if stride is None:
        if ts.shape[-1] < 2:
            raise MetadataError("need at least two timestamps (or an explicit stride)")
        stride = int(ts[0, 1] - ts[0, 0])
    fut_count = -(-horizon // bcfg.patch_len)

    for module in (backbone, adapter):
        if module.training != train_mode:
            module.train(train_mode)
    normed, l_mask, mu, sigma = prepare_contexts(x.reshape(B * N, L), bcfg)
    dtype = backbone.dtype
    patches = torch.as_tensor(normed, dtype=dtype).view(B * N, bcfg.max_ctx_patches, bcfg.patch_len)
    tokens = backbone.embed(patches, torch.as_tensor(l_mask))
    C = bcfg.max_ctx_patches
    valid_from = int(l_mask[0])
    n_visible = C - valid_from

    if acfg.use_stmf:
        p_ts = patch_timestamps(ts[:, -1], n_visible, bcfg.patch_len, stride)
        cal_idx = calendar_features(p_ts, adapter.cycle_names)
        ident = filtered_identifiers(adapter, cal_idx, acfg.use_stf).to(dtype)   # [B, N, P, d]
        ident = ident.reshape(B * N, n_visible, -1)
        tokens = torch.cat(
            (tokens[:, :valid_from], tokens[:, valid_from:C] + ident, tokens[:, C:]), dim=1)

    n_prefix = 0
    if acfg.use_prompts:
        prompts = compose_prompts(adapter.prompt_u, adapter.prompt_v).to(dtype)
        n_prefix = prompts.shape[0]
        tokens = torch.cat((prompts[None].expand(B * N, -1, -1), tokens), dim=1)

    encoded = backbone.encode(tokens, n_prefix=n_prefix)
    pred = backbone.quantiles(encoded, fut_count, n_prefix=n_prefix)[:, :horizon]
    pred = pred.view(B, N, horizon, -1)

    loss = None
    if y is not None:
        scale = (sigma + bcfg.eps).reshape(B, N, 1)
        y_norm = torch.as_tensor((y - mu.reshape(B, N, 1)) / scale, dtype=dtype)
        if loss_kind == "pinball":
            loss = pinball_loss(pred, y_norm, bcfg.quantiles)
        else:
            loss = l1_median_loss(pred, y_norm, bcfg.median_index)
    if return_tensor:
        out = (pred, mu.reshape(B, N), sigma.reshape(B, N))
        return out, loss
    values = pred.detach().numpy().astype(np.float64)
    values = values * (sigma + bcfg.eps).reshape(B, N, 1, 1) + mu.reshape(B, N, 1, 1)
    return (values[0] if squeeze else values), loss
