"""Training loops for both stages, WSD schedule, continual memory replay and gradient audit."""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np
import torch

from .adapter import STAdapter, sta_forward
from .backbone import Backbone, l1_median_loss, pinball_loss, prepare_contexts
from .config import TrainConfig
from .data import STDataset, few_shot_subset, split, split_starts
from .errors import NumericError, TransferError, WindowError

log = logging.getLogger(__name__)


# ----------------------------------------------------------------------------
# schedule
# ----------------------------------------------------------------------------

def wsd_lr(step: int, cfg: TrainConfig) -> float:
    """Warmup-stable-decay: linear ramp, flat peak, cosine decay to 10% of peak."""
    total = cfg.total_steps
    peak = cfg.peak_lr
    warm = cfg.warmup_frac * total
    decay = cfg.decay_frac * total
    decay_start = total - decay
    if warm > 0 and step < warm:
        return peak * step / warm
    if step <= decay_start or decay == 0:
        return peak
    progress = min(1.0, (step - decay_start) / decay)
    return 0.1 * peak + 0.9 * peak * 0.5 * (1.0 + math.cos(math.pi * progress))


# ----------------------------------------------------------------------------
# continual memory replay
# ----------------------------------------------------------------------------

def cmr_partition(n_total: int, s: float) -> tuple[int, range]:
    """Memory size ``floor(s * n_total)`` and the remaining current-stream index range."""
    k = int(math.floor(s * n_total))
    return k, range(k, n_total)


@dataclass
class ReplayBuffer:
    capacity: int
    items: list = field(default_factory=list)
    seen_count: int = 0

    @property
    def fill_count(self) -> int:
        return len(self.items)

    def seed(self, samples: Sequence) -> "ReplayBuffer":
        for s in samples[: self.capacity]:
            self.items.append(s)
            self.seen_count += 1
        return self

    def __len__(self) -> int:
        return len(self.items)


def buffer_update(buffer: ReplayBuffer, new_samples: Sequence, rng: np.random.Generator) -> None:
    """Reservoir sampling: every sample seen so far is retained with equal probability."""
    if buffer.capacity <= 0:
        return
    for s in new_samples:
        buffer.seen_count += 1
        if len(buffer.items) < buffer.capacity:
            buffer.items.append(s)
        else:
            j = int(rng.integers(0, buffer.seen_count))
            if j < buffer.capacity:
                buffer.items[j] = s


def mix_batch(current: Sequence, buffer: ReplayBuffer, r_mix: float,
              rng: np.random.Generator) -> list:
    """Replace ``floor(r_mix * |batch|)`` random current samples with distinct buffer samples."""
    batch = list(current)
    n_rep = int(math.floor(r_mix * len(batch)))
    if n_rep == 0 or not buffer.items:
        return batch
    drop = set(rng.choice(len(batch), size=n_rep, replace=False).tolist())
    kept = [b for i, b in enumerate(batch) if i not in drop]
    kept_set = set(kept)
    candidates = [m for m in dict.fromkeys(buffer.items) if m not in kept_set]
    n_take = min(n_rep, len(candidates))
    picked = [candidates[i] for i in rng.choice(len(candidates), size=n_take, replace=False)] if n_take else []
    # not enough distinct memory: keep some of the current samples instead
    refill = [b for i, b in enumerate(batch) if i in drop][: n_rep - n_take]
    return kept + refill + picked


# ----------------------------------------------------------------------------
# common loop plumbing
# ----------------------------------------------------------------------------

@dataclass
class TrainResult:
    trace: list[dict[str, Any]]
    steps: int
    best_val: float | None = None
    best_step: int | None = None

    @property
    def losses(self) -> list[float]:
        return [r["loss"] for r in self.trace if r.get("split") == "train"]


class TraceWriter:
    """Append-only JSON-lines trace; keeps records in memory as well."""

    def __init__(self, path=None, config: dict | None = None):
        self.records: list[dict[str, Any]] = []
        self._fh = open(path, "a", encoding="utf-8") if path else None
        if config is not None:
            self.write({"step": 0, "split": "config", "config": config})

    def write(self, record: dict[str, Any]) -> None:
        self.records.append(record)
        if self._fh:
            self._fh.write(json.dumps(record, sort_keys=True) + "\n")
            self._fh.flush()

    def close(self):
        if self._fh:
            self._fh.close()


def _make_optimizer(params, cfg: TrainConfig):
    return torch.optim.Adam(params, lr=cfg.peak_lr, betas=tuple(cfg.adam_betas),
                            eps=cfg.adam_eps, weight_decay=cfg.weight_decay)


def _step(loss: torch.Tensor, params: list, optimizer, cfg: TrainConfig, lr: float,
          step: int, batch_id: str) -> None:
    if not torch.isfinite(loss):
        raise NumericError(f"non-finite loss {loss.item()} at step {step} (batch {batch_id})")
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    if cfg.grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
    for group in optimizer.param_groups:
        group["lr"] = lr
    optimizer.step()
    for p in params:
        if not torch.isfinite(p).all():
            raise NumericError(f"non-finite parameter after step {step} (batch {batch_id})")


# ----------------------------------------------------------------------------
# stage I
# ----------------------------------------------------------------------------

def sample_pretrain_batch(series: np.ndarray, rng: np.random.Generator, batch_size: int,
                          model_cfg, horizon: int, random_mask: bool = True):
    """Draw (contexts, visible patch counts, targets) from a ``[S, T]`` corpus.

    The visible context length is ``(C - l_mask) * patch_len`` with ``l_mask``
    uniform in ``[0, C - C_min]``, capped by what fits before the target.
    """
    S, T = series.shape
    P = model_cfg.patch_len
    C, C_min = model_cfg.max_ctx_patches, model_cfg.min_ctx_patches
    fit = (T - horizon) // P
    if fit < C_min:
        raise WindowError(
            f"series of length {T} cannot hold {C_min} context patches plus horizon {horizon}")
    idx = rng.integers(0, S, size=batch_size)
    if random_mask:
        l_mask = rng.integers(0, C - C_min + 1, size=batch_size)
    else:
        l_mask = np.zeros(batch_size, dtype=np.int64)
    keep = np.minimum(C - l_mask, fit)
    cap = model_cfg.max_context
    ctx = np.zeros((batch_size, cap))
    tgt = np.zeros((batch_size, horizon))
    for b in range(batch_size):
        n = keep[b] * P
        start = int(rng.integers(0, T - n - horizon + 1))
        ctx[b, cap - n:] = series[idx[b], start:start + n]
        tgt[b] = series[idx[b], start + n:start + n + horizon]
    return ctx, keep, tgt


def pretrain_loss(model: Backbone, ctx, keep, tgt, loss_kind: str = "pinball"):
    cfg = model.cfg
    normed, l_mask, mu, sigma = prepare_contexts(ctx, cfg, keep)
    horizon = tgt.shape[-1]
    fut = -(-horizon // cfg.patch_len)
    dtype = model.dtype
    pred = model(torch.as_tensor(normed, dtype=dtype), torch.as_tensor(l_mask), fut)[:, :horizon]
    y = torch.as_tensor((tgt - mu[:, None]) / (sigma + cfg.eps)[:, None], dtype=dtype)
    if loss_kind == "pinball":
        return pinball_loss(pred, y, cfg.quantiles)
    return l1_median_loss(pred, y, cfg.median_index)


def train_utp(series: np.ndarray, model: Backbone, cfg: TrainConfig, horizon: int | None = None,
              trace_path=None, config_echo: dict | None = None,
              callback: Callable[[int, float], None] | None = None) -> TrainResult:
    """Stage-I pretraining on a ``[S, T]`` array of independent univariate series."""
    cfg.validate()
    horizon = horizon or model.cfg.max_horizon
    series = np.asarray(series, dtype=np.float64)
    rng = np.random.default_rng(cfg.seed)
    torch.manual_seed(cfg.seed)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = _make_optimizer(params, cfg)
    writer = TraceWriter(trace_path, config_echo)
    try:
        for step in range(cfg.total_steps):
            lr = wsd_lr(step + 1, cfg)
            ctx, keep, tgt = sample_pretrain_batch(series, rng, cfg.batch_size, model.cfg, horizon,
                                                   cfg.random_mask)
            model.train(True)
            loss = pretrain_loss(model, ctx, keep, tgt, cfg.loss_kind)
            _step(loss, params, opt, cfg, lr, step, batch_id=f"utp-{cfg.seed}-{step}")
            value = float(loss.detach())
            writer.write({"step": step + 1, "lr": lr, "loss": value, "split": "train"})
            if callback:
                callback(step + 1, value)
    finally:
        writer.close()
    model.eval()
    return TrainResult(writer.records, cfg.total_steps)


# ----------------------------------------------------------------------------
# stage II
# ----------------------------------------------------------------------------

def panel_batch(dataset: STDataset, starts, L: int, H: int):
    starts = np.asarray(starts, dtype=np.int64)
    t = starts[:, None] + np.arange(L + H)[None, :]
    vals = dataset.values[:, t]                     # [N, B, L+H]
    vals = np.transpose(vals, (1, 0, 2))
    return vals[..., :L], dataset.timestamps[t[:, :L]], vals[..., L:]


def evaluate_panel(dataset: STDataset, starts, L: int, H: int, backbone: Backbone,
                   adapter: STAdapter | None = None, batch_size: int = 16):
    """Forecasts ``[W, N, H, |Q|]`` and truths ``[W, N, H]`` for windows at ``starts``."""
    preds, truths = [], []
    with torch.no_grad():
        for i in range(0, len(starts), batch_size):
            ctx, ts, tgt = panel_batch(dataset, starts[i:i + batch_size], L, H)
            if adapter is None:
                backbone.eval()
                B, N, _ = ctx.shape
                normed, l_mask, mu, sigma = prepare_contexts(ctx.reshape(B * N, L), backbone.cfg)
                fut = -(-H // backbone.cfg.patch_len)
                p = backbone(torch.as_tensor(normed, dtype=backbone.dtype),
                             torch.as_tensor(l_mask), fut)[:, :H].numpy().astype(np.float64)
                p = p * (sigma + backbone.cfg.eps)[:, None, None] + mu[:, None, None]
                p = p.reshape(B, N, H, -1)
            else:
                p, _ = sta_forward(ctx, ts, backbone, adapter, targets=H,
                                   stride=dataset.freq_seconds)
            preds.append(p)
            truths.append(tgt)
    return np.concatenate(preds), np.concatenate(truths)


def _median_mae(backbone, adapter, dataset, starts, L, H) -> float:
    pred, truth = evaluate_panel(dataset, starts, L, H, backbone, adapter)
    return float(np.abs(pred[..., backbone.cfg.median_index] - truth).mean())


def train_sta(dataset: STDataset, backbone: Backbone, adapter: STAdapter, cfg: TrainConfig,
              L: int, H: int, stride: int = 1, ratios=(0.7, 0.1, 0.2),
              backbone_loaded: bool = True, from_scratch: bool = False,
              eval_stride: int = 8, trace_path=None, config_echo: dict | None = None) -> TrainResult:
    """Stage-II adaptation on the trailing ``few_shot_frac`` of the training windows."""
    cfg.validate()
    if not backbone_loaded and not from_scratch:
        raise TransferError(
            "adaptation requires a pretrained backbone checkpoint (pass from_scratch to override)")
    train_r, val_r, _ = split(dataset.n_steps, ratios)
    all_starts = split_starts(train_r, L, H, stride)
    starts = few_shot_subset(all_starts, cfg.few_shot_frac)
    log.info("few-shot selection: trailing %.0f%% of training windows -> %d of %d windows",
             100 * cfg.few_shot_frac, len(starts), len(all_starts))
    val_starts = split_starts(val_r, L, H, eval_stride)

    rng = np.random.default_rng(cfg.seed)
    torch.manual_seed(cfg.seed)
    frozen = adapter.cfg.backbone_frozen
    for p in backbone.parameters():
        p.requires_grad_(not frozen)
    params = list(adapter.parameters()) + ([] if frozen else list(backbone.parameters()))
    opt = _make_optimizer(params, cfg)

    samples = [int(s) for s in starts]
    if cfg.cmr:
        k_m, cur_range = cmr_partition(len(samples), cfg.memory_frac)
        buffer = ReplayBuffer(k_m).seed(samples[:k_m])
        current = [samples[i] for i in cur_range]
    else:
        buffer = ReplayBuffer(0)
        current = samples
    if not current:
        raise WindowError("no current-stream samples left after memory partition")

    writer = TraceWriter(trace_path, config_echo)
    writer.write({"step": 0, "split": "info", "few_shot_windows": len(samples),
                  "train_windows": len(all_starts), "memory": len(buffer)})
    best = (math.inf, 0, None)

    def validate(step):
        nonlocal best
        mae = _median_mae(backbone, adapter, dataset, val_starts, L, H)
        writer.write({"step": step, "split": "val", "mae": mae})
        if cfg.select_best and mae < best[0]:
            best = (mae, step, (copy.deepcopy(backbone.state_dict()),
                                copy.deepcopy(adapter.state_dict())))
        return mae

    validate(0)
    step = 0
    try:
        while step < cfg.total_steps:
            order = rng.permutation(len(current))
            for i in range(0, len(order), cfg.batch_size):
                if step >= cfg.total_steps:
                    break
                cur = [current[j] for j in order[i:i + cfg.batch_size]]
                batch = mix_batch(cur, buffer, cfg.replace_ratio, rng) if cfg.cmr else cur
                ctx, ts, tgt = panel_batch(dataset, batch, L, H)
                _, loss = sta_forward(ctx, ts, backbone, adapter, tgt, loss_kind=cfg.loss_kind,
                                      train_mode=True, stride=dataset.freq_seconds,
                                      return_tensor=True)
                lr = wsd_lr(step + 1, cfg)
                _step(loss, params, opt, cfg, lr, step, batch_id=f"sta-{cfg.seed}-{step}")
                if cfg.cmr:
                    buffer_update(buffer, cur, rng)
                step += 1
                writer.write({"step": step, "lr": lr, "loss": float(loss.detach()), "split": "train"})
                if cfg.eval_every and step % cfg.eval_every == 0 and step < cfg.total_steps:
                    validate(step)
        validate(step)
    finally:
        writer.close()
    if cfg.select_best and best[2] is not None:
        backbone.load_state_dict(best[2][0])
        adapter.load_state_dict(best[2][1])
    backbone.eval()
    adapter.eval()
    return TrainResult(writer.records, step, best[0] if cfg.select_best else None, best[1])


# ----------------------------------------------------------------------------
# gradient audit
# ----------------------------------------------------------------------------

@dataclass
class AuditEntry:
    name: str
    numel: int
    max_abs_err: float
    scale: float
    rel_err: float
    passed: bool


@dataclass
class AuditReport:
    entries: list[AuditEntry]
    tolerance: float

    @property
    def violators(self) -> list[AuditEntry]:
        return [e for e in self.entries if not e.passed]

    @property
    def passed(self) -> bool:
        return not self.violators

    @property
    def max_rel_err(self) -> float:
        return max((e.rel_err for e in self.entries), default=0.0)


def grad_audit(loss_fn: Callable[[], torch.Tensor], params: dict[str, torch.Tensor],
               tolerance: float = 1e-3, step: float = 1e-4, abs_floor: float = 1e-6) -> AuditReport:
    """Compare autograd gradients against central finite differences.

    ``rel_err`` for a tensor is ``max|g_auto - g_fd| / max(max|g_auto|, max|g_fd|, abs_floor)``.
    Parameters are perturbed in place and restored exactly.
    """
    names = list(params)
    tensors = [params[n] for n in names]
    if not tensors:
        return AuditReport([], tolerance)
    loss = loss_fn()
    grads = torch.autograd.grad(loss, tensors, allow_unused=True)
    entries = []
    with torch.no_grad():
        for name, p, g in zip(names, tensors, grads):
            g = torch.zeros_like(p) if g is None else g.detach()
            numeric = torch.zeros_like(p)
            flat = p.view(-1)
            num_flat = numeric.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                up = float(loss_fn())
                flat[i] = orig - step
                down = float(loss_fn())
                flat[i] = orig
                num_flat[i] = (up - down) / (2 * step)
            err = float((g - numeric).abs().max())
            scale = max(float(g.abs().max()), float(numeric.abs().max()), abs_floor)
            rel = err / scale
            entries.append(AuditEntry(name, p.numel(), err, scale, rel, rel < tolerance))
    return AuditReport(entries, tolerance)


def audit_problem(bcfg, acfg, seed: int, perturb: float = 0.3):
    """Seeded float64 backbone + adapter and a pinball-loss closure over a random panel.

    Parameters are moved off their initial values so that no gradient path
    is trivially zero. Returns ``(loss_fn, {name: parameter})``.
    """
    from .adapter import STAdapter
    from .backbone import Backbone

    backbone = Backbone(bcfg, seed=seed).double()
    adapter = STAdapter(acfg, bcfg.d_model, seed=seed).double()
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in [*backbone.parameters(), *adapter.parameters()]:
            p.add_(perturb * torch.randn(p.shape, generator=gen, dtype=p.dtype))
    g = np.random.default_rng(seed)
    L = bcfg.max_context
    panel = g.normal(size=(acfg.n_nodes, L)) * g.uniform(0.5, 3) + g.normal()
    ts = 1704067200 + 900 * int(g.integers(0, 2000)) + 300 * np.arange(L)
    target = g.normal(size=(acfg.n_nodes, bcfg.max_horizon)) + panel.mean()

    def loss_fn():
        return sta_forward(panel, ts, backbone, adapter, target, loss_kind="pinball",
                           return_tensor=True)[1]

    params = {f"backbone/{n}": p for n, p in backbone.named_parameters()}
    params.update({f"adapter/{n}": p for n, p in adapter.named_parameters()})
    return loss_fn, params
