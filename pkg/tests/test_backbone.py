import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

import reference as ref
from conftest import tiny_backbone_config, perturb_
from factost.backbone import (Backbone, SeriesWindow, build_token_sequence, denormalize,
                              encoder_forward, gated_attention, instance_normalize, NormStats,
                              p_rope, patchify, pinball_loss, prepare_contexts, quantile_head,
                              rolling_forecast, rope_tables, sample_mask_length, utp_forward)
from factost.config import BackboneConfig, TrainConfig
from factost.errors import ConfigError, DataError, NumericError, WindowError
from factost.trainer import grad_audit, train_utp


# --- normalization ------------------------------------------------------------

def test_normalize_constant_series():
    normed, stats = instance_normalize([5, 5, 5, 5], eps=1e-5)
    assert np.array_equal(normed, np.zeros(4))
    assert stats.mu == 5 and stats.sigma == 0


def test_normalize_symmetric_pair():
    normed, stats = instance_normalize([0, 2], eps=0)
    assert np.allclose(normed, [-1, 1])
    assert (stats.mu, stats.sigma) == (1, 1)


def test_normalize_rejects_nonfinite():
    with pytest.raises(DataError):
        instance_normalize([1.0, np.nan])


def test_normalized_mean_is_zero(rng):
    normed, _ = instance_normalize(rng.normal(3, 7, 64))
    assert abs(normed.mean()) < 1e-9


def test_denormalize_examples():
    assert np.allclose(denormalize([0], NormStats(5, 0), 1e-5), [5])
    assert np.allclose(denormalize([-1, 1], NormStats(1, 1), 0), [0, 2])


def test_denormalize_round_trip(rng):
    worst = 0.0
    for _ in range(100):
        x = rng.normal(rng.uniform(-50, 50), rng.uniform(0.01, 20), rng.integers(2, 200))
        normed, stats = instance_normalize(x)
        worst = max(worst, np.abs(denormalize(normed, stats) - x).max())
    assert worst < 1e-9


# --- patching & masking -----------------------------------------------------------

def test_patchify_shapes(rng):
    x = rng.normal(size=48)
    assert patchify(x, 16).shape == (3, 16)
    y = rng.normal(size=16)
    assert np.array_equal(patchify(y, 16), y[None])
    assert np.array_equal(patchify(x, 16).reshape(-1), x)


def test_patchify_rejects_ragged():
    with pytest.raises(WindowError, match="multiple of patch_len=16"):
        patchify(np.zeros(40), 16)


def test_mask_length_degenerate_and_range():
    g = np.random.default_rng(0)
    assert all(sample_mask_length(g, 5, 5) == 0 for _ in range(100))
    draws = sample_mask_length(g, 2, 8, size=1000)
    assert draws.min() >= 0 and draws.max() <= 6


def test_mask_length_is_uniform():
    draws = sample_mask_length(np.random.default_rng(7), 2, 8, size=100_000)
    freq = np.bincount(draws, minlength=7) / len(draws)
    assert len(freq) == 7
    assert np.all(np.abs(freq - 1 / 7) < 0.01)


def test_prepare_contexts_uses_visible_values_only(tiny_cfg):
    x = np.arange(16, dtype=float)
    normed, l_mask, mu, sigma = prepare_contexts(x[None], tiny_cfg, keep_patches=np.array([2]))
    assert l_mask[0] == 2
    visible = x[8:]
    assert mu[0] == pytest.approx(visible.mean())
    assert sigma[0] == pytest.approx(visible.std())
    assert np.all(normed[0, :8] == 0)


def test_short_context_is_left_padded(tiny_cfg):
    # 10 steps -> ceil(10/4) = 3 patches, l_mask = 1
    normed, l_mask, _, _ = prepare_contexts(np.linspace(0, 1, 10)[None], tiny_cfg)
    assert l_mask[0] == 1
    assert np.all(normed[0, :6] == 0)


def test_context_below_minimum_rejected(tiny_cfg):
    with pytest.raises(WindowError):
        prepare_contexts(np.ones((1, 4)), tiny_cfg)


# --- token layout -------------------------------------------------------------------

def test_token_sequence_no_mask(tiny_model, rng):
    cfg = tiny_model.cfg
    seq = build_token_sequence(rng.normal(size=(4, 4)), 0, 2, tiny_model)
    assert seq.valid_from == 0
    assert seq.tokens.shape == (cfg.n_tokens, cfg.d_model)
    assert torch.equal(seq.positions, torch.arange(cfg.n_tokens))


def test_token_sequence_bound_mask(tiny_model, rng):
    cfg = tiny_model.cfg
    l_mask = cfg.max_ctx_patches - cfg.min_ctx_patches
    seq = build_token_sequence(rng.normal(size=(4, 4)), l_mask, 1, tiny_model)
    masked = tiny_model.proj.bias.detach()
    n_unmasked = sum(not torch.allclose(seq.tokens[i], masked) for i in range(cfg.max_ctx_patches))
    assert n_unmasked == cfg.min_ctx_patches
    for i in range(l_mask):
        assert torch.equal(seq.tokens[i], masked)


def test_token_sequence_mask_out_of_range(tiny_model):
    with pytest.raises(WindowError):
        build_token_sequence(np.zeros((4, 4)), 3, 1, tiny_model)


def test_register_token_bypasses_projection(tiny_model, rng):
    a = build_token_sequence(rng.normal(size=(4, 4)), 0, 1, tiny_model)
    b = build_token_sequence(100 * rng.normal(size=(4, 4)), 1, 2, tiny_model)
    reg = tiny_model.register_token.detach()
    assert torch.equal(a.tokens[a.register_index], reg)
    assert torch.equal(b.tokens[b.register_index], reg)
    assert torch.equal(a.tokens[-1], tiny_model.future_token.detach())


# --- p-RoPE ---------------------------------------------------------------------------

def rope_cfg(d_model=32, n_heads=2, frac=0.75):
    return BackboneConfig(d_model=d_model, n_heads=n_heads, rope_fraction=frac).validate()


def test_prope_position_zero_identity(rng):
    cfg = rope_cfg()
    v = rng.normal(size=cfg.d_head)
    assert np.array_equal(p_rope(v, 0, cfg), v)


def test_prope_rejects_zero_fraction():
    with pytest.raises(ConfigError):
        BackboneConfig(d_model=32, n_heads=2, rope_fraction=0.0).validate()
    with pytest.raises(ConfigError):
        BackboneConfig(d_model=32, n_heads=2, rope_fraction=0.01).validate()  # rounds to 0
    with pytest.raises(ConfigError):
        BackboneConfig(d_model=14, n_heads=1, rope_fraction=0.5).validate()   # odd rope dim


def test_prope_matches_rotation_matrices(rng):
    cfg = rope_cfg()
    v = rng.normal(size=cfg.d_head)
    for pos in (1, 7, 123):
        expected = ref.rotate(v, pos, cfg.rope_dim, cfg.d_head, cfg.rope_base)
        assert np.allclose(p_rope(v, pos, cfg), expected, atol=1e-12)


@settings(max_examples=200, deadline=None)
@given(pos=st.integers(0, 10_000), seed=st.integers(0, 2**31 - 1))
def test_prope_low_frequency_tail_untouched(pos, seed):
    cfg = rope_cfg()
    v = np.random.default_rng(seed).normal(size=cfg.d_head)
    out = p_rope(v, pos, cfg)
    assert np.array_equal(out[cfg.rope_dim:], v[cfg.rope_dim:])


@settings(max_examples=200, deadline=None)
@given(m=st.integers(0, 500), n=st.integers(0, 500), s=st.integers(-200, 500),
       seed=st.integers(0, 2**31 - 1))
def test_prope_relative_shift_invariance(m, n, s, seed):
    cfg = rope_cfg()
    g = np.random.default_rng(seed)
    q, k = g.normal(size=(2, cfg.d_head))
    s = max(s, -min(m, n))
    a = p_rope(q, m, cfg) @ p_rope(k, n, cfg)
    b = p_rope(q, m + s, cfg) @ p_rope(k, n + s, cfg)
    assert abs(a - b) <= 1e-6


# --- gated attention ------------------------------------------------------------------

def test_gate_saturation_matches_ungated(tiny_model, rng):
    attn = tiny_model.blocks[0].attn
    with torch.no_grad():
        attn.gate.weight.zero_()
        attn.gate.bias.fill_(20.0)
    x = torch.as_tensor(rng.normal(size=(1, 7, 8)))
    cos, sin = rope_tables(torch.arange(7), tiny_model.cfg, dtype=x.dtype)
    gated = attn(x, cos, sin)
    ungated = attn(x, cos, sin, use_gate=False)
    assert torch.allclose(gated, ungated, atol=1e-6, rtol=0)


def test_single_token_attention_weight(tiny_model, rng):
    x = torch.as_tensor(rng.normal(size=(1, 8)))
    _, w = gated_attention(x, tiny_model.blocks[0].attn, tiny_model.cfg, return_weights=True)
    assert torch.equal(w, torch.ones(1, 1, 1, dtype=w.dtype))


@pytest.mark.parametrize("n_heads", [1, 2])
def test_attention_matches_loop_reference(rng, n_heads):
    cfg = tiny_backbone_config(n_heads=n_heads, d_model=8, rope_fraction=1.0)
    m = Backbone(cfg, seed=3).double()
    perturb_(m, 4)
    x = rng.normal(size=(4, 8))
    out, w = gated_attention(torch.as_tensor(x), m.blocks[0].attn, cfg, return_weights=True)
    expected, expected_w = ref.attention(x, m.blocks[0].attn, cfg)
    assert np.allclose(out.detach().numpy(), expected, atol=1e-6)
    assert np.allclose(w.detach().numpy(), expected_w, atol=1e-9)


def test_attention_rows_are_probability_vectors(tiny_model, rng):
    x = torch.as_tensor(rng.normal(size=(3, 9, 8)) * 5)
    _, w = gated_attention(x, tiny_model.blocks[0].attn, tiny_model.cfg, return_weights=True)
    assert torch.all(w >= 0)
    assert torch.allclose(w.sum(-1), torch.ones_like(w.sum(-1)), atol=1e-6)


def test_nan_scores_fail_fast(tiny_model):
    x = torch.zeros(1, 3, 8, dtype=torch.float64)
    x[0, 1, 0] = float("nan")
    with pytest.raises(NumericError, match="layer 0"):
        gated_attention(x, tiny_model.blocks[0].attn, tiny_model.cfg)


# --- encoder ----------------------------------------------------------------------------

def test_zero_layer_encoder_is_identity(rng):
    m = Backbone(tiny_backbone_config(n_layers=0), seed=0).double()
    x = torch.as_tensor(rng.normal(size=(7, 8)))
    assert torch.equal(encoder_forward(x, m), x)


def test_encoder_deterministic_in_eval(rng):
    m = Backbone(tiny_backbone_config(dropout=0.5), seed=0).double()
    x = torch.as_tensor(rng.normal(size=(7, 8)))
    assert torch.equal(encoder_forward(x, m), encoder_forward(x, m))


def test_encoder_matches_straight_line_reference(tiny_model, rng):
    x = rng.normal(size=(tiny_model.cfg.n_tokens, 8))
    out = encoder_forward(torch.as_tensor(x), tiny_model).detach().numpy()
    assert np.allclose(out, ref.encoder(x, tiny_model), atol=1e-6)


def test_full_forward_matches_reference(rng):
    cfg = tiny_backbone_config(d_model=16, d_ff=32, n_layers=2, n_heads=2)
    m = Backbone(cfg, seed=5).double()
    perturb_(m, 6)
    m.eval()
    ctx = rng.normal(size=12)   # 3 patches -> l_mask 1
    window = SeriesWindow(ctx, rng.normal(size=8))
    qf, _ = utp_forward(window, m)
    normed, stats = instance_normalize(ctx, cfg.eps)
    padded = np.concatenate((np.zeros(4), normed))
    enc = ref.encoder(ref.backbone_tokens(padded, 1, m), m)
    expected = ref.head(enc, 2, m) * (stats.sigma + cfg.eps) + stats.mu
    assert np.allclose(qf.values, expected, atol=1e-6)


# --- quantile head & loss -----------------------------------------------------------------

def test_head_shape():
    cfg = BackboneConfig(d_model=16, d_ff=32, n_layers=1, n_heads=2, patch_len=16, max_ctx_patches=2,
                         max_fut_patches=2, min_ctx_patches=1, quantiles=(0.1, 0.5, 0.9)).validate()
    m = Backbone(cfg, seed=0)
    enc = torch.randn(cfg.n_tokens, 16)
    assert quantile_head(enc, 1, m).shape == (16, 3)


def test_head_zero_weights_gives_bias(tiny_model, rng):
    with torch.no_grad():
        tiny_model.head.weight.zero_()
    out = quantile_head(torch.as_tensor(rng.normal(size=(7, 8))), 2, tiny_model)
    bias = tiny_model.head.bias.detach().view(4, 3)
    assert torch.equal(out, torch.cat((bias, bias)))


def test_head_rejects_long_horizon(tiny_model):
    with pytest.raises(WindowError, match="rolling_forecast"):
        quantile_head(torch.zeros(7, 8, dtype=torch.float64), 3, tiny_model)


def test_head_gradient_finite_differences(tiny_model, rng):
    enc = torch.as_tensor(rng.normal(size=(7, 8)))
    target = torch.as_tensor(rng.normal(size=8))

    def loss():
        return pinball_loss(quantile_head(enc, 2, tiny_model), target, (0.1, 0.5, 0.9))

    report = grad_audit(loss, {"w": tiny_model.head.weight, "b": tiny_model.head.bias})
    assert report.max_rel_err < 1e-4


def test_pinball_examples():
    assert float(pinball_loss([[0.0]], [2.0], [0.5])) == 1.0
    assert float(pinball_loss([[1.0]], [0.0], [0.9])) == pytest.approx(0.1)


def test_pinball_two_branch_oracle(rng):
    for _ in range(50):
        H, Q = rng.integers(1, 20), rng.integers(1, 6)
        qs = np.sort(rng.uniform(0.01, 0.99, Q))
        pred = rng.normal(size=(H, Q))
        y = rng.normal(size=H)
        total = 0.0
        for h in range(H):
            for j in range(Q):
                d = y[h] - pred[h, j]
                total += max((qs[j] - 1) * d, qs[j] * d)
        assert float(pinball_loss(torch.as_tensor(pred), y, qs)) == pytest.approx(total / (H * Q), abs=1e-14)


def test_pinball_nonnegative_and_zero_iff_exact(rng):
    pred = rng.normal(size=(5, 3))
    assert float(pinball_loss(torch.as_tensor(pred), pred[:, 1], (0.1, 0.5, 0.9))) > 0
    same = np.repeat(pred[:, :1], 3, axis=1)
    assert float(pinball_loss(torch.as_tensor(same), pred[:, 0], (0.1, 0.5, 0.9))) == 0.0


# --- utp forward / rolling ------------------------------------------------------------------

def test_inference_short_context_is_deterministic(tiny_model, rng):
    w = SeriesWindow(rng.normal(size=8), rng.normal(size=4))
    a, _ = utp_forward(w, tiny_model)
    b, _ = utp_forward(w, tiny_model)
    assert np.array_equal(a.values, b.values)
    # same as explicitly right-aligning into the capacity buffer
    cfg = tiny_model.cfg
    normed, l_mask, _, _ = prepare_contexts(w.context[None], cfg)
    assert l_mask[0] == cfg.max_ctx_patches - 2


def test_loss_zero_on_teacher_forced_target(tiny_model, rng):
    with torch.no_grad():
        tiny_model.head.weight.zero_()
        tiny_model.head.bias.fill_(0.25)
    ctx = rng.normal(size=16)
    _, stats = instance_normalize(ctx, tiny_model.cfg.eps)
    target = np.full(8, 0.25 * (stats.sigma + tiny_model.cfg.eps) + stats.mu)
    _, loss = utp_forward(SeriesWindow(ctx, target), tiny_model)
    assert loss.item() == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("L", [8, 12, 16])
def test_any_effective_context_gives_same_shape(tiny_model, rng, L):
    qf, loss = utp_forward(SeriesWindow(rng.normal(size=L), rng.normal(size=8)), tiny_model)
    assert qf.values.shape == (8, 3)
    assert np.isfinite(float(loss))


def test_train_mode_masks_randomly(rng):
    m = Backbone(tiny_backbone_config(), seed=0).double()
    w = SeriesWindow(rng.normal(size=16), rng.normal(size=8))
    g = np.random.default_rng(0)
    outs = {tuple(np.round(utp_forward(w, m, g, train_mode=True)[0].values[:, 1], 12)) for _ in range(30)}
    assert len(outs) == 3   # l_mask in {0, 1, 2}


def test_constant_context_smoke_train():
    cfg = tiny_backbone_config(max_ctx_patches=4, max_fut_patches=1)
    m = Backbone(cfg, seed=0)
    g = np.random.default_rng(0)
    levels = g.uniform(-10, 10, 64)
    series = np.repeat(levels[:, None], 20, axis=1) + 1e-3 * g.normal(size=(64, 20))
    train_utp(series, m, TrainConfig(total_steps=150, batch_size=16, peak_lr=3e-3, seed=0))
    qf, _ = utp_forward(SeriesWindow(np.full(16, 5.0)), m, horizon=4)
    assert np.all(np.isfinite(qf.median))
    assert np.all((qf.median >= 4) & (qf.median <= 6))


def test_rolling_within_capacity_equals_single_pass(tiny_model, rng):
    w = SeriesWindow(rng.normal(size=16))
    single, _ = utp_forward(w, tiny_model, horizon=6)
    rolled = rolling_forecast(w, tiny_model, 6)
    assert np.array_equal(single.values, rolled.values)


def test_rolling_two_iterations(tiny_model, rng, monkeypatch):
    import factost.backbone as bb
    calls = []
    orig = bb.forecast_normalized

    def counting(*a, **k):
        calls.append(a[2])
        return orig(*a, **k)

    monkeypatch.setattr(bb, "forecast_normalized", counting)
    out = rolling_forecast(SeriesWindow(rng.normal(size=16)), tiny_model, 16)
    assert calls == [8, 8]
    assert out.values.shape == (16, 3)


def test_rolling_matches_manual_two_step(tiny_model, rng):
    ctx = rng.normal(size=16)
    rolled = rolling_forecast(SeriesWindow(ctx), tiny_model, 13)
    first, _ = utp_forward(SeriesWindow(ctx), tiny_model, horizon=8)
    ctx2 = np.concatenate((ctx, first.median))[-16:]
    second, _ = utp_forward(SeriesWindow(ctx2), tiny_model, horizon=5)
    assert np.allclose(rolled.values, np.concatenate((first.values, second.values)), atol=1e-12)


def test_rolling_rejects_nonpositive(tiny_model):
    with pytest.raises(WindowError):
        rolling_forecast(SeriesWindow(np.ones(16)), tiny_model, 0)


def test_rolling_timestamps(tiny_model):
    w = SeriesWindow(np.arange(16.0), context_timestamps=1000 + 60 * np.arange(16))
    out = rolling_forecast(w, tiny_model, 10)
    assert np.array_equal(out.timestamps, 1000 + 60 * np.arange(16, 26))


# --- gradient accumulation ------------------------------------------------------------------

def test_gradient_accumulation_order_independent(tiny_model, rng):
    windows = [SeriesWindow(rng.normal(size=16), rng.normal(size=8)) for _ in range(6)]

    def accumulate(order):
        tiny_model.zero_grad()
        for i in order:
            utp_forward(windows[i], tiny_model)[1].backward()
        return [p.grad.clone() for p in tiny_model.parameters()]

    a = accumulate(range(6))
    b = accumulate([3, 0, 5, 1, 4, 2])
    for x, y in zip(a, b):
        assert torch.allclose(x, y, rtol=1e-6, atol=1e-12)
