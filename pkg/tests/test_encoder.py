import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from metahar.data import TimeSeriesWindow
from metahar.encoder import (
    EncoderConfig,
    attention,
    channel_representations,
    encode,
    encode_channel,
    init_encoder_buffers,
    init_encoder_params,
    make_patches,
    n_patches,
)
from metahar.errors import ConfigError, ShapeError

from oracles import attention_loops, central_differences, max_relative_error


def enumerate_starts(L, Lp, S):
    return [s for s in range(0, L) if s + Lp <= L and s % S == 0]


@pytest.mark.parametrize("L,Lp,S,N", [(125, 16, 4, 28), (512, 64, 8, 57), (500, 64, 8, 55), (16, 16, 4, 1)])
def test_patch_count_matches_enumeration(L, Lp, S, N):
    assert len(enumerate_starts(L, Lp, S)) == N
    assert n_patches(L, Lp, S) == N
    cfg = EncoderConfig(seq_len=L, patch_len=Lp, stride=S, d_model=8, n_heads=2, conv_kernel=4)
    seq = make_patches(np.arange(L, dtype=float), cfg)
    assert seq.n_patches == N and seq.patches.shape == (Lp, N)
    for j, start in enumerate(enumerate_starts(L, Lp, S)):
        assert np.array_equal(seq.patches[:, j], np.arange(start, start + Lp))


def test_single_full_window_patch():
    cfg = EncoderConfig(seq_len=16, patch_len=16, stride=4, d_model=8, n_heads=2, conv_kernel=4)
    x = np.random.default_rng(0).normal(size=16)
    assert np.array_equal(make_patches(x, cfg).patches[:, 0], x)


def test_short_series_rejected():
    with pytest.raises(ShapeError):
        n_patches(10, 16, 4)
    with pytest.raises(ConfigError):
        EncoderConfig(seq_len=10, patch_len=16)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 12), st.integers(1, 8), st.integers(0, 20))
def test_non_overlapping_patches_reconstruct_prefix(Lp, n, extra):
    L = Lp * n + extra % Lp if Lp > 1 else Lp * n
    cfg = EncoderConfig(seq_len=L, patch_len=Lp, stride=Lp, d_model=4, n_heads=1, conv_kernel=1)
    x = np.arange(L, dtype=float)
    seq = make_patches(x, cfg)
    assert np.array_equal(seq.patches.T.reshape(-1), x[: seq.n_patches * Lp])


# attention

def test_attention_constant_scores_average_values():
    Q = torch.zeros(3, 4, dtype=torch.float64)
    K = torch.randn(5, 4, dtype=torch.float64)
    V = torch.randn(5, 2, dtype=torch.float64)
    out = attention(Q, K, V, 4)
    assert torch.allclose(out, V.mean(0).expand(3, 2), atol=1e-14)


def test_attention_single_key_returns_value():
    V = torch.tensor([[1.5, -2.0, 0.25]], dtype=torch.float64)
    out = attention(torch.randn(4, 2, dtype=torch.float64), torch.randn(1, 2, dtype=torch.float64), V, 2)
    assert torch.allclose(out, V.expand(4, 3), atol=1e-15)


def test_attention_matches_loop_oracle():
    g = np.random.default_rng(3)
    Q, K, V = g.normal(size=(3, 4)), g.normal(size=(3, 4)), g.normal(size=(3, 4))
    out = attention(*(torch.tensor(a) for a in (Q, K, V)), 4).numpy()
    assert np.max(np.abs(out - attention_loops(Q, K, V, 4))) <= 1e-12


def test_attention_dimension_mismatch():
    with pytest.raises(ShapeError):
        attention(torch.zeros(2, 3), torch.zeros(2, 4), torch.zeros(2, 4), 3)
    with pytest.raises(ShapeError):
        attention(torch.zeros(2, 3), torch.zeros(2, 3), torch.zeros(5, 4), 3)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.floats(0.1, 30))
def test_softmax_rows_sum_to_one(nq, nk, scale):
    g = torch.Generator().manual_seed(nq * 7 + nk)
    Q = torch.randn(nq, 3, generator=g, dtype=torch.float64) * scale
    K = torch.randn(nk, 3, generator=g, dtype=torch.float64) * scale
    # with V = identity the output rows are the attention weights
    w = attention(Q, K, torch.eye(nk, dtype=torch.float64), 3)
    assert torch.allclose(w.sum(-1), torch.ones(nq, dtype=torch.float64), atol=1e-9)


# encoder forward

def dsads_cfg(**kw):
    return EncoderConfig.dsads(**kw)


def test_dsads_channel_representation_shape():
    cfg = dsads_cfg()
    p = init_encoder_params(cfg, torch.Generator().manual_seed(0))
    z = encode_channel(np.random.default_rng(0).normal(size=125), p, cfg, "eval", init_encoder_buffers(cfg))
    assert tuple(z.shape) == (32, 28)


def test_dsads_feature_length():
    cfg = dsads_cfg()
    p = init_encoder_params(cfg, torch.Generator().manual_seed(0))
    w = TimeSeriesWindow(np.random.default_rng(0).normal(size=(125, 45)))
    f = encode(w, p, cfg, "eval", init_encoder_buffers(cfg))
    assert tuple(f.shape) == (128,)


def test_eval_mode_deterministic(tiny_encoder):
    cfg = EncoderConfig(**{**tiny_encoder.__dict__, "dropout": 0.5})
    p = init_encoder_params(cfg, torch.Generator().manual_seed(1), torch.float64)
    b = init_encoder_buffers(cfg, torch.float64)
    x = np.random.default_rng(0).normal(size=(3, 16, 2))
    assert torch.equal(encode(x, p, cfg, "eval", b), encode(x, p, cfg, "eval", b))
    # identical windows inside one batch get identical features
    xx = np.stack([x[0], x[0]])
    f = encode(xx, p, cfg, "eval", b)
    assert torch.equal(f[0], f[1])


def test_train_mode_dropout_is_random(tiny_encoder):
    cfg = EncoderConfig(**{**tiny_encoder.__dict__, "dropout": 0.5})
    p = init_encoder_params(cfg, torch.Generator().manual_seed(1), torch.float64)
    x = np.random.default_rng(0).normal(size=(3, 16, 2))
    a = encode(x, p, cfg, "train", generator=torch.Generator().manual_seed(0))
    b = encode(x, p, cfg, "train", generator=torch.Generator().manual_seed(1))
    c = encode(x, p, cfg, "train", generator=torch.Generator().manual_seed(0))
    assert not torch.equal(a, b)
    assert torch.equal(a, c)


def test_zero_input_degenerate_forward_is_finite(tiny_encoder):
    cfg = tiny_encoder
    p = init_encoder_params(cfg, torch.Generator().manual_seed(0), torch.float64)
    p["enc.W_pos"] = torch.zeros_like(p["enc.W_pos"])
    b = init_encoder_buffers(cfg, torch.float64)
    for l in range(cfg.n_layers):
        p[f"enc.l{l}.bn2.bias"] = torch.full((cfg.d_model,), 0.3, dtype=torch.float64)
    z = encode_channel(np.zeros(16), p, cfg, "train")
    assert torch.isfinite(z).all()
    # with zero input and zero biases every token is identical, so batch
    # statistics normalise it to exactly zero and only the last shift survives
    assert torch.allclose(z, torch.full_like(z, 0.3), atol=1e-12)
    z_eval = encode_channel(np.zeros(16), p, cfg, "eval", b)
    assert torch.allclose(z_eval, torch.full_like(z_eval, 0.3), atol=1e-6)


def test_channel_permutation_permutes_representations(tiny_encoder):
    cfg = EncoderConfig(**{**tiny_encoder.__dict__, "n_channels": 3})
    p = init_encoder_params(cfg, torch.Generator().manual_seed(2), torch.float64)
    b = init_encoder_buffers(cfg, torch.float64)
    x = np.random.default_rng(5).normal(size=(2, 16, 3))
    perm = [2, 0, 1]
    z = channel_representations(x, p, cfg, "eval", b)
    zp = channel_representations(x[:, :, perm], p, cfg, "eval", b)
    assert torch.allclose(zp, z[:, perm], atol=1e-12)


def test_channel_count_mismatch(tiny_encoder):
    p = init_encoder_params(tiny_encoder, torch.Generator().manual_seed(0), torch.float64)
    with pytest.raises(ShapeError):
        encode(np.zeros((16, 3)), p, tiny_encoder, "train")


def test_running_statistics_update_only_when_requested(tiny_encoder):
    p = init_encoder_params(tiny_encoder, torch.Generator().manual_seed(0), torch.float64)
    b = init_encoder_buffers(tiny_encoder, torch.float64)
    before = {k: v.clone() for k, v in b.items()}
    x = np.random.default_rng(0).normal(size=(4, 16, 2))
    encode(x, p, tiny_encoder, "train", b)
    assert all(torch.equal(b[k], before[k]) for k in b)
    encode(x, p, tiny_encoder, "train", b, update_stats=True)
    assert not torch.equal(b["enc.l0.bn1.running_mean"], before["enc.l0.bn1.running_mean"])


def test_feature_gradient_matches_finite_differences(tiny_encoder):
    cfg = tiny_encoder
    p0 = init_encoder_params(cfg, torch.Generator().manual_seed(7), torch.float64)
    x = torch.tensor(np.random.default_rng(1).normal(size=(3, 16, 2)))

    leaves = {k: v.clone().requires_grad_(True) for k, v in p0.items()}
    probe = encode(x, leaves, cfg, "train").sum()
    grads = torch.autograd.grad(probe, list(leaves.values()))
    analytic = {k: g.numpy() for k, g in zip(leaves, grads)}

    def f(np_params):
        with torch.no_grad():
            return float(encode(x, {k: torch.from_numpy(v) for k, v in np_params.items()}, cfg, "train").sum())

    numeric = central_differences(f, {k: v.numpy().copy() for k, v in p0.items()}, eps=1e-4)
    assert max_relative_error(analytic, numeric) < 1e-4
