"""Channel-independent patch transformer encoder.

The encoder is written functionally: every call takes an explicit parameter
map so that a gradient step on the parameters can itself be differentiated.
Internally tokens are laid out as (batch * channels, N, D); ``encode_channel``
returns the (D, N) orientation.

Head merging: each head attends with its own (D, d_k) query/key maps and a
(D, D) value map; the H head outputs (each N x D) are individually projected
by a per-head (D, D) output matrix and summed, plus one shared output bias.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F

from .activations import get_activation
from .data import TimeSeriesWindow
from .errors import ConfigError, ShapeError

HEAD_MERGE = "sum_h(softmax(Q_h K_h^T / sqrt(d_k)) V_h W_o[h]) + b_o; W_v[h], W_o[h] in R^{D x D}"

BN_EPS = 1e-5


@dataclass(frozen=True)
class EncoderConfig:
    seq_len: int = 125
    patch_len: int = 16
    stride: int = 4
    n_channels: int = 45
    n_layers: int = 3
    n_heads: int = 4
    d_model: int = 32
    dropout: float = 0.2
    conv_kernel: int = 8
    conv_out_channels: int = 128
    ff_mult: int = 2
    bn_momentum: float = 0.1
    activation: str = "relu"

    def __post_init__(self):
        get_activation(self.activation)
        if self.patch_len > self.seq_len:
            raise ConfigError(f"patch_len {self.patch_len} exceeds seq_len {self.seq_len}")
        if self.stride < 1:
            raise ConfigError("stride must be >= 1")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.conv_kernel > self.d_model * self.n_patches:
            raise ConfigError("conv_kernel longer than the flattened sequence")

    @property
    def n_patches(self) -> int:
        return n_patches(self.seq_len, self.patch_len, self.stride)

    @property
    def d_k(self) -> int:
        return self.d_model // self.n_heads

    @property
    def feature_dim(self) -> int:
        return self.conv_out_channels

    @classmethod
    def dsads(cls, **kw):
        return cls(**{"seq_len": 125, "patch_len": 16, "stride": 4, "n_channels": 45, **kw})

    @classmethod
    def pamap2(cls, **kw):
        return cls(**{"seq_len": 512, "patch_len": 64, "stride": 8, "n_channels": 27, **kw})

    @classmethod
    def uschad(cls, **kw):
        return cls(**{"seq_len": 500, "patch_len": 64, "stride": 8, "n_channels": 6, **kw})


def n_patches(L: int, patch_len: int, stride: int) -> int:
    if L < patch_len:
        raise ShapeError(f"series length {L} shorter than patch length {patch_len}")
    return (L - patch_len) // stride + 1


class PatchSequence(NamedTuple):
    patches: np.ndarray  # (patch_len, N); column j is patch j
    n_patches: int


def make_patches(x, cfg: EncoderConfig) -> PatchSequence:
    """Cut a univariate series into length-``patch_len`` patches at multiples of ``stride``.

    Trailing steps that do not fill a whole patch are dropped.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    N = n_patches(len(x), cfg.patch_len, cfg.stride)
    windows = np.lib.stride_tricks.sliding_window_view(x, cfg.patch_len)[:: cfg.stride][:N]
    return PatchSequence(np.ascontiguousarray(windows.T), N)


def attention(Q: torch.Tensor, K: torch.Tensor, V: torch.Tensor, d_k: int) -> torch.Tensor:
    """softmax(Q K^T / sqrt(d_k)) V with the softmax taken over keys."""
    if Q.shape[-1] != K.shape[-1]:
        raise ShapeError(f"query dim {Q.shape[-1]} != key dim {K.shape[-1]}")
    if K.shape[-2] != V.shape[-2]:
        raise ShapeError(f"{K.shape[-2]} keys but {V.shape[-2]} values")
    scores = Q @ K.transpose(-1, -2) / math.sqrt(d_k)
    return torch.softmax(scores, dim=-1) @ V


def _init(shape, fan_in, generator, dtype):
    bound = 1.0 / math.sqrt(fan_in)
    return (torch.rand(shape, generator=generator, dtype=dtype) * 2 - 1) * bound


def init_encoder_params(cfg: EncoderConfig, generator: torch.Generator, dtype=torch.float32) -> dict[str, torch.Tensor]:
    D, H, dk, N, Lp = cfg.d_model, cfg.n_heads, cfg.d_k, cfg.n_patches, cfg.patch_len
    hidden = cfg.ff_mult * D
    p = {
        "enc.W_p": _init((D, Lp), Lp, generator, dtype),
        "enc.W_pos": (torch.rand((D, N), generator=generator, dtype=dtype) * 2 - 1) * 0.02,
    }
    for l in range(cfg.n_layers):
        pre = f"enc.l{l}."
        p[pre + "W_q"] = _init((H, D, dk), D, generator, dtype)
        p[pre + "W_k"] = _init((H, D, dk), D, generator, dtype)
        p[pre + "W_v"] = _init((H, D, D), D, generator, dtype)
        p[pre + "W_o"] = _init((H, D, D), D * H, generator, dtype)
        p[pre + "b_o"] = torch.zeros(D, dtype=dtype)
        p[pre + "bn1.weight"] = torch.ones(D, dtype=dtype)
        p[pre + "bn1.bias"] = torch.zeros(D, dtype=dtype)
        p[pre + "ff.W1"] = _init((D, hidden), D, generator, dtype)
        p[pre + "ff.b1"] = torch.zeros(hidden, dtype=dtype)
        p[pre + "ff.W2"] = _init((hidden, D), hidden, generator, dtype)
        p[pre + "ff.b2"] = torch.zeros(D, dtype=dtype)
        p[pre + "bn2.weight"] = torch.ones(D, dtype=dtype)
        p[pre + "bn2.bias"] = torch.zeros(D, dtype=dtype)
    M, k, Fo = cfg.n_channels, cfg.conv_kernel, cfg.conv_out_channels
    p["enc.conv.W"] = _init((Fo, M, k), M * k, generator, dtype)
    p["enc.conv.b"] = torch.zeros(Fo, dtype=dtype)
    return p


def init_encoder_buffers(cfg: EncoderConfig, dtype=torch.float32) -> dict[str, torch.Tensor]:
    """BatchNorm running statistics (not trainable)."""
    b = {}
    for l in range(cfg.n_layers):
        for bn in ("bn1", "bn2"):
            b[f"enc.l{l}.{bn}.running_mean"] = torch.zeros(cfg.d_model, dtype=dtype)
            b[f"enc.l{l}.{bn}.running_var"] = torch.ones(cfg.d_model, dtype=dtype)
    return b


def expected_shapes(cfg: EncoderConfig) -> dict[str, tuple[int, ...]]:
    g = torch.Generator().manual_seed(0)
    return {k: tuple(v.shape) for k, v in init_encoder_params(cfg, g, torch.float64).items()}


def check_params(params, cfg: EncoderConfig) -> None:
    for name, shape in expected_shapes(cfg).items():
        if name not in params:
            raise ShapeError(f"missing encoder parameter {name!r}")
        if tuple(params[name].shape) != shape:
            raise ShapeError(f"{name}: expected shape {shape}, got {tuple(params[name].shape)}")


def _dropout(x, p, mode, generator):
    if mode != "train" or p == 0:
        return x
    keep = torch.rand(x.shape, generator=generator, dtype=x.dtype) >= p
    return x * keep / (1.0 - p)


def _batch_norm(x, weight, bias, buffers, prefix, mode, momentum, update_stats):
    # x: (B, N, D); statistics over every token
    if mode == "train":
        flat = x.reshape(-1, x.shape[-1])
        mean = flat.mean(0)
        var = flat.var(0, unbiased=False)
        if update_stats and buffers is not None:
            n = flat.shape[0]
            unbiased = var.detach() * n / max(n - 1, 1)
            rm, rv = prefix + "running_mean", prefix + "running_var"
            buffers[rm] = (1 - momentum) * buffers[rm] + momentum * mean.detach().to(buffers[rm].dtype)
            buffers[rv] = (1 - momentum) * buffers[rv] + momentum * unbiased.to(buffers[rv].dtype)
    else:
        if buffers is None:
            raise ValueError("eval mode needs BatchNorm running statistics")
        mean = buffers[prefix + "running_mean"].to(x.dtype)
        var = buffers[prefix + "running_var"].to(x.dtype)
    return (x - mean) / torch.sqrt(var + BN_EPS) * weight + bias


def _encode_tokens(series, params, cfg, mode, buffers, generator, update_stats):
    """series: (B, L) univariate rows -> tokens (B, N, D)."""
    if series.shape[-1] != cfg.seq_len:
        raise ShapeError(f"series length {series.shape[-1]} != seq_len {cfg.seq_len}")
    patches = series.unfold(-1, cfg.patch_len, cfg.stride)  # (B, N, L')
    x = patches @ params["enc.W_p"].T + params["enc.W_pos"].T
    act = get_activation(cfg.activation)
    for l in range(cfg.n_layers):
        pre = f"enc.l{l}."
        q = torch.einsum("bnd,hdk->bhnk", x, params[pre + "W_q"])
        k = torch.einsum("bnd,hdk->bhnk", x, params[pre + "W_k"])
        v = torch.einsum("bnd,hde->bhne", x, params[pre + "W_v"])
        heads = attention(q, k, v, cfg.d_k)  # (B, H, N, D)
        attn = torch.einsum("bhne,hef->bnf", heads, params[pre + "W_o"]) + params[pre + "b_o"]
        x = x + _dropout(attn, cfg.dropout, mode, generator)
        x = _batch_norm(x, params[pre + "bn1.weight"], params[pre + "bn1.bias"], buffers, pre + "bn1.",
                        mode, cfg.bn_momentum, update_stats)
        h = act(x @ params[pre + "ff.W1"] + params[pre + "ff.b1"])
        h = h @ params[pre + "ff.W2"] + params[pre + "ff.b2"]
        x = x + _dropout(h, cfg.dropout, mode, generator)
        x = _batch_norm(x, params[pre + "bn2.weight"], params[pre + "bn2.bias"], buffers, pre + "bn2.",
                        mode, cfg.bn_momentum, update_stats)
    return x


def _as_tensor(x, params):
    ref = next(iter(params.values()))
    if isinstance(x, TimeSeriesWindow):
        x = x.values
    if isinstance(x, torch.Tensor):
        return x.to(ref.dtype)
    return torch.tensor(np.asarray(x), dtype=ref.dtype)


def encode_channel(series, params, cfg: EncoderConfig, mode="eval", buffers=None, generator=None,
                   update_stats=False) -> torch.Tensor:
    """Encode one univariate series of length L into a (D, N) representation."""
    s = _as_tensor(series, params).reshape(1, -1)
    return _encode_tokens(s, params, cfg, mode, buffers, generator, update_stats)[0].T


def channel_representations(x, params, cfg: EncoderConfig, mode="eval", buffers=None, generator=None,
                            update_stats=False) -> torch.Tensor:
    """(B, L, M) windows -> (B, M, D*N) flattened per-channel representations."""
    x = _as_tensor(x, params)
    if x.dim() == 2:
        x = x.unsqueeze(0)
    B, L, M = x.shape
    if M != cfg.n_channels:
        raise ShapeError(f"window has {M} channels, encoder expects {cfg.n_channels}")
    series = x.permute(0, 2, 1).reshape(B * M, L)
    tokens = _encode_tokens(series, params, cfg, mode, buffers, generator, update_stats)  # (B*M, N, D)
    z = tokens.transpose(1, 2).reshape(B, M, cfg.d_model * cfg.n_patches)
    return z


def encode(x, params, cfg: EncoderConfig, mode="eval", buffers=None, generator=None, update_stats=False):
    """Windows -> features of length ``conv_out_channels``.

    Accepts a single (L, M) window (returns a 1-D feature vector) or a batch
    (B, L, M) (returns (B, F)).
    """
    if isinstance(x, TimeSeriesWindow):
        x = x.values
    single = (x.dim() if isinstance(x, torch.Tensor) else np.ndim(x)) == 2
    z = channel_representations(x, params, cfg, mode, buffers, generator, update_stats)
    h = get_activation(cfg.activation)(F.conv1d(z, params["enc.conv.W"], params["enc.conv.b"]))
    feats = h.mean(-1)
    return feats[0] if single else feats
