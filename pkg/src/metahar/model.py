"""Encoder + heads bundled behind one functional interface."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .data import ParameterSet
from .encoder import EncoderConfig, encode, init_encoder_buffers, init_encoder_params
from .heads import HeadsConfig, LossParts, classify, grouped_heads_loss, heads_loss, init_head_params


@dataclass(frozen=True)
class Model:
    encoder: EncoderConfig
    heads: HeadsConfig

    def init_params(self, seed: int, dtype=torch.float32) -> ParameterSet:
        g = torch.Generator().manual_seed(int(seed))
        p = init_encoder_params(self.encoder, g, dtype)
        p.update(init_head_params(self.encoder.feature_dim, self.heads, g, dtype))
        return ParameterSet(p)

    def init_buffers(self, dtype=torch.float32) -> dict[str, torch.Tensor]:
        return init_encoder_buffers(self.encoder, dtype)

    def features(self, params, x, mode="train", buffers=None, generator=None, update_stats=False):
        return encode(x, params, self.encoder, mode, buffers, generator, update_stats)

    def loss(self, params, x, y, mode="train", buffers=None, generator=None, update_stats=False) -> LossParts:
        feats = self.features(params, x, mode, buffers, generator, update_stats)
        y = _labels(y)
        return heads_loss(feats, y, params, self.heads)

    def grouped_loss(self, params, xs, ys, mode="train", buffers=None, generator=None, update_stats=False):
        """One forward pass over several batches; returns each batch's mean mixed loss."""
        x = torch.cat([torch.as_tensor(v) for v in xs]) if len(xs) > 1 else torch.as_tensor(xs[0])
        y = torch.cat([_labels(v) for v in ys])
        groups = torch.cat([torch.full((len(v),), i, dtype=torch.long) for i, v in enumerate(ys)])
        feats = self.features(params, x, mode, buffers, generator, update_stats)
        return grouped_heads_loss(feats, y, groups, len(ys), params, self.heads)

    @torch.no_grad()
    def predict(self, params, X, buffers, chunk: int = 512) -> np.ndarray:
        """Eval-mode class predictions for windows ``X`` (n, L, M)."""
        X = np.asarray(X)
        out = []
        for i in range(0, len(X), chunk):
            feats = self.features(params, X[i:i + chunk], "eval", buffers)
            out.append(classify(feats, params, self.heads).argmax(-1).cpu().numpy())
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)

    def evaluate(self, params, X, y, buffers) -> float:
        if len(X) == 0:
            return float("nan")
        return float(np.mean(self.predict(params, X, buffers) == np.asarray(y)))


def _labels(y):
    if isinstance(y, torch.Tensor):
        return y.long()
    return torch.as_tensor(np.asarray(y), dtype=torch.long)
