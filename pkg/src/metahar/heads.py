"""Projection and classification heads plus the losses that train them."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F

from .activations import get_activation
from .errors import ConfigError, ShapeError

NORM_EPS = 1e-12


@dataclass(frozen=True)
class HeadsConfig:
    n_classes: int = 19
    proj_width: int = 256
    cls_widths: tuple[int, ...] = (256, 256)
    tau: float = 0.07
    eta: float = 0.2
    normalize_projections: bool = True
    activation: str = "relu"

    def __post_init__(self):
        get_activation(self.activation)
        object.__setattr__(self, "cls_widths", tuple(int(w) for w in self.cls_widths))
        if self.tau <= 0:
            raise ConfigError("tau must be > 0")
        if not 0 <= self.eta <= 1:
            raise ConfigError("eta must lie in [0, 1]")
        if self.n_classes < 2:
            raise ConfigError("n_classes must be >= 2")


def _init(shape, fan_in, generator, dtype):
    bound = 1.0 / math.sqrt(fan_in)
    return (torch.rand(shape, generator=generator, dtype=dtype) * 2 - 1) * bound


def init_head_params(feature_dim: int, cfg: HeadsConfig, generator: torch.Generator, dtype=torch.float32):
    p = {
        "proj.W": _init((feature_dim, cfg.proj_width), feature_dim, generator, dtype),
        "proj.b": torch.zeros(cfg.proj_width, dtype=dtype),
    }
    widths = (feature_dim, *cfg.cls_widths, cfg.n_classes)
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        p[f"cls.W{i}"] = _init((a, b), a, generator, dtype)
        p[f"cls.b{i}"] = torch.zeros(b, dtype=dtype)
    return p


def project(features: torch.Tensor, params, cfg: HeadsConfig) -> torch.Tensor:
    """Affine + activation to ``proj_width``; rows scaled to unit norm when configured."""
    W = params["proj.W"]
    if features.shape[-1] != W.shape[0]:
        raise ShapeError(f"feature length {features.shape[-1]} != projection input {W.shape[0]}")
    z = get_activation(cfg.activation)(features @ W + params["proj.b"])
    if cfg.normalize_projections:
        z = z / (torch.linalg.vector_norm(z, dim=-1, keepdim=True) + NORM_EPS)
    return z


def classify(features: torch.Tensor, params, cfg: HeadsConfig) -> torch.Tensor:
    n = len(cfg.cls_widths) + 1
    if features.shape[-1] != params["cls.W0"].shape[0]:
        raise ShapeError(f"feature length {features.shape[-1]} != classifier input {params['cls.W0'].shape[0]}")
    act = get_activation(cfg.activation)
    h = features
    for i in range(n):
        h = h @ params[f"cls.W{i}"] + params[f"cls.b{i}"]
        if i < n - 1:
            h = act(h)
    return h


def cls_loss(logits: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy; ``y`` holds class indices or one-hot rows."""
    logp = F.log_softmax(logits, dim=-1)
    if y.dim() == logits.dim():
        return -(y.to(logp.dtype) * logp).sum(-1).mean()
    if y.numel() and (int(y.max()) >= logits.shape[-1] or int(y.min()) < 0):
        raise ShapeError(f"label outside [0, {logits.shape[-1]})")
    return -logp.gather(-1, y.long().unsqueeze(-1)).squeeze(-1).mean()


def supcon_per_anchor(z: torch.Tensor, labels: torch.Tensor, tau: float):
    """Per-anchor supervised contrastive terms.

    For anchor i the log-probability of each same-label peer p is taken against
    all other samples a != i and averaged over the peers. Returns
    ``(losses, has_pos)``; anchors without any peer get loss 0 and
    ``has_pos = False``.
    """
    n = z.shape[0]
    if n < 2:
        raise ShapeError("supervised contrastive loss needs at least 2 samples")
    labels = labels.reshape(-1)
    sim = (z @ z.T) / tau
    eye = torch.eye(n, dtype=torch.bool, device=z.device)
    log_denom = torch.logsumexp(sim.masked_fill(eye, float("-inf")), dim=1, keepdim=True)
    pos = (labels[:, None] == labels[None, :]) & ~eye
    n_pos = pos.sum(1)
    # zero the diagonal before the masked sum so no -inf meets a 0 weight
    log_prob = (sim - log_denom).masked_fill(eye, 0.0)
    per_anchor = -(log_prob * pos).sum(1) / n_pos.clamp(min=1)
    has_pos = n_pos > 0
    return per_anchor * has_pos, has_pos


def supcon_loss(z: torch.Tensor, labels: torch.Tensor, tau: float, reduction: str = "mean") -> torch.Tensor:
    """Supervised contrastive loss summed or averaged over anchors that have peers.

    ``reduction="mean"`` divides by the number of anchors with at least one
    same-label peer (a batch of all-distinct labels gives 0); ``"sum"`` is the
    plain sum over anchors.
    """
    per_anchor, has_pos = supcon_per_anchor(z, labels, tau)
    total = per_anchor.sum()
    if reduction == "sum":
        return total
    if reduction != "mean":
        raise ValueError(f"unknown reduction {reduction!r}")
    return total / has_pos.sum().clamp(min=1)


def mix_losses(l_cls, l_supcon, eta: float):
    return eta * l_cls + (1 - eta) * l_supcon


class LossParts(NamedTuple):
    total: torch.Tensor
    cls: torch.Tensor
    supcon: torch.Tensor
    logits: torch.Tensor


def heads_loss(features: torch.Tensor, y: torch.Tensor, params, cfg: HeadsConfig) -> LossParts:
    """Mixed classification + contrastive loss on already-encoded features."""
    logits = classify(features, params, cfg)
    lc = cls_loss(logits, y)
    if cfg.eta < 1:
        ls = supcon_loss(project(features, params, cfg), y, cfg.tau)
    else:
        ls = torch.zeros((), dtype=features.dtype)
    return LossParts(mix_losses(lc, ls, cfg.eta), lc, ls, logits)


def grouped_heads_loss(features: torch.Tensor, y: torch.Tensor, groups: torch.Tensor, n_groups: int, params,
                       cfg: HeadsConfig) -> torch.Tensor:
    """Mixed loss averaged within each group (domain); returns one value per group.

    Contrastive pairs are formed over the whole batch, so anchors from one
    group can have peers in another; each anchor's term is then credited to
    its own group.
    """
    logits = classify(features, params, cfg)
    ce = -F.log_softmax(logits, dim=-1).gather(-1, y.long().unsqueeze(-1)).squeeze(-1)
    onehot = F.one_hot(groups.long(), n_groups).to(features.dtype)  # (n, G)
    counts = onehot.sum(0)
    l_cls = (ce[:, None] * onehot).sum(0) / counts.clamp(min=1)
    if cfg.eta < 1:
        per_anchor, has_pos = supcon_per_anchor(project(features, params, cfg), y, cfg.tau)
        valid = onehot * has_pos[:, None].to(features.dtype)
        l_sup = (per_anchor[:, None] * valid).sum(0) / valid.sum(0).clamp(min=1)
    else:
        l_sup = torch.zeros_like(l_cls)
    return mix_losses(l_cls, l_sup, cfg.eta)


def accuracy(logits: torch.Tensor, y) -> float:
    y = torch.as_tensor(np.asarray(y)) if not isinstance(y, torch.Tensor) else y
    if y.numel() == 0:
        return float("nan")
    return float((logits.argmax(-1) == y).double().mean())
