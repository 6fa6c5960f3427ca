"""Bi-level meta-optimization over source domains.

Each iteration splits the source domains into meta-train domains and
virtual-target domains, takes one differentiable gradient step on the
meta-train loss, scores the stepped parameters on the virtual targets, and
updates the original parameters with Adam on

    L_train(theta) + beta * L_test(theta - alpha * grad L_train(theta)).
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, NamedTuple, Sequence

import numpy as np
import torch

from .augment import AugmentationConfig, make_view_arrays
from .data import DomainDataset, DomainId, ParameterSet, ShapeSpec, validate_dataset
from .encoder import EncoderConfig
from .errors import ConfigError, DataError, TrainingError
from .heads import HeadsConfig
from .model import Model

log = logging.getLogger(__name__)

POOLED = "pooled"


@dataclass(frozen=True)
class MetaConfig:
    alpha: float = 0.0005
    beta: float = 1.0
    n_virtual: int = 1
    second_order: bool = True
    outer_lr: float = 0.0005
    batch_size: int = 256
    max_epochs: int = 500
    patience: int = 20
    min_delta: float = 1e-4
    views_per_sample: int = 1
    seed: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.alpha <= 0:
            raise ConfigError("alpha must be > 0")
        if self.beta < 0:
            raise ConfigError("beta must be >= 0")
        if self.n_virtual < 1:
            raise ConfigError("n_virtual must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.max_epochs < 0:
            raise ConfigError("max_epochs must be >= 0")


@dataclass(frozen=True)
class MetaSplit:
    meta_train: tuple[DomainId, ...]
    virtual_target: tuple[DomainId, ...]

    def __post_init__(self):
        object.__setattr__(self, "meta_train", tuple(self.meta_train))
        object.__setattr__(self, "virtual_target", tuple(self.virtual_target))
        if set(self.meta_train) & set(self.virtual_target):
            raise ConfigError("meta-train and virtual-target domains overlap")

    @property
    def domains(self) -> tuple[DomainId, ...]:
        return self.meta_train + self.virtual_target


def draw_meta_split(sources: Sequence[DomainId], V: int, rng: np.random.Generator) -> MetaSplit:
    sources = list(sources)
    U = len(sources)
    if not 1 <= V < U:
        raise ConfigError(f"need 1 <= V < U, got V={V}, U={U}")
    chosen = set(rng.choice(U, size=V, replace=False).tolist())
    return MetaSplit(
        tuple(s for i, s in enumerate(sources) if i not in chosen),
        tuple(s for i, s in enumerate(sources) if i in chosen),
    )


class Batch(NamedTuple):
    x: torch.Tensor
    y: torch.Tensor


# loss_fn(params, batches, phase) -> 1-D tensor holding each batch's mean per-sample loss.
# All batches of one stage are passed together so a loss may couple samples
# across domains (the contrastive term does). phase is "train" or "test".
LossFn = Callable[[Mapping[str, torch.Tensor], Sequence[Batch], str], torch.Tensor]


def per_domain(fn: Callable[[Mapping[str, torch.Tensor], Batch, str], torch.Tensor]) -> LossFn:
    """Lift a single-batch loss to the multi-batch ``LossFn`` signature."""
    def loss_fn(params, batches, phase):
        return torch.stack([fn(params, b, phase) for b in batches])
    return loss_fn


def meta_train_loss(params, domains: Sequence[DomainId], batches: Mapping[DomainId, Batch], loss_fn: LossFn,
                    phase: str = "train") -> torch.Tensor:
    """Average over domains of each domain's mean per-sample loss."""
    if not domains:
        raise ConfigError("no domains to average over")
    chosen = []
    for d in domains:
        b = batches.get(d)
        if b is None or len(b.y) == 0:
            raise DataError(f"empty batch for domain {d!r}")
        chosen.append(b)
    return loss_fn(params, chosen, phase).mean()


class StepDiagnostics(NamedTuple):
    loss_train: float
    loss_test: float
    objective: float


def meta_objective(params, split: MetaSplit, batches, cfg: MetaConfig, loss_fn: LossFn, create_graph=True):
    """Evaluate the full objective at ``params``; returns (objective, L_train, L_test)."""
    names = list(params)
    l_train = meta_train_loss(params, split.meta_train, batches, loss_fn, "train")
    if cfg.beta == 0 or not split.virtual_target:
        return l_train, l_train, None
    grads = torch.autograd.grad(l_train, [params[k] for k in names], create_graph=create_graph and cfg.second_order,
                                retain_graph=True, allow_unused=True)
    adapted = {}
    for k, g in zip(names, grads):
        if g is None:
            adapted[k] = params[k]
            continue
        if not cfg.second_order:
            g = g.detach()
        adapted[k] = params[k] - cfg.alpha * g
    l_test = meta_train_loss(adapted, split.virtual_target, batches, loss_fn, "test")
    return l_train + cfg.beta * l_test, l_train, l_test


def meta_step(params, split: MetaSplit, batches: Mapping[DomainId, Batch], cfg: MetaConfig, loss_fn: LossFn):
    """Gradient of the meta objective with respect to ``params``.

    ``params`` is left untouched; gradients are taken with respect to fresh
    leaves built from it. With ``second_order`` the gradient flows through the
    inner step (Hessian-vector term included); otherwise the inner gradient is
    treated as a constant.
    """
    leaves = {k: v.detach().requires_grad_(True) for k, v in params.items()}
    total, l_train, l_test = meta_objective(leaves, split, batches, cfg, loss_fn)
    if not torch.isfinite(total):
        raise TrainingError(
            f"non-finite objective (L_train={float(l_train.detach())}, "
            f"L_test={None if l_test is None else float(l_test.detach())})"
        )
    names = list(leaves)
    grads = torch.autograd.grad(total, [leaves[k] for k in names], allow_unused=True)
    out = {k: (torch.zeros_like(leaves[k]) if g is None else g.detach()) for k, g in zip(names, grads)}
    diag = StepDiagnostics(float(l_train.detach()), float("nan") if l_test is None else float(l_test.detach()),
                           float(total.detach()))
    return out, diag


# ---------------------------------------------------------------- batching

def _quotas(total: int, capacities: Sequence[int], order: Sequence[int]) -> list[int]:
    """Spread ``total`` as evenly as possible, remainder round-robin in ``order``, capped by capacity."""
    q = [0] * len(capacities)
    remaining = min(total, sum(capacities))
    while remaining > 0:
        progressed = False
        for i in order:
            if remaining == 0:
                break
            if q[i] < capacities[i]:
                q[i] += 1
                remaining -= 1
                progressed = True
        if not progressed:
            break
    return q


def stratified_indices(y: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``n`` indices without replacement, balanced across classes."""
    classes = np.unique(y)
    members = [np.flatnonzero(y == c) for c in classes]
    order = rng.permutation(len(classes))
    quotas = _quotas(n, [len(m) for m in members], order)
    picks = [rng.choice(m, size=q, replace=False) for m, q in zip(members, quotas) if q]
    return np.sort(np.concatenate(picks)) if picks else np.zeros(0, dtype=np.int64)


def sample_domain_batches(data: Mapping[DomainId, tuple[np.ndarray, np.ndarray]], domains: Sequence[DomainId],
                          batch_size: int, rng: np.random.Generator) -> dict[DomainId, np.ndarray]:
    order = rng.permutation(len(domains))
    quotas = _quotas(batch_size, [len(data[d][1]) for d in domains], order)
    return {d: stratified_indices(data[d][1], q, rng) for d, q in zip(domains, quotas)}


def build_batches(data, picks, aug_cfg: AugmentationConfig, rng: np.random.Generator, views: int, dtype):
    out = {}
    for d, idx in picks.items():
        X, y = data[d]
        X_all, origin = make_view_arrays(X[idx], aug_cfg, rng, views)
        out[d] = Batch(torch.as_tensor(X_all, dtype=dtype), torch.as_tensor(y[idx][origin], dtype=torch.long))
    return out


# ---------------------------------------------------------------- training

@dataclass
class TrainResult:
    params: ParameterSet
    buffers: dict[str, torch.Tensor]
    history: list[dict] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)
    initial_accuracy: float = float("nan")


class _Streams:
    """Independent random streams derived from one seed."""

    def __init__(self, seed: int):
        ss = np.random.SeedSequence(int(seed))
        split_ss, batch_ss, aug_ss, torch_ss = ss.spawn(4)
        self.split = np.random.default_rng(split_ss)
        self.batch = np.random.default_rng(batch_ss)
        self.aug = np.random.default_rng(aug_ss)
        self.dropout = torch.Generator().manual_seed(int(torch_ss.generate_state(1)[0]))


def _check_sources(sources: Sequence[DomainDataset], shape: ShapeSpec | None):
    if shape is None:
        X, _ = sources[0].arrays()
        C = 1 + max(s.label for d in sources for s in d.samples)
        shape = ShapeSpec(X.shape[1], X.shape[2], C)
    for d in sources:
        bad = validate_dataset(d, shape)
        if bad:
            raise DataError(f"domain {d.domain!r} failed validation: {bad[0]}")


def _source_arrays(sources: Sequence[DomainDataset], pool: bool):
    data = {d.domain: d.arrays() for d in sources}
    if pool:
        X = np.concatenate([data[d.domain][0] for d in sources])
        y = np.concatenate([data[d.domain][1] for d in sources])
        return {POOLED: (X, y)}
    return data


def make_loss_fn(model: Model, buffers, generator) -> LossFn:
    def loss_fn(params, batches, phase):
        return model.grouped_loss(params, [b.x for b in batches], [b.y for b in batches], "train", buffers,
                                  generator, update_stats=(phase == "train"))
    return loss_fn


def _append_jsonl(path, record):
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(record) + "\n")


class _Stopper:
    def __init__(self, patience, min_delta):
        self.patience, self.min_delta = patience, min_delta
        self.best, self.stale = math.inf, 0

    def update(self, value) -> bool:
        if value < self.best - self.min_delta:
            self.best, self.stale = value, 0
        else:
            self.stale += 1
        return self.patience > 0 and self.stale >= self.patience


def _steps_per_epoch(data, batch_size):
    return max(1, math.ceil(sum(len(v[1]) for v in data.values()) / batch_size))


def train(
    sources: Sequence[DomainDataset],
    cfg: MetaConfig,
    aug_cfg: AugmentationConfig,
    enc_cfg: EncoderConfig,
    heads_cfg: HeadsConfig,
    *,
    dtype=torch.float32,
    pool_sources: bool = False,
    shape: ShapeSpec | None = None,
    history_path: str | Path | None = None,
    checkpoint_dir: str | Path | None = None,
    config_digest: str = "",
) -> TrainResult:
    """Meta-train a fresh model on ``sources``.

    With ``pool_sources`` all domains are merged into one meta-train domain and
    no virtual target is drawn; together with ``beta=0`` this is plain
    multi-domain training on the mixed loss.
    """
    if len(sources) < 2 and not pool_sources:
        raise ConfigError("meta-training needs at least 2 source domains")
    if not pool_sources and cfg.beta > 0 and cfg.n_virtual >= len(sources):
        raise ConfigError(f"n_virtual={cfg.n_virtual} must be < number of sources {len(sources)}")
    _check_sources(sources, shape)

    model = Model(enc_cfg, heads_cfg)
    streams = _Streams(cfg.seed)
    params = model.init_params(cfg.seed, dtype)
    buffers = model.init_buffers(dtype)
    data = _source_arrays(sources, pool_sources)
    domain_ids = list(data)

    all_X = np.concatenate([v[0] for v in data.values()])
    all_y = np.concatenate([v[1] for v in data.values()])
    result = TrainResult(params.clone(), dict(buffers))
    result.initial_accuracy = model.evaluate(params, all_X, all_y, buffers)
    if cfg.max_epochs == 0:
        return result

    leaves = [v.detach().clone().requires_grad_(True) for v in params.values()]
    names = list(params)
    opt = torch.optim.Adam(leaves, lr=cfg.outer_lr)
    loss_fn = make_loss_fn(model, buffers, streams.dropout)
    stopper = _Stopper(cfg.patience, cfg.min_delta)
    steps = _steps_per_epoch(data, cfg.batch_size)
    t0 = time.perf_counter()
    for epoch in range(cfg.max_epochs):
        tr, te = [], []
        split = None
        for _ in range(steps):
            if pool_sources:
                split = MetaSplit((POOLED,), ())
            else:
                split = draw_meta_split(domain_ids, cfg.n_virtual, streams.split)
            picks = sample_domain_batches(data, split.domains, cfg.batch_size, streams.batch)
            batches = build_batches(data, picks, aug_cfg, streams.aug, cfg.views_per_sample, dtype)
            current = dict(zip(names, leaves))
            grads, diag = meta_step(current, split, batches, cfg, loss_fn)
            for leaf, k in zip(leaves, names):
                leaf.grad = grads[k]
            opt.step()
            tr.append(diag.loss_train)
            te.append(diag.loss_test)
            result.step_losses.append(diag.objective)
        current = ParameterSet({k: v.detach() for k, v in zip(names, leaves)})
        vt_acc = None
        if split is not None and split.virtual_target:
            Xv = np.concatenate([data[d][0] for d in split.virtual_target])
            yv = np.concatenate([data[d][1] for d in split.virtual_target])
            vt_acc = model.evaluate(current, Xv, yv, buffers)
        rec = {
            "epoch": epoch,
            "L_train": float(np.mean(tr)),
            "L_test": None if all(math.isnan(v) for v in te) else float(np.nanmean(te)),
            "vt_accuracy": vt_acc,
            "wallclock_s": time.perf_counter() - t0,
        }
        result.history.append(rec)
        if history_path is not None:
            _append_jsonl(history_path, rec)
        if checkpoint_dir is not None and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            from .checkpoint import save_checkpoint

            save_checkpoint(Path(checkpoint_dir) / f"epoch{epoch + 1:04d}.ckpt", current, buffers, enc_cfg,
                            config_digest=config_digest)
        log.debug("epoch %d L_train=%.4f L_test=%s vt_acc=%s", epoch, rec["L_train"], rec["L_test"], vt_acc)
        if stopper.update(rec["L_train"]):
            log.info("early stop at epoch %d", epoch)
            break

    result.params = ParameterSet({k: v.detach().clone() for k, v in zip(names, leaves)})
    result.buffers = {k: v.clone() for k, v in buffers.items()}
    return result


def train_erm(
    sources: Sequence[DomainDataset],
    cfg: MetaConfig,
    aug_cfg: AugmentationConfig,
    enc_cfg: EncoderConfig,
    heads_cfg: HeadsConfig,
    *,
    dtype=torch.float32,
    shape: ShapeSpec | None = None,
    history_path: str | Path | None = None,
) -> TrainResult:
    """Baseline: pool every source sample and minimise the mixed loss with Adam."""
    _check_sources(sources, shape)
    model = Model(enc_cfg, heads_cfg)
    streams = _Streams(cfg.seed)
    params = model.init_params(cfg.seed, dtype)
    buffers = model.init_buffers(dtype)
    X = np.concatenate([d.arrays()[0] for d in sources])
    y = np.concatenate([d.arrays()[1] for d in sources])
    data = {POOLED: (X, y)}
    result = TrainResult(params.clone(), dict(buffers))
    result.initial_accuracy = model.evaluate(params, X, y, buffers)
    if cfg.max_epochs == 0:
        return result

    leaves = [v.detach().clone().requires_grad_(True) for v in params.values()]
    names = list(params)
    opt = torch.optim.Adam(leaves, lr=cfg.outer_lr)
    stopper = _Stopper(cfg.patience, cfg.min_delta)
    steps = _steps_per_epoch(data, cfg.batch_size)
    t0 = time.perf_counter()
    for epoch in range(cfg.max_epochs):
        losses = []
        for _ in range(steps):
            picks = sample_domain_batches(data, [POOLED], cfg.batch_size, streams.batch)
            batch = build_batches(data, picks, aug_cfg, streams.aug, cfg.views_per_sample, dtype)[POOLED]
            current = dict(zip(names, leaves))
            loss = model.grouped_loss(current, [batch.x], [batch.y], "train", buffers, streams.dropout,
                                      update_stats=True)[0]
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}")
            grads = torch.autograd.grad(loss, leaves, allow_unused=True)
            for leaf, g in zip(leaves, grads):
                leaf.grad = torch.zeros_like(leaf) if g is None else g
            opt.step()
            losses.append(float(loss.detach()))
            result.step_losses.append(float(loss.detach()))
        rec = {"epoch": epoch, "L_train": float(np.mean(losses)), "L_test": None, "vt_accuracy": None,
               "wallclock_s": time.perf_counter() - t0}
        result.history.append(rec)
        if history_path is not None:
            _append_jsonl(history_path, rec)
        if stopper.update(rec["L_train"]):
            break
    result.params = ParameterSet({k: v.detach().clone() for k, v in zip(names, leaves)})
    result.buffers = {k: v.clone() for k, v in buffers.items()}
    return result
