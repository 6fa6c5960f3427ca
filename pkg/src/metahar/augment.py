"""Seeded sensor-window augmentations.

Every transform maps an (L, M) window to a new (L, M) window and draws all of
its randomness from a caller-owned ``numpy.random.Generator``. Each one is the
exact identity at its null setting (sigma 0, one segment, zero angle).

Random streams for concurrent workers are derived with ``fork_rng``, which
spawns independent child generators from the parent's seed sequence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np
from scipy.interpolate import CubicSpline, PchipInterpolator

from .data import LabeledSample, TimeSeriesWindow
from .errors import ConfigError, ShapeError

AUGMENTATIONS = ("rotate", "permute", "scale", "time_warp", "magnitude_warp", "jitter")

_MAX_WARP_TRIES = 1000


@dataclass(frozen=True)
class AugmentationConfig:
    rotation_max_angle_rad: float = math.pi
    permutation_segments: int = 4
    scaling_sigma: float = 0.1
    timewarp_knots: int = 4
    timewarp_sigma: float = 0.2
    magwarp_knots: int = 4
    magwarp_sigma: float = 0.2
    jitter_sigma: float = 0.05
    triad_channel_groups: tuple[tuple[int, int, int], ...] = ()
    enabled: tuple[str, ...] = AUGMENTATIONS

    def __post_init__(self):
        object.__setattr__(
            self, "triad_channel_groups", tuple(tuple(int(i) for i in t) for t in self.triad_channel_groups)
        )
        object.__setattr__(self, "enabled", tuple(self.enabled))
        for name in ("scaling_sigma", "timewarp_sigma", "magwarp_sigma", "jitter_sigma", "rotation_max_angle_rad"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.permutation_segments < 1:
            raise ConfigError("permutation_segments must be >= 1")
        for name in self.enabled:
            if name not in AUGMENTATIONS:
                raise ConfigError(f"unknown augmentation {name!r}")
        seen: set[int] = set()
        for t in self.triad_channel_groups:
            if len(t) != 3:
                raise ConfigError(f"triad {t} must have exactly 3 channels")
            if seen.intersection(t) or len(set(t)) != 3:
                raise ConfigError(f"triads must be disjoint, offending triad {t}")
            seen.update(t)

    def check_window(self, L: int, M: int) -> None:
        if self.permutation_segments > L:
            raise ConfigError(f"permutation_segments={self.permutation_segments} exceeds window length {L}")
        self.check_triads(M)

    def check_triads(self, M: int) -> None:
        for t in self.triad_channel_groups:
            if max(t) >= M or min(t) < 0:
                raise ShapeError(f"triad {t} references a channel outside [0, {M})")

    def active(self) -> tuple[str, ...]:
        """Enabled transforms that can actually run (rotation needs triads)."""
        return tuple(a for a in self.enabled if a != "rotate" or self.triad_channel_groups)


def fork_rng(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    return list(rng.spawn(n))


def _values(w) -> np.ndarray:
    return w.values if isinstance(w, TimeSeriesWindow) else np.asarray(w, dtype=np.float64)


def _wrap(w, out: np.ndarray):
    return w.replace_values(out) if isinstance(w, TimeSeriesWindow) else out


def rotation_matrix(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation of ``angle`` radians about unit ``axis``."""
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    K = np.array([[0.0, -axis[2], axis[1]], [axis[2], 0.0, -axis[0]], [-axis[1], axis[0], 0.0]])
    return np.eye(3) + math.sin(angle) * K + (1.0 - math.cos(angle)) * (K @ K)


def random_rotation(rng: np.random.Generator, max_angle: float) -> np.ndarray:
    axis = rng.normal(size=3)
    while np.linalg.norm(axis) < 1e-12:
        axis = rng.normal(size=3)
    angle = rng.uniform(0.0, max_angle)
    return rotation_matrix(axis, angle)


def rotate(w, cfg: AugmentationConfig, rng: np.random.Generator, matrices: Sequence[np.ndarray] | None = None):
    """Rotate each declared channel triad by one random SO(3) matrix.

    Rows are treated as row vectors and multiplied on the right, ``v' = v @ R``,
    so a +90 degree turn about z sends (x, y, z) to (y, -x, z). This is the
    change of coordinates seen by a sensor whose frame is rotated by +90.
    """
    x = _values(w)
    if not cfg.triad_channel_groups:
        raise ConfigError("rotate needs at least one triad_channel_group")
    cfg.check_triads(x.shape[1])
    out = x.copy()
    for k, triad in enumerate(cfg.triad_channel_groups):
        if matrices is not None:
            R = np.asarray(matrices[k], dtype=np.float64)
        else:
            R = random_rotation(rng, cfg.rotation_max_angle_rad)
        idx = list(triad)
        out[:, idx] = x[:, idx] @ R
    return _wrap(w, out)


def segment_bounds(L: int, K: int) -> list[tuple[int, int]]:
    """Near-equal contiguous segments; the first ``L % K`` get one extra step."""
    base, extra = divmod(L, K)
    bounds, start = [], 0
    for k in range(K):
        size = base + (1 if k < extra else 0)
        bounds.append((start, start + size))
        start += size
    return bounds


def permute(w, cfg: AugmentationConfig, rng: np.random.Generator, order: Sequence[int] | None = None):
    """Shuffle contiguous time segments; ``order`` (0-based) forces the permutation."""
    x = _values(w)
    L = x.shape[0]
    K = cfg.permutation_segments
    if K > L:
        raise ConfigError(f"permutation_segments={K} exceeds window length {L}")
    bounds = segment_bounds(L, K)
    if order is None:
        order = rng.permutation(K)
    out = np.concatenate([x[bounds[k][0]:bounds[k][1]] for k in order], axis=0)
    return _wrap(w, out)


def scale(w, cfg: AugmentationConfig, rng: np.random.Generator, factors: Sequence[float] | None = None):
    x = _values(w)
    if factors is None:
        factors = np.clip(rng.normal(1.0, cfg.scaling_sigma, size=x.shape[1]), 0.1, 10.0)
    return _wrap(w, x * np.asarray(factors, dtype=np.float64)[None, :])


def _warp_path(L: int, n_knots: int, sigma: float, rng: np.random.Generator) -> np.ndarray:
    # knots at the two ends plus n_knots interior points
    knot_x = np.linspace(0.0, L - 1.0, n_knots + 2)
    t = np.arange(L, dtype=np.float64)
    for _ in range(_MAX_WARP_TRIES):
        inc = np.diff(knot_x) * rng.normal(1.0, sigma, size=n_knots + 1)
        if np.any(inc <= 0):
            continue
        knot_y = np.concatenate([[0.0], np.cumsum(inc)])
        knot_y *= (L - 1.0) / knot_y[-1]
        tau = CubicSpline(knot_x, knot_y)(t)
        if np.all(np.diff(tau) > 0):
            break
    else:
        # rejection kept failing (very large sigma); PCHIP is monotone by construction
        tau = PchipInterpolator(knot_x, knot_y)(t)
    tau = np.clip(tau, 0.0, L - 1.0)
    tau[0], tau[-1] = 0.0, L - 1.0
    return tau


def time_warp(w, cfg: AugmentationConfig, rng: np.random.Generator):
    """Resample the window along a smooth, strictly increasing time remap."""
    x = _values(w)
    if cfg.timewarp_knots < 2:
        raise ConfigError("timewarp_knots must be >= 2")
    L = x.shape[0]
    if cfg.timewarp_sigma == 0 or L < 2:
        return _wrap(w, x.copy())
    tau = _warp_path(L, cfg.timewarp_knots, cfg.timewarp_sigma, rng)
    t = np.arange(L, dtype=np.float64)
    out = np.empty_like(x)
    for m in range(x.shape[1]):
        out[:, m] = np.interp(tau, t, x[:, m])
    return _wrap(w, out)


def magnitude_warp(w, cfg: AugmentationConfig, rng: np.random.Generator):
    """Multiply each channel by its own smooth positive envelope."""
    x = _values(w)
    if cfg.magwarp_knots < 2:
        raise ConfigError("magwarp_knots must be >= 2")
    L, M = x.shape
    if cfg.magwarp_sigma == 0:
        return _wrap(w, x.copy())
    knot_x = np.linspace(0.0, L - 1.0, cfg.magwarp_knots)
    knot_y = np.clip(rng.normal(1.0, cfg.magwarp_sigma, size=(cfg.magwarp_knots, M)), 0.1, 10.0)
    envelope = CubicSpline(knot_x, knot_y, axis=0)(np.arange(L, dtype=np.float64))
    envelope = np.clip(envelope, 0.1, 10.0)
    return _wrap(w, x * envelope)


def jitter(w, cfg: AugmentationConfig, rng: np.random.Generator):
    x = _values(w)
    return _wrap(w, x + rng.normal(0.0, cfg.jitter_sigma, size=x.shape))


TRANSFORMS: dict[str, Callable] = {
    "rotate": rotate,
    "permute": permute,
    "scale": scale,
    "time_warp": time_warp,
    "magnitude_warp": magnitude_warp,
    "jitter": jitter,
}


def augment_array(x: np.ndarray, cfg: AugmentationConfig, rng: np.random.Generator) -> np.ndarray:
    """Apply one transform chosen uniformly from the active ones."""
    names = cfg.active()
    if not names:
        return x.copy()
    name = names[rng.integers(len(names))]
    return TRANSFORMS[name](x, cfg, rng)


def make_view_arrays(X: np.ndarray, cfg: AugmentationConfig, rng: np.random.Generator, views_per_sample: int = 1):
    """Array form of :func:`make_views`.

    Returns ``(X_all, origin)`` with the n originals first followed by
    ``n * views_per_sample`` views; ``origin[j]`` is the row of the original
    that row ``j`` came from.
    """
    if views_per_sample < 1:
        raise ConfigError("views_per_sample must be >= 1")
    n = X.shape[0]
    if n:
        cfg.check_window(X.shape[1], X.shape[2])
    views = []
    origin = list(range(n))
    for _ in range(views_per_sample):
        for i in range(n):
            views.append(augment_array(X[i], cfg, rng))
            origin.append(i)
    if views:
        X_all = np.concatenate([X, np.stack(views)], axis=0)
    else:
        X_all = X.copy()
    return X_all, np.asarray(origin, dtype=np.int64)


def make_views(
    batch: Sequence[LabeledSample],
    cfg: AugmentationConfig,
    rng: np.random.Generator,
    views_per_sample: int = 1,
) -> list[LabeledSample]:
    """Originals followed by augmented copies that keep label, domain and subject."""
    batch = list(batch)
    if not batch:
        return []
    X = np.stack([s.window.values for s in batch])
    X_all, origin = make_view_arrays(X, cfg, rng, views_per_sample)
    out = [replace(s, is_augmented=False, origin_index=None) for s in batch]
    for j in range(len(batch), len(X_all)):
        src = batch[origin[j]]
        out.append(
            replace(
                src,
                window=src.window.replace_values(X_all[j]),
                is_augmented=True,
                origin_index=int(origin[j]),
            )
        )
    return out
