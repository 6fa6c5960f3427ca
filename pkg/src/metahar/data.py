"""Core value types: sensor windows, labeled samples, domains and parameter sets."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Iterator, Mapping, NamedTuple, Sequence, Union

import numpy as np
import torch

from .errors import ParameterMismatchError, ShapeError

DomainId = Union[str, int]


def _frozen_array(values) -> np.ndarray:
    arr = np.array(values, dtype=np.float64, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class TimeSeriesWindow:
    """One fixed-length multichannel window, ``values`` has shape (L, M)."""

    values: np.ndarray
    sample_rate_hz: float = 1.0

    def __post_init__(self):
        arr = _frozen_array(self.values)
        if arr.ndim != 2:
            raise ShapeError(f"window must be 2-D (L, M), got shape {arr.shape}")
        if not self.sample_rate_hz > 0:
            raise ShapeError(f"sample_rate_hz must be positive, got {self.sample_rate_hz}")
        object.__setattr__(self, "values", arr)

    @property
    def length(self) -> int:
        return self.values.shape[0]

    @property
    def n_channels(self) -> int:
        return self.values.shape[1]

    def replace_values(self, values) -> "TimeSeriesWindow":
        return TimeSeriesWindow(values, self.sample_rate_hz)


@dataclass(frozen=True)
class LabeledSample:
    window: TimeSeriesWindow
    label: int
    domain: DomainId
    subject: str = ""
    is_augmented: bool = False
    # position of the originating non-augmented sample; None means "self"
    origin_index: int | None = None


@dataclass(frozen=True)
class DomainDataset:
    domain: DomainId
    samples: tuple[LabeledSample, ...]

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self) -> Iterator[LabeledSample]:
        return iter(self.samples)

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """Stack into ``X`` of shape (n, L, M) and integer labels ``y``."""
        if not self.samples:
            return np.zeros((0, 0, 0)), np.zeros(0, dtype=np.int64)
        X = np.stack([s.window.values for s in self.samples])
        y = np.array([s.label for s in self.samples], dtype=np.int64)
        return X, y

    @classmethod
    def from_arrays(cls, domain, X, y, subject="", sample_rate_hz=1.0, subjects=None):
        samples = []
        for i, (x, label) in enumerate(zip(X, y)):
            subj = subjects[i] if subjects is not None else subject
            samples.append(LabeledSample(TimeSeriesWindow(x, sample_rate_hz), int(label), domain, subj))
        return cls(domain, tuple(samples))


class ShapeSpec(NamedTuple):
    L: int
    M: int
    C: int


@dataclass(frozen=True)
class Violation:
    index: int | None
    rule: str
    detail: str = ""


def validate_dataset(d: DomainDataset, expected: ShapeSpec) -> list[Violation]:
    """Check every sample in ``d`` against ``expected``; returns violations, never raises."""
    out: list[Violation] = []
    if len(d.samples) == 0:
        out.append(Violation(None, "non-empty", "domain has no samples"))
        return out
    for i, s in enumerate(d.samples):
        vals = s.window.values
        if vals.shape != (expected.L, expected.M):
            out.append(Violation(i, "shape", f"expected {(expected.L, expected.M)}, got {vals.shape}"))
        if not np.all(np.isfinite(vals)):
            bad = np.argwhere(~np.isfinite(vals))[0]
            out.append(Violation(i, "finite", f"non-finite value at {tuple(int(b) for b in bad)}"))
        if not (0 <= s.label < expected.C):
            out.append(Violation(i, "label range", f"label {s.label} outside [0, {expected.C})"))
        if s.domain != d.domain:
            out.append(Violation(i, "domain", f"sample domain {s.domain!r} != {d.domain!r}"))
        if s.is_augmented:
            o = s.origin_index
            if o is None or not (0 <= o < len(d.samples)) or d.samples[o].is_augmented:
                out.append(Violation(i, "origin", f"augmented sample has invalid origin_index {o}"))
    return out


class ParameterSet(Mapping[str, torch.Tensor]):
    """Immutable named map of trainable arrays.

    Arithmetic never mutates; ``step`` returns a new set and stays differentiable
    with respect to the tensors held here.
    """

    __slots__ = ("_data",)

    def __init__(self, tensors: Mapping[str, torch.Tensor] | Iterable[tuple[str, torch.Tensor]]):
        data = dict(tensors)
        for k, v in data.items():
            if not isinstance(v, torch.Tensor):
                data[k] = torch.as_tensor(np.asarray(v, dtype=np.float64))
        self._data = data

    def __getitem__(self, name):
        return self._data[name]

    def __iter__(self):
        return iter(self._data)

    def __len__(self):
        return len(self._data)

    def __repr__(self):
        shapes = ", ".join(f"{k}: {tuple(v.shape)}" for k, v in self._data.items())
        return f"ParameterSet({shapes})"

    @property
    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: tuple(v.shape) for k, v in self._data.items()}

    def numel(self) -> int:
        return sum(v.numel() for v in self._data.values())

    def clone(self) -> "ParameterSet":
        return ParameterSet({k: v.detach().clone() for k, v in self._data.items()})

    def detach(self) -> "ParameterSet":
        return ParameterSet({k: v.detach() for k, v in self._data.items()})

    def to(self, dtype) -> "ParameterSet":
        return ParameterSet({k: v.to(dtype) for k, v in self._data.items()})

    def requires_grad(self) -> "ParameterSet":
        """Fresh leaf copies with gradient tracking enabled."""
        return ParameterSet({k: v.detach().clone().requires_grad_(True) for k, v in self._data.items()})

    def step(self, grads: Mapping[str, torch.Tensor], alpha: float) -> "ParameterSet":
        return param_step(self, grads, alpha)

    def as_dict(self) -> dict[str, torch.Tensor]:
        return dict(self._data)


def param_step(p: ParameterSet, g: Mapping[str, torch.Tensor], alpha: float) -> ParameterSet:
    """Return ``p - alpha * g`` name by name."""
    if not np.isfinite(alpha):
        raise ValueError(f"alpha must be finite, got {alpha}")
    missing = set(p) ^ set(g)
    if missing:
        name = sorted(map(str, missing))[0]
        raise ParameterMismatchError(name, "present in only one of parameters/gradients")
    out = {}
    for name, value in p.items():
        grad = g[name]
        if not isinstance(grad, torch.Tensor):
            grad = torch.as_tensor(np.asarray(grad), dtype=value.dtype)
        if tuple(grad.shape) != tuple(value.shape):
            raise ParameterMismatchError(
                name, f"gradient shape {tuple(grad.shape)} != parameter shape {tuple(value.shape)}"
            )
        out[name] = value - alpha * grad
    return ParameterSet(out)


def stack_samples(samples: Sequence[LabeledSample]) -> tuple[np.ndarray, np.ndarray]:
    X = np.stack([s.window.values for s in samples])
    y = np.array([s.label for s in samples], dtype=np.int64)
    return X, y
