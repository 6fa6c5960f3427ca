"""Dataset I/O, subject grouping, leave-one-domain-out splits and subsampling.

On-disk format: a directory with ``manifest.json`` and one header-free CSV per
window, named ``{subject}_{index}_{label}.csv``, holding L rows of M
comma-separated decimal reals.

manifest.json keys::

    name                  str
    sample_rate_hz        float
    L, M, C               int
    channel_names         [str] * M
    triad_channel_groups  [[int, int, int], ...]
    activity_names        [str] * C
    subjects              [{"subject_id": str, "files": [str, ...]}, ...]
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import DomainDataset, LabeledSample, ShapeSpec, TimeSeriesWindow, validate_dataset
from .errors import ConfigError, DataError

STANDARD_FRACTIONS = (0.2, 0.4, 0.6, 0.8, 1.0)


@dataclass
class DatasetManifest:
    name: str
    sample_rate_hz: float
    L: int
    M: int
    C: int
    channel_names: list[str] = field(default_factory=list)
    triad_channel_groups: list[list[int]] = field(default_factory=list)
    subjects: list[dict] = field(default_factory=list)
    activity_names: list[str] = field(default_factory=list)

    @property
    def shape(self) -> ShapeSpec:
        return ShapeSpec(self.L, self.M, self.C)

    @property
    def subject_ids(self) -> list[str]:
        return [s["subject_id"] for s in self.subjects]

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict, path=None) -> "DatasetManifest":
        required = ("name", "sample_rate_hz", "L", "M", "C", "subjects")
        missing = [k for k in required if k not in d]
        if missing:
            raise DataError(f"manifest missing keys {missing}", path)
        m = cls(
            name=str(d["name"]),
            sample_rate_hz=float(d["sample_rate_hz"]),
            L=int(d["L"]),
            M=int(d["M"]),
            C=int(d["C"]),
            channel_names=list(d.get("channel_names", [])),
            triad_channel_groups=[list(map(int, t)) for t in d.get("triad_channel_groups", [])],
            subjects=[{"subject_id": str(s["subject_id"]), "files": list(s.get("files", []))} for s in d["subjects"]],
            activity_names=list(d.get("activity_names", [])),
        )
        m.check(path)
        return m

    def check(self, path=None) -> None:
        if self.channel_names and len(self.channel_names) != self.M:
            raise DataError(f"{len(self.channel_names)} channel names for M={self.M}", path)
        if self.activity_names and len(self.activity_names) != self.C:
            raise DataError(f"{len(self.activity_names)} activity names for C={self.C}", path)
        seen: set[int] = set()
        for t in self.triad_channel_groups:
            if len(t) != 3 or any(not 0 <= i < self.M for i in t) or seen.intersection(t):
                raise DataError(f"invalid triad {t}", path)
            seen.update(t)
        ids = self.subject_ids
        if len(set(ids)) != len(ids):
            raise DataError("duplicate subject ids", path)


def parse_sample_name(name: str) -> tuple[str, int, int]:
    stem = name[:-4] if name.endswith(".csv") else name
    parts = stem.rsplit("_", 2)
    if len(parts) != 3:
        raise DataError("file name must be {subject}_{index}_{label}.csv", name)
    try:
        return parts[0], int(parts[1]), int(parts[2])
    except ValueError:
        raise DataError("index and label in file name must be integers", name) from None


def read_window_csv(path, L: int, M: int) -> np.ndarray:
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != M:
                raise DataError(f"expected {M} columns, found {len(row)}", path, lineno)
            try:
                rows.append([float(c) for c in row])
            except ValueError:
                raise DataError("non-numeric value", path, lineno) from None
    if len(rows) != L:
        raise DataError(f"expected {L} rows, found {len(rows)}", path)
    return np.asarray(rows, dtype=np.float64)


def load_dataset(directory) -> tuple[DatasetManifest, dict[str, DomainDataset]]:
    """Read a canonical dataset directory into one DomainDataset per subject."""
    directory = Path(directory)
    mpath = directory / "manifest.json"
    if not mpath.is_file():
        raise DataError("manifest.json not found", directory)
    try:
        manifest = DatasetManifest.from_dict(json.loads(mpath.read_text(encoding="utf-8")), mpath)
    except json.JSONDecodeError as e:
        raise DataError(f"invalid JSON: {e.msg}", mpath, e.lineno) from None

    listed = set()
    out: dict[str, DomainDataset] = {}
    for subj in manifest.subjects:
        sid = subj["subject_id"]
        samples = []
        for fname in subj["files"]:
            fpath = directory / fname
            if not fpath.is_file():
                raise DataError("file listed in manifest is missing", fpath)
            fsubj, _, label = parse_sample_name(fname)
            if fsubj != sid:
                raise DataError(f"file subject {fsubj!r} does not match manifest subject {sid!r}", fpath)
            if not 0 <= label < manifest.C:
                raise DataError(f"label {label} outside [0, {manifest.C})", fpath)
            values = read_window_csv(fpath, manifest.L, manifest.M)
            samples.append(LabeledSample(TimeSeriesWindow(values, manifest.sample_rate_hz), label, sid, sid))
            listed.add(fname)
        ds = DomainDataset(sid, tuple(samples))
        bad = validate_dataset(ds, manifest.shape)
        if bad:
            v = bad[0]
            raise DataError(f"subject {sid!r} sample {v.index}: {v.rule} ({v.detail})", directory)
        out[sid] = ds
    stray = sorted(p.name for p in directory.glob("*.csv") if p.name not in listed)
    if stray:
        raise DataError(f"CSV files not listed in manifest: {stray[:5]}", directory)
    return manifest, out


def write_dataset(directory, manifest: DatasetManifest, datasets: dict[str, DomainDataset]) -> DatasetManifest:
    """Write windows in the canonical layout; returns the manifest with file lists filled in."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    subjects = []
    for sid, ds in datasets.items():
        files = []
        for i, s in enumerate(ds.samples):
            fname = f"{sid}_{i}_{s.label}.csv"
            np.savetxt(directory / fname, s.window.values, delimiter=",", fmt="%.17g")
            files.append(fname)
        subjects.append({"subject_id": str(sid), "files": files})
    manifest = DatasetManifest(**{**asdict(manifest), "subjects": subjects})
    (directory / "manifest.json").write_text(manifest.to_json(), encoding="utf-8")
    return manifest


# ------------------------------------------------------------------ grouping

@dataclass(frozen=True)
class GroupingPlan:
    groups: tuple[tuple[str, ...], ...]

    def __post_init__(self):
        object.__setattr__(self, "groups", tuple(tuple(g) for g in self.groups))

    def __len__(self):
        return len(self.groups)


def build_groups(subject_ids: Sequence[str], sizes: Sequence[int], rng: np.random.Generator) -> GroupingPlan:
    """Randomly partition subjects into groups of the given sizes."""
    subject_ids = list(subject_ids)
    sizes = [int(s) for s in sizes]
    if any(s < 1 for s in sizes):
        raise ConfigError(f"group sizes must be positive, got {sizes}")
    if sum(sizes) != len(subject_ids):
        raise ConfigError(f"group sizes {sizes} sum to {sum(sizes)}, but there are {len(subject_ids)} subjects")
    order = rng.permutation(len(subject_ids))
    groups, start = [], 0
    for s in sizes:
        groups.append(tuple(subject_ids[i] for i in order[start:start + s]))
        start += s
    return GroupingPlan(tuple(groups))


@dataclass(frozen=True)
class LodoSplit:
    target_index: int
    target: tuple[str, ...]
    sources: tuple[tuple[str, ...], ...]


def group_name(index: int) -> str:
    return f"G{index}"


def lodo_splits(plan: GroupingPlan) -> list[LodoSplit]:
    if len(plan.groups) < 2:
        raise ConfigError("leave-one-domain-out needs at least 2 groups")
    out = []
    for t, target in enumerate(plan.groups):
        sources = tuple(g for i, g in enumerate(plan.groups) if i != t)
        out.append(LodoSplit(t, target, sources))
    return out


def merge_subjects(datasets: dict[str, DomainDataset], subjects: Sequence[str], domain) -> DomainDataset:
    samples = []
    for sid in subjects:
        for s in datasets[sid].samples:
            samples.append(LabeledSample(s.window, s.label, domain, s.subject))
    return DomainDataset(domain, tuple(samples))


def split_domains(datasets: dict[str, DomainDataset], plan: GroupingPlan, target_index: int):
    """Materialise (sources, target) DomainDatasets; each group becomes one domain named ``G{k}``."""
    split = lodo_splits(plan)[target_index]
    target = merge_subjects(datasets, split.target, group_name(target_index))
    sources = [
        merge_subjects(datasets, g, group_name(k))
        for k, g in enumerate(plan.groups)
        if k != target_index
    ]
    return sources, target


# ------------------------------------------------------------------ subsampling

def subsample(sources: Sequence[DomainDataset], fraction: float, rng: np.random.Generator) -> list[DomainDataset]:
    """Keep ``round(fraction * n)`` samples per (domain, class), at least one.

    The random draws do not depend on ``fraction``: each class is shuffled once
    and a prefix is kept, so under the same seed smaller fractions always give
    subsets of larger ones.
    """
    if not 0 < fraction <= 1:
        raise ConfigError(f"fraction must lie in (0, 1], got {fraction}")
    if not any(math.isclose(fraction, f) for f in STANDARD_FRACTIONS):
        warnings.warn(f"non-standard training fraction {fraction}", stacklevel=2)
    out = []
    for d in sources:
        labels = np.array([s.label for s in d.samples], dtype=np.int64)
        keep = []
        for c in np.unique(labels):
            idx = np.flatnonzero(labels == c)
            perm = idx[rng.permutation(len(idx))]
            k = max(1, int(math.floor(fraction * len(idx) + 0.5)))
            keep.extend(perm[:k].tolist())
        keep.sort()
        out.append(DomainDataset(d.domain, tuple(d.samples[i] for i in keep)))
    return out


# ------------------------------------------------------------------ synthetic data

@dataclass(frozen=True)
class SynthSpec:
    n_domains: int = 4
    n_classes: int = 5
    samples_per_class: int = 20
    L: int = 64
    M: int = 6
    shift_strength: float = 1.0
    noise: float = 0.3
    sample_rate_hz: float = 50.0

    def __post_init__(self):
        if self.M % 3:
            raise ConfigError("synthetic data needs M divisible by 3")
        if self.n_domains < 1 or self.n_classes < 2 or self.samples_per_class < 1:
            raise ConfigError("invalid synthetic data sizes")


def _random_rotation(rng, max_angle):
    from .augment import random_rotation

    return random_rotation(rng, max_angle)


def synth_domains(spec: SynthSpec, rng: np.random.Generator) -> list[DomainDataset]:
    """Sinusoidal class prototypes seen through domain-specific sensor distortions.

    Every class has its own pair of frequencies and per-channel phases. A
    domain rotates each channel triad by a random rotation whose maximum angle
    is ``shift_strength * pi / 2`` and rescales each channel by
    ``exp(shift_strength * 0.4 * N(0, 1))``. Samples add a random time shift,
    amplitude jitter and white noise. With ``shift_strength = 0`` all domains
    share one distribution.
    """
    L, M, C = spec.L, spec.M, spec.n_classes
    t = np.arange(L) / L
    freqs = np.stack([rng.permutation(np.arange(1, 2 * C + 1))[:2] for _ in range(C)]).astype(float)
    phases = rng.uniform(0, 2 * np.pi, size=(C, M, 2))
    amps = rng.uniform(0.5, 1.5, size=(C, M, 2))

    out = []
    triads = [tuple(range(i, i + 3)) for i in range(0, M, 3)]
    for d in range(spec.n_domains):
        rots = [_random_rotation(rng, spec.shift_strength * np.pi / 2) for _ in triads]
        gains = np.exp(spec.shift_strength * 0.4 * rng.normal(size=M))
        domain = f"s{d}"
        samples = []
        for c in range(C):
            for _ in range(spec.samples_per_class):
                shift = rng.uniform(0, 1)
                a = amps[c] * rng.uniform(0.8, 1.2, size=(M, 1))
                arg = 2 * np.pi * freqs[c][None, :, None] * (t[None, None, :] + shift) + phases[c][:, :, None]
                x = (a[:, :, None] * np.sin(arg)).sum(1).T  # (L, M)
                x = x + spec.noise * rng.normal(size=(L, M))
                for tri, R in zip(triads, rots):
                    x[:, list(tri)] = x[:, list(tri)] @ R
                x = x * gains
                samples.append(LabeledSample(TimeSeriesWindow(x, spec.sample_rate_hz), c, domain, domain))
        out.append(DomainDataset(domain, tuple(samples)))
    return out


def synth_manifest(spec: SynthSpec) -> DatasetManifest:
    return DatasetManifest(
        name="synthetic",
        sample_rate_hz=spec.sample_rate_hz,
        L=spec.L,
        M=spec.M,
        C=spec.n_classes,
        channel_names=[f"ch{i}" for i in range(spec.M)],
        triad_channel_groups=[[i, i + 1, i + 2] for i in range(0, spec.M, 3)],
        subjects=[{"subject_id": f"s{d}", "files": []} for d in range(spec.n_domains)],
        activity_names=[f"class{c}" for c in range(spec.n_classes)],
    )
