"""Leave-one-domain-out experiments: configuration, runs, sweeps and reports.

A run trains one method (``taco`` or ``erm``) on the source groups of one
LODO split for every seed in ``seeds`` and scores the held-out group.
Output layout under ``output_dir``::

    <run name>/record.json
    <run name>/seed<k>/history.jsonl
    <run name>/seed<k>/model.ckpt
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import time
import typing
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .augment import AugmentationConfig
from .checkpoint import save_checkpoint
from .data import DomainDataset
from .encoder import EncoderConfig
from .errors import ConfigError, MetaHarError
from .heads import HeadsConfig
from .ingest import (
    STANDARD_FRACTIONS,
    DatasetManifest,
    SynthSpec,
    build_groups,
    load_dataset,
    split_domains,
    subsample,
    synth_domains,
    synth_manifest,
)
from .meta import MetaConfig, train, train_erm
from .model import Model

log = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "METAHAR_OUTPUT_ROOT"
METHODS = ("taco", "erm")
SECTIONS = {
    "synth": SynthSpec,
    "augment": AugmentationConfig,
    "encoder": EncoderConfig,
    "heads": HeadsConfig,
    "meta": MetaConfig,
}


@dataclass(frozen=True)
class RunConfig:
    dataset: str | None = None  # canonical dataset directory; None -> synthetic data
    data_seed: int = 0  # synthetic generation and subject grouping
    group_sizes: tuple[int, ...] | None = None  # None -> one group per subject
    target: int = 0
    fraction: float = 1.0
    method: str = "taco"
    seeds: tuple[int, ...] = (1, 2, 3)
    dtype: str = "float32"
    output_dir: str = "runs"
    synth: SynthSpec = field(default_factory=SynthSpec)
    augment: AugmentationConfig = field(default_factory=AugmentationConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    heads: HeadsConfig = field(default_factory=HeadsConfig)
    meta: MetaConfig = field(default_factory=MetaConfig)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if not 0 < self.fraction <= 1:
            raise ConfigError(f"fraction must lie in (0, 1], got {self.fraction}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        if self.dataset is not None and not Path(self.dataset).is_dir():
            raise ConfigError(f"dataset directory {self.dataset!r} does not exist")
        if self.target < 0:
            raise ConfigError("target index must be >= 0")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @property
    def torch_dtype(self):
        return torch.float64 if self.dtype == "float64" else torch.float32


def synthetic_preset(**overrides) -> RunConfig:
    """A small model and training budget sized for the synthetic benchmark on a laptop CPU."""
    base = RunConfig(
        encoder=EncoderConfig(seq_len=64, patch_len=16, stride=8, n_channels=6, n_layers=1, n_heads=2, d_model=16,
                              dropout=0.1, conv_kernel=8, conv_out_channels=32),
        heads=HeadsConfig(n_classes=5, proj_width=64, cls_widths=(64, 64)),
        meta=MetaConfig(outer_lr=3e-3, max_epochs=30, patience=0),
    )
    return apply_overrides(base, overrides)


# ------------------------------------------------------------------ config parsing

def _coerce(value, tp, key):
    """Convert a string / JSON value to the annotated field type."""
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union or (origin is not None and type(None) in args):
        if value is None or (isinstance(value, str) and value.strip().lower() in ("", "none", "null")):
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], key)
    if isinstance(value, str) and origin in (tuple, list):
        s = value.strip()
        if s.startswith("["):
            value = json.loads(s)
        else:
            value = [v for v in s.split(",") if v.strip()] if s else []
    try:
        if origin in (tuple, list):
            elem = args[0] if args else str
            return tuple(_coerce(v, elem, key) for v in value)
        if tp is bool:
            if isinstance(value, str):
                v = value.strip().lower()
                if v in ("1", "true", "yes", "on"):
                    return True
                if v in ("0", "false", "no", "off"):
                    return False
                raise ValueError(value)
            return bool(value)
        if tp is int:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if tp is float:
            return float(value)
        if tp is str:
            return str(value).strip() if isinstance(value, str) else str(value)
    except (TypeError, ValueError, json.JSONDecodeError):
        raise ConfigError(f"cannot interpret {value!r} for {key}") from None
    return value


def _hints(cls):
    return typing.get_type_hints(cls)


def known_keys() -> list[str]:
    keys = [f.name for f in dataclasses.fields(RunConfig) if f.name not in SECTIONS]
    for sec, cls in SECTIONS.items():
        keys += [f"{sec}.{f.name}" for f in dataclasses.fields(cls)]
    return keys


def apply_overrides(cfg: RunConfig, overrides: dict) -> RunConfig:
    """Return ``cfg`` with dotted-key overrides (``meta.alpha``, ``seeds`` ...) applied."""
    top, nested = {}, {s: {} for s in SECTIONS}
    run_hints = _hints(RunConfig)
    for key, value in overrides.items():
        if "." in key:
            sec, name = key.split(".", 1)
            if sec not in SECTIONS:
                raise ConfigError(f"unknown config section {sec!r} in {key!r}")
            hints = _hints(SECTIONS[sec])
            if name not in hints:
                raise ConfigError(f"unknown config key {key!r}")
            nested[sec][name] = _coerce(value, hints[name], key)
        elif key in SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"section {key!r} must be a mapping")
            for name, v in value.items():
                nested_key = f"{key}.{name}"
                hints = _hints(SECTIONS[key])
                if name not in hints:
                    raise ConfigError(f"unknown config key {nested_key!r}")
                nested[key][name] = _coerce(v, hints[name], nested_key)
        else:
            if key not in run_hints:
                raise ConfigError(f"unknown config key {key!r}")
            top[key] = _coerce(value, run_hints[key], key)
    for sec, vals in nested.items():
        if vals:
            top[sec] = replace(getattr(cfg, sec), **vals)
    return replace(cfg, **top) if top else cfg


def parse_config_text(text: str, path=None) -> dict:
    """Parse a flat ``key = value`` file (``#`` comments allowed) into a dict of strings."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path or '<config>'}:{lineno}: expected key = value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def load_config_file(path) -> dict:
    """Read overrides from a JSON document (nested sections allowed) or a flat key=value file."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {str(path)!r} not found")
    text = path.read_text(encoding="utf-8")
    if path.suffix.lower() == ".json":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}:{e.lineno}: invalid JSON ({e.msg})") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return data
    return parse_config_text(text, path)


def resolve_output_dir(cfg: RunConfig, explicit: str | None = None) -> RunConfig:
    """Apply the output-root environment variable unless an explicit directory was given."""
    if explicit is not None:
        return replace(cfg, output_dir=explicit)
    env = os.environ.get(OUTPUT_ROOT_ENV)
    return replace(cfg, output_dir=env) if env else cfg


def config_digest(cfg: RunConfig) -> str:
    """SHA-256 of the canonical JSON of every field except ``output_dir``."""
    d = cfg.to_dict()
    d.pop("output_dir")
    blob = json.dumps(d, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


# ------------------------------------------------------------------ data

def load_data(cfg: RunConfig) -> tuple[DatasetManifest, dict[str, DomainDataset]]:
    if cfg.dataset is None:
        doms = synth_domains(cfg.synth, np.random.default_rng(cfg.data_seed))
        return synth_manifest(cfg.synth), {d.domain: d for d in doms}
    return load_dataset(cfg.dataset)


def fit_to_data(cfg: RunConfig, manifest: DatasetManifest) -> RunConfig:
    """Fill in window length, channel count, class count and triads from the data."""
    enc = replace(cfg.encoder, seq_len=manifest.L, n_channels=manifest.M)
    heads = replace(cfg.heads, n_classes=manifest.C)
    aug = cfg.augment
    if not aug.triad_channel_groups and manifest.triad_channel_groups:
        aug = replace(aug, triad_channel_groups=tuple(tuple(t) for t in manifest.triad_channel_groups))
    aug.check_triads(manifest.M)
    return replace(cfg, encoder=enc, heads=heads, augment=aug)


def grouping(cfg: RunConfig, subject_ids):
    if cfg.group_sizes is None:
        from .ingest import GroupingPlan

        return GroupingPlan(tuple((s,) for s in subject_ids))
    return build_groups(subject_ids, cfg.group_sizes, np.random.default_rng(cfg.data_seed))


# ------------------------------------------------------------------ runs

@dataclass
class ExperimentRecord:
    config_digest: str
    dataset: str
    method: str
    target: int
    fraction: float
    seeds: list[int]
    accuracies: list[float | None]
    mean: float | None
    std: float | None
    partial: bool
    failures: dict[str, str]
    histories: list[str | None]
    checkpoints: list[str | None]
    wallclock_s: float
    config: dict = field(default_factory=dict)
    path: str | None = None

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentRecord":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def mean_std(values) -> tuple[float | None, float | None]:
    """Mean and sample standard deviation (n - 1 in the denominator; 0 for one value)."""
    vals = [float(v) for v in values if v is not None]
    if not vals:
        return None, None
    mean = float(np.mean(vals))
    std = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
    return mean, std


def run_name(cfg: RunConfig, dataset_name: str, digest: str) -> str:
    return f"{dataset_name}-{cfg.method}-t{cfg.target}-f{cfg.fraction:g}-{digest[:12]}"


def run_experiment(cfg: RunConfig, data=None) -> ExperimentRecord:
    """Train and evaluate ``cfg.method`` on one LODO split for every seed.

    ``data`` may carry a preloaded ``(manifest, datasets)`` pair. Errors while
    preparing the split (bad target index, group sizes) raise; errors inside a
    seed's training are recorded and mark the record partial.
    """
    manifest, datasets = data if data is not None else load_data(cfg)
    cfg = fit_to_data(cfg, manifest)
    plan = grouping(cfg, manifest.subject_ids)
    if len(plan) < 2:
        raise ConfigError("need at least 2 subject groups for leave-one-domain-out")
    if cfg.target >= len(plan):
        raise ConfigError(f"target index {cfg.target} out of range for {len(plan)} groups")
    digest = config_digest(cfg)
    out_dir = Path(cfg.output_dir) / run_name(cfg, manifest.name, digest)
    out_dir.mkdir(parents=True, exist_ok=True)

    sources_all, target = split_domains(datasets, plan, cfg.target)
    Xt, yt = target.arrays()
    model = Model(cfg.encoder, cfg.heads)
    accs, hists, ckpts, failures = [], [], [], {}
    t0 = time.perf_counter()
    for i, seed in enumerate(cfg.seeds):
        seed_dir = out_dir / f"seed{seed}" if list(cfg.seeds).count(seed) == 1 else out_dir / f"seed{seed}_{i}"
        seed_dir.mkdir(exist_ok=True)
        hist = seed_dir / "history.jsonl"
        hist.unlink(missing_ok=True)
        try:
            sources = subsample(sources_all, cfg.fraction, np.random.default_rng(seed)) \
                if cfg.fraction < 1 else list(sources_all)
            meta_cfg = replace(cfg.meta, seed=seed)
            common = dict(dtype=cfg.torch_dtype, shape=manifest.shape, history_path=hist)
            if cfg.method == "taco":
                res = train(sources, meta_cfg, cfg.augment, cfg.encoder, cfg.heads, checkpoint_dir=seed_dir,
                            config_digest=digest, **common)
            else:
                res = train_erm(sources, meta_cfg, cfg.augment, cfg.encoder, cfg.heads, **common)
            acc = model.evaluate(res.params, Xt, yt, res.buffers)
            ckpt = save_checkpoint(seed_dir / "model.ckpt", res.params, res.buffers, cfg.encoder, digest,
                                   {"seed": seed, "method": cfg.method, "target_accuracy": acc})
            accs.append(acc)
            hists.append(str(hist))
            ckpts.append(str(ckpt))
            log.info("%s seed %d: target accuracy %.4f", cfg.method, seed, acc)
        except MetaHarError as e:
            log.error("%s seed %d failed: %s", cfg.method, seed, e)
            failures[str(seed)] = f"{type(e).__name__}: {e}"
            accs.append(None)
            hists.append(str(hist) if hist.exists() else None)
            ckpts.append(None)
    mean, std = mean_std(accs)
    record = ExperimentRecord(
        config_digest=digest,
        dataset=manifest.name,
        method=cfg.method,
        target=cfg.target,
        fraction=cfg.fraction,
        seeds=list(cfg.seeds),
        accuracies=accs,
        mean=mean,
        std=std,
        partial=bool(failures),
        failures=failures,
        histories=hists,
        checkpoints=ckpts,
        wallclock_s=time.perf_counter() - t0,
        config=cfg.to_dict(),
        path=str(out_dir / "record.json"),
    )
    (out_dir / "record.json").write_text(record.to_json(), encoding="utf-8")
    return record


# ------------------------------------------------------------------ sweeps and reports

def _fmt(value, partial=False):
    if value is None:
        return "nan"
    return f"{value:.4f}" + ("*" if partial else "")


def _write_table(path, rows, methods):
    """rows: {fraction: {method: (value, partial)}} -> CSV with one row per fraction."""
    lines = ["fraction," + ",".join(methods)]
    for frac in sorted(rows):
        cells = [_fmt(*rows[frac].get(m, (None, False))) for m in methods]
        lines.append(f"{frac:g}," + ",".join(cells))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _plot(path, rows, methods, title):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    fracs = sorted(rows)
    for m in methods:
        ys = [rows[f].get(m, (None, False))[0] for f in fracs]
        ax.plot(fracs, [np.nan if y is None else 100 * y for y in ys], marker="o", label=m)
    ax.set_xlabel("fraction of source data")
    ax.set_ylabel("target accuracy (%)")
    ax.set_title(title)
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def sweep(cfg: RunConfig, fractions=STANDARD_FRACTIONS, targets=None, methods=METHODS, plot=True) -> dict:
    """Run every (fraction, target, method) combination and tabulate mean target accuracy."""
    manifest, datasets = load_data(cfg)
    plan = grouping(fit_to_data(cfg, manifest), manifest.subject_ids)
    targets = list(range(len(plan))) if targets is None else list(targets)
    runs = []
    for method in methods:
        for frac in fractions:
            for t in targets:
                rc = replace(cfg, method=method, fraction=float(frac), target=int(t))
                rec = run_experiment(rc, data=(manifest, datasets))
                runs.append(rec)
    rows: dict[float, dict[str, tuple]] = {}
    cells = []
    for method in methods:
        for frac in fractions:
            recs = [r for r in runs if r.method == method and r.fraction == float(frac)]
            per_target = [r.mean for r in recs]
            value = None if any(v is None for v in per_target) else float(np.mean(per_target))
            partial = any(r.partial for r in recs)
            rows.setdefault(float(frac), {})[method] = (value, partial)
            cells.append({"method": method, "fraction": float(frac), "mean_accuracy": value, "partial": partial,
                          "per_target": {str(r.target): r.mean for r in recs},
                          "records": [r.path for r in recs]})
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    report = {"dataset": manifest.name, "methods": list(methods), "fractions": [float(f) for f in fractions],
              "targets": targets, "cells": cells, "csv": str(out / "sweep.csv")}
    _write_table(out / "sweep.csv", rows, list(methods))
    if plot:
        _plot(out / "sweep.png", rows, list(methods), f"{manifest.name}: accuracy vs. training fraction")
        report["plot"] = str(out / "sweep.png")
    (out / "sweep.json").write_text(json.dumps(report, indent=2), encoding="utf-8")
    return report


def load_records(directory) -> list[ExperimentRecord]:
    records = []
    for p in sorted(Path(directory).rglob("record.json")):
        try:
            rec = ExperimentRecord.from_dict(json.loads(p.read_text(encoding="utf-8")))
        except (OSError, ValueError, TypeError) as e:
            log.warning("skipping unreadable record %s: %s", p, e)
            continue
        rec.path = str(p)
        records.append(rec)
    return records


def report(directory, out_dir=None, plot=True) -> dict:
    """Aggregate every record under ``directory`` by (dataset, method, fraction, target).

    Per-seed accuracies of matching records are pooled before taking the
    mean and sample standard deviation. Writes ``results.csv``,
    ``results.json`` and, when there is something to draw,
    ``accuracy_vs_fraction.png``.
    """
    records = load_records(directory)
    out = Path(out_dir or directory)
    groups: dict[tuple, list[float]] = {}
    for r in records:
        key = (r.dataset, r.method, float(r.fraction), int(r.target))
        groups.setdefault(key, []).extend(a for a in r.accuracies if a is not None)
    rows = []
    for (ds, method, frac, target), accs in sorted(groups.items()):
        mean, std = mean_std(accs)
        rows.append({"dataset": ds, "method": method, "fraction": frac, "target": target, "n": len(accs),
                     "mean": mean, "std": std})
    result = {"n_records": len(records), "rows": rows}
    if not records:
        return result
    out.mkdir(parents=True, exist_ok=True)
    lines = ["dataset,method,fraction,target,n,mean,std"]
    for r in rows:
        lines.append(f"{r['dataset']},{r['method']},{r['fraction']:g},{r['target']},{r['n']},"
                     f"{_fmt(r['mean'])},{_fmt(r['std'])}")
    (out / "results.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    (out / "results.json").write_text(json.dumps(result, indent=2), encoding="utf-8")
    result["csv"] = str(out / "results.csv")
    if plot:
        table: dict[float, dict[str, tuple]] = {}
        methods = sorted({r["method"] for r in rows})
        for frac in sorted({r["fraction"] for r in rows}):
            for m in methods:
                vals = [r["mean"] for r in rows if r["fraction"] == frac and r["method"] == m and r["mean"] is not None]
                if vals:
                    table.setdefault(frac, {})[m] = (float(np.mean(vals)), False)
        if table:
            _plot(out / "accuracy_vs_fraction.png", table, methods, "accuracy vs. training fraction")
            result["plot"] = str(out / "accuracy_vs_fraction.png")
    return result


def format_report(result: dict) -> str:
    rows = result["rows"]
    if not rows:
        return "no records found"
    header = f"{'dataset':<12} {'method':<6} {'frac':>5} {'target':>6} {'n':>3} {'mean':>8} {'std':>8}"
    lines = [header, "-" * len(header)]
    for r in rows:
        mean = "nan" if r["mean"] is None else f"{100 * r['mean']:.2f}"
        std = "nan" if r["std"] is None else f"{100 * r['std']:.2f}"
        lines.append(f"{r['dataset']:<12} {r['method']:<6} {r['fraction']:>5g} {r['target']:>6} {r['n']:>3} "
                     f"{mean:>8} {std:>8}")
    return "\n".join(lines)
