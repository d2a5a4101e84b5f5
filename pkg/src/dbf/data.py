"""Synthetic aligned text/visual/audio datasets and their JSON-lines format.

A latent score ``u ~ U[-3, 3]`` is the label. It is split into three
per-modality shares ``c_m = w_m * u + e_m`` whose noise terms sum to zero, so
all three modalities together determine ``u`` exactly while any subset leaves
part of it unknown. Each share is written into its modality's leading
feature dimensions on top of a smooth random background. Visual signal lives
only in a few key frames; the visual stream can further be corrupted with
near-duplicate frames (which may overwrite key frames), distractor
dimensions and a circular time shift.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterator

import numpy as np

from dbf.errors import ConfigError, SchemaError

MODALITIES = ("t", "v", "a")
FORMAT_NAME = "dbf-dataset"
FORMAT_VERSION = 1
DUPLICATE_COSINE_FLOOR = 0.95


@dataclass
class MultimodalSample:
    id: str
    x_t: np.ndarray
    x_v: np.ndarray
    x_a: np.ndarray
    label: float

    def features(self, m: str) -> np.ndarray:
        return getattr(self, f"x_{m}")


@dataclass
class Dataset:
    lengths: dict[str, int]
    dims: dict[str, int]
    samples: list[MultimodalSample] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, i) -> MultimodalSample:
        return self.samples[i]

    def subset(self, indices) -> Dataset:
        return Dataset(dict(self.lengths), dict(self.dims), [self.samples[i] for i in indices])

    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.float64)

    def batch(self, indices) -> tuple[dict[str, np.ndarray], np.ndarray]:
        inputs = {m: np.stack([self.samples[i].features(m) for i in indices]) for m in MODALITIES}
        labels = np.array([self.samples[i].label for i in indices], dtype=np.float64)
        return inputs, labels

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        if (self.lengths, self.dims, len(self)) != (other.lengths, other.dims, len(other)):
            return False
        for a, b in zip(self.samples, other.samples):
            if a.id != b.id or a.label != b.label:
                return False
            if any(not np.array_equal(a.features(m), b.features(m)) for m in MODALITIES):
                return False
        return True


@dataclass
class GenSpec:
    n_samples: int = 256
    lengths: dict[str, int] = field(default_factory=lambda: {"t": 20, "v": 16, "a": 16})
    dims: dict[str, int] = field(default_factory=lambda: {"t": 32, "v": 47, "a": 74})
    redundancy: float = 0.0
    frame_noise_dims: int = 0
    misalignment_shift: int = 0
    weights: dict[str, float] = field(default_factory=lambda: {"t": 0.4, "v": 0.4, "a": 0.2})
    seed: int = 0
    complement_noise: float = 0.5
    background: float = 0.1
    key_frames: int = 2
    key_gain: float = 4.0
    distractor_scale: float = 1.0
    duplicate_jitter: float = 0.05

    @classmethod
    def from_dict(cls, raw: dict) -> GenSpec:
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"unknown data keys: {unknown}")
        spec = cls(**raw)
        spec.validate()
        return spec

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def validate(self) -> None:
        for name in ("lengths", "dims", "weights"):
            if set(getattr(self, name)) != set(MODALITIES):
                raise ConfigError(f"{name} must give exactly the modalities {MODALITIES}")
        if any(v < 1 for v in self.lengths.values()) or any(v < 1 for v in self.dims.values()):
            raise ConfigError("lengths and dims must be positive")
        if any(w < 0 for w in self.weights.values()):
            raise ConfigError("signal weights must be nonnegative")
        if abs(sum(self.weights.values()) - 1.0) > 1e-9:
            raise ConfigError("signal weights must sum to 1")
        if not 0.0 <= self.redundancy < 1.0:
            raise ConfigError("redundancy must lie in [0, 1)")
        if not 0 <= self.frame_noise_dims < self.dims["v"]:
            raise ConfigError(
                f"frame_noise_dims={self.frame_noise_dims} must be < visual dim {self.dims['v']}"
            )
        if not 1 <= self.key_frames <= self.lengths["v"]:
            raise ConfigError("key_frames must lie in [1, visual length]")
        if self.n_samples < 0:
            raise ConfigError("n_samples must be >= 0")


def _smooth_noise(rng: np.random.Generator, length: int, dim: int, scale: float,
                  coef: float = 0.8) -> np.ndarray:
    """Stationary AR(1) sequence along time with marginal std ``scale``."""
    out = np.empty((length, dim))
    out[0] = rng.standard_normal(dim)
    innov = math.sqrt(1.0 - coef * coef)
    for j in range(1, length):
        out[j] = coef * out[j - 1] + innov * rng.standard_normal(dim)
    return scale * out


def _directions(spec: GenSpec) -> dict[str, np.ndarray]:
    rng = np.random.default_rng([spec.seed, 0x5157])
    dirs = {}
    for m in MODALITIES:
        k = spec.dims[m] - (spec.frame_noise_dims if m == "v" else 0)
        p = rng.standard_normal(k)
        dirs[m] = p * (math.sqrt(k) / np.linalg.norm(p))
    return dirs


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def _sample(spec: GenSpec, index: int, dirs: dict[str, np.ndarray]) -> MultimodalSample:
    rng = np.random.default_rng([spec.seed, index])
    u = rng.uniform(-3.0, 3.0)
    w = np.array([spec.weights[m] for m in MODALITIES])
    y = np.sqrt(w) * rng.standard_normal(3)
    shares = w * u + spec.complement_noise * (y - w * y.sum())

    feats = {}
    for m, c in zip(MODALITIES, shares):
        length, dim = spec.lengths[m], spec.dims[m]
        k = dirs[m].size
        x = np.zeros((length, dim))
        x[:, :k] = _smooth_noise(rng, length, k, spec.background)
        if m == "v":
            keys = rng.choice(length, size=spec.key_frames, replace=False)
            x[keys, :k] += spec.key_gain * c * dirs[m]
            if k < dim:
                x[:, k:] = spec.distractor_scale * rng.standard_normal((length, dim - k))
            n_dup = int(round(spec.redundancy * length))
            if n_dup:
                if n_dup > length - 1:
                    raise ConfigError("redundancy leaves no original frame")
                for j in np.sort(rng.choice(np.arange(1, length), size=n_dup, replace=False)):
                    prev = x[j - 1]
                    jitter = rng.standard_normal(dim) * (
                        spec.duplicate_jitter * np.linalg.norm(prev) / math.sqrt(dim)
                    )
                    while _cosine(prev, prev + jitter) < DUPLICATE_COSINE_FLOOR:
                        jitter *= 0.5
                    x[j] = prev + jitter
            if spec.misalignment_shift:
                x = np.roll(x, spec.misalignment_shift, axis=0)
        else:
            x[:, :k] += c * dirs[m]
        feats[m] = x
    return MultimodalSample(
        id=f"s{spec.seed}-{index:06d}", x_t=feats["t"], x_v=feats["v"], x_a=feats["a"],
        label=float(u),
    )


def generate(spec: GenSpec) -> Dataset:
    """Deterministic under ``spec.seed``; sample ``i`` depends only on ``(seed, i)``."""
    spec.validate()
    dirs = _directions(spec)
    samples = [_sample(spec, i, dirs) for i in range(spec.n_samples)]
    return Dataset(dict(spec.lengths), dict(spec.dims), samples)


def split(dataset: Dataset, fractions=(0.7, 0.15, 0.15)) -> tuple[Dataset, Dataset, Dataset]:
    """Contiguous train/val/test split by sample index."""
    n = len(dataset)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    idx = np.arange(n)
    return (
        dataset.subset(idx[:n_train]),
        dataset.subset(idx[n_train:n_train + n_val]),
        dataset.subset(idx[n_train + n_val:]),
    )


# interchange ---------------------------------------------------------------


def write_jsonl(dataset: Dataset, path) -> None:
    path = Path(path)
    header = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "lengths": dataset.lengths,
        "dims": dataset.dims,
    }
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("w") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for s in dataset.samples:
            record = {"id": s.id, "label": s.label}
            for m in MODALITIES:
                record[f"x_{m}"] = s.features(m).tolist()
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    tmp.replace(path)


def read_jsonl(path) -> Dataset:
    text = Path(path).read_text()
    lines = text.splitlines()
    if not any(line.strip() for line in lines):
        return Dataset({}, {}, [])
    records = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            records.append((lineno, json.loads(line)))
        except json.JSONDecodeError as exc:
            raise SchemaError(f"malformed JSON: {exc.msg}", lineno) from None
    lineno, header = records[0]
    if not isinstance(header, dict) or header.get("format") != FORMAT_NAME:
        raise SchemaError("first record must be a dbf-dataset header", lineno)
    if header.get("version") != FORMAT_VERSION:
        raise SchemaError(f"unsupported dataset version {header.get('version')!r}", lineno)
    try:
        lengths = {m: int(header["lengths"][m]) for m in MODALITIES}
        dims = {m: int(header["dims"][m]) for m in MODALITIES}
    except (KeyError, TypeError, ValueError):
        raise SchemaError("header must declare lengths and dims for t, v, a", lineno) from None

    samples = []
    for lineno, rec in records[1:]:
        try:
            feats = {m: np.asarray(rec[f"x_{m}"], dtype=np.float64) for m in MODALITIES}
            label = float(rec["label"])
            sid = str(rec["id"])
        except (KeyError, TypeError, ValueError):
            raise SchemaError("sample record needs id, label, x_t, x_v, x_a", lineno) from None
        for m in MODALITIES:
            if feats[m].shape != (lengths[m], dims[m]):
                raise SchemaError(
                    f"x_{m} has shape {feats[m].shape}, header declares "
                    f"{(lengths[m], dims[m])}",
                    lineno,
                )
            if not np.isfinite(feats[m]).all():
                raise SchemaError(f"x_{m} contains non-finite values", lineno)
        if not -3.0 <= label <= 3.0:
            raise SchemaError(f"label {label} outside [-3, 3]", lineno)
        samples.append(MultimodalSample(sid, feats["t"], feats["v"], feats["a"], label))
    return Dataset(lengths, dims, samples)


def batch_iter(dataset: Dataset, batch_size: int, shuffle_seed: int | None,
               mimax_on: bool = False) -> Iterator[np.ndarray]:
    """Index arrays of each batch.

    With MI-Max on, a final batch of a single sample is dropped because
    in-batch contrastive negatives need at least two rows.
    """
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    if mimax_on and batch_size < 2:
        raise ConfigError("batch_size must be >= 2 when MI-Max is enabled")
    n = len(dataset)
    order = np.arange(n)
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        if mimax_on and idx.size < 2:
            break
        yield idx
