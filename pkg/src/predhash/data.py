"""Feature-sequence files, dataset manifests and the synthetic video generator.

A feature file holds one video as a little-endian binary blob::

    b"FSEQ" | u32 version | u32 n_features | u32 n_clips | f32 clip_rate | u32 class_id
    | n_clips * n_features float32 values, clip-major

A manifest is a tab-separated text file with a header line
``video_id  class  split  path``; relative paths are resolved against the
manifest's directory.  Lines starting with ``#`` are ignored.
"""
from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FSEQ_MAGIC = b"FSEQ"
FSEQ_VERSION = 1
_HEADER = struct.Struct("<4sIIIfI")

DEFAULT_CLIP_RATE = 30.0 / 64.0  # one 64-frame clip per window at 30 fps
SPLITS = ("train", "codebook", "query")


class FeatureFormatError(ValueError):
    pass


@dataclass
class FeatureSequence:
    video_id: int
    label: int
    clips: np.ndarray  # (T, n_features) float32
    clip_rate: float = DEFAULT_CLIP_RATE

    def __post_init__(self):
        self.clips = np.asarray(self.clips, dtype=np.float32)
        if self.clips.ndim != 2 or len(self.clips) < 1:
            raise ValueError("a feature sequence needs at least one clip of shape (n_features,)")

    def __len__(self) -> int:
        return len(self.clips)

    @property
    def n_features(self) -> int:
        return self.clips.shape[1]

    def __eq__(self, other):
        if not isinstance(other, FeatureSequence):
            return NotImplemented
        return (self.video_id == other.video_id and self.label == other.label
                and np.float32(self.clip_rate) == np.float32(other.clip_rate)
                and np.array_equal(self.clips, other.clips))


def write_features(seq: FeatureSequence, path: str | Path) -> None:
    T, nf = seq.clips.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(FSEQ_MAGIC, FSEQ_VERSION, nf, T, seq.clip_rate, seq.label))
        fh.write(np.ascontiguousarray(seq.clips, dtype="<f4").tobytes())


def read_features(path: str | Path, video_id: int | None = None,
                  n_features: int | None = None) -> FeatureSequence:
    """Load a feature file.

    ``video_id`` is not stored in the file; when omitted the numeric part of
    the file stem is used (``v000123.fseq`` -> 123), or 0.  ``n_features``
    optionally asserts the expected clip dimension.
    """
    path = Path(path)
    data = path.read_bytes()
    if len(data) < _HEADER.size:
        raise FeatureFormatError(f"{path}: truncated header")
    magic, version, nf, T, rate, label = _HEADER.unpack_from(data)
    if magic != FSEQ_MAGIC:
        raise FeatureFormatError(f"{path}: bad magic {magic!r}")
    if version != FSEQ_VERSION:
        raise FeatureFormatError(f"{path}: unsupported version {version}")
    if n_features is not None and nf != n_features:
        raise FeatureFormatError(f"{path}: {nf} features per clip, expected {n_features}")
    expected = _HEADER.size + 4 * nf * T
    if len(data) != expected:
        raise FeatureFormatError(f"{path}: {len(data)} bytes, header implies {expected}")
    if T < 1 or nf < 1:
        raise FeatureFormatError(f"{path}: empty sequence")
    clips = np.frombuffer(data, dtype="<f4", offset=_HEADER.size).reshape(T, nf).astype(np.float32)
    if video_id is None:
        digits = "".join(ch for ch in path.stem if ch.isdigit())
        video_id = int(digits) if digits else 0
    return FeatureSequence(video_id, label, clips, float(rate))


# ------------------------------------------------------------------ manifest

@dataclass
class ManifestEntry:
    video_id: int
    label: int
    split: str
    path: str


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    root: Path = field(default_factory=Path)

    def split_entries(self, split: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == split]

    @property
    def classes(self) -> list[int]:
        return sorted({e.label for e in self.entries})

    def resolve(self, entry: ManifestEntry) -> Path:
        p = Path(entry.path)
        return p if p.is_absolute() else self.root / p

    def load(self, split: str | None = None) -> list[FeatureSequence]:
        entries = self.entries if split is None else self.split_entries(split)
        return [read_features(self.resolve(e), video_id=e.video_id) for e in entries]

    def validate(self) -> None:
        ids = [e.video_id for e in self.entries]
        if len(ids) != len(set(ids)):
            raise ValueError("manifest contains duplicate video ids")
        bad = {e.split for e in self.entries} - set(SPLITS) - {""}
        if bad:
            raise ValueError(f"unknown split names {sorted(bad)}")
        cb = {e.label for e in self.split_entries("codebook")}
        missing = {e.label for e in self.split_entries("query")} - cb
        if self.split_entries("codebook") and missing:
            raise ValueError(f"query classes {sorted(missing)} absent from the codebook split")


def write_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["video_id", "class", "split", "path"])
        for e in manifest.entries:
            w.writerow([e.video_id, e.label, e.split, e.path])


def read_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    entries = []
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh, delimiter="\t") if r and not r[0].startswith("#")]
    if not rows or rows[0][:4] != ["video_id", "class", "split", "path"]:
        raise ValueError(f"{path}: missing manifest header")
    for r in rows[1:]:
        if len(r) != 4:
            raise ValueError(f"{path}: malformed manifest line {r}")
        entries.append(ManifestEntry(int(r[0]), int(r[1]), r[2], r[3]))
    return DatasetManifest(entries, path.parent)


# ----------------------------------------------------------------- splitting

def _apportion(n: int, ratios: tuple[float, ...]) -> list[int]:
    """Largest-remainder rounding of ``n * ratios`` to integers summing to ``n``."""
    raw = [n * r for r in ratios]
    counts = [math.floor(x + 1e-9) for x in raw]
    order = sorted(range(len(ratios)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def split(manifest: DatasetManifest, ratios: tuple[float, float, float] = (0.5, 0.45, 0.05),
          seed: int = 0) -> DatasetManifest:
    """Stratified train / codebook / query split.

    Every class is split on its own, so per-class proportions stay within one
    video of ``ratios``.  A class must have at least one video for each split
    with a non-zero ratio.
    """
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ValueError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    rng = np.random.default_rng(seed)
    by_class: dict[int, list[ManifestEntry]] = {}
    for e in sorted(manifest.entries, key=lambda e: e.video_id):
        by_class.setdefault(e.label, []).append(e)
    needed = sum(1 for r in ratios if r > 0)
    out = []
    for label in sorted(by_class):
        members = by_class[label]
        if len(members) < needed:
            raise ValueError(f"class {label} has {len(members)} videos, split needs at least {needed}")
        counts = _apportion(len(members), ratios)
        for i, r in enumerate(ratios):
            if r > 0 and counts[i] == 0:
                # steal from the largest split so each non-empty ratio gets a video
                j = max(range(3), key=lambda k: counts[k])
                counts[j] -= 1
                counts[i] += 1
        perm = rng.permutation(len(members))
        names = [s for s, c in zip(SPLITS, counts) for _ in range(c)]
        for name, idx in zip(names, perm):
            e = members[idx]
            out.append(ManifestEntry(e.video_id, e.label, name, e.path))
    out.sort(key=lambda e: e.video_id)
    return DatasetManifest(out, manifest.root)


# ---------------------------------------------------------- synthetic data

@dataclass
class SyntheticSpec:
    n_classes: int = 10
    videos_per_class: int = 50
    n_features: int = 32
    min_length: int = 10
    max_length: int = 40
    noise: float = 0.1
    distractor_fraction: float = 0.2
    latent_dim: int = 4
    stretch: float = 0.3
    seed: int = 0

    def validate(self) -> None:
        if min(self.n_classes, self.videos_per_class, self.n_features, self.min_length,
               self.latent_dim) < 1:
            raise ValueError("synthetic spec counts must all be >= 1")
        if self.max_length < self.min_length:
            raise ValueError("max_length must be >= min_length")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")
        if not 0 <= self.distractor_fraction < 1:
            raise ValueError("distractor_fraction must lie in [0, 1)")
        if not 0 <= self.stretch < 1:
            raise ValueError("stretch must lie in [0, 1)")


@dataclass
class Trajectory:
    """Smooth latent curve ``offset + sum_k amp_k * sin(2 pi freq_k u + phase_k)``
    projected to feature space."""

    offset: np.ndarray  # (latent,)
    amp: np.ndarray  # (n_waves, latent)
    freq: np.ndarray  # (n_waves, 1)
    phase: np.ndarray  # (n_waves, latent)
    projection: np.ndarray  # (latent, n_features)

    def __call__(self, u: np.ndarray) -> np.ndarray:
        u = np.asarray(u, dtype=np.float64)[:, None, None]
        waves = self.amp * np.sin(2 * np.pi * self.freq * u + self.phase)
        return (self.offset + waves.sum(axis=1)) @ self.projection


# clip index -> trajectory coordinate for an unstretched video
BASE_STEP = 1.0 / 40.0


def _random_trajectory(rng: np.random.Generator, spec: SyntheticSpec, scale: float) -> Trajectory:
    L = spec.latent_dim
    return Trajectory(
        offset=rng.normal(0.0, scale, L),
        amp=rng.uniform(0.3, 1.0, (3, L)),
        freq=rng.uniform(0.3, 1.5, (3, 1)),
        phase=rng.uniform(0, 2 * np.pi, (3, L)),
        projection=rng.normal(0.0, 1.0 / np.sqrt(L), (L, spec.n_features)),
    )


def render_video(traj: Trajectory, n_content: int, stretch: float) -> np.ndarray:
    """Noise-free class content: the class curve sampled from its start."""
    return traj(np.arange(n_content) * BASE_STEP * stretch)


@dataclass
class SyntheticDataset:
    spec: SyntheticSpec
    sequences: list[FeatureSequence]
    class_trajectories: list[Trajectory]
    stretches: list[float]
    distractor_spans: list[tuple[int, int]]  # (prefix, suffix) clip counts

    def manifest(self, pattern: str = "features/v{:06d}.fseq") -> DatasetManifest:
        return DatasetManifest([ManifestEntry(s.video_id, s.label, "", pattern.format(s.video_id))
                                for s in self.sequences])


def generate_synthetic(spec: SyntheticSpec) -> SyntheticDataset:
    """Generate labelled, untrimmed synthetic videos as a pure function of ``spec``.

    Each class owns a smooth curve in a low-dimensional latent space that is
    projected to ``n_features``.  A video plays its class curve from the start
    at a random speed (``1 +- stretch``), wrapped in class-agnostic distractor
    clips at the beginning and end, plus Gaussian noise.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    trajs = [_random_trajectory(rng, spec, scale=1.0) for _ in range(spec.n_classes)]
    background = _random_trajectory(rng, spec, scale=0.0)
    sequences, stretches, spans = [], [], []
    vid = 0
    for label in range(spec.n_classes):
        for _ in range(spec.videos_per_class):
            T = int(rng.integers(spec.min_length, spec.max_length + 1))
            n_distract = int(round(spec.distractor_fraction * T))
            n_distract = min(n_distract, T - 1)
            prefix = int(rng.integers(0, n_distract + 1))
            suffix = n_distract - prefix
            s = float(rng.uniform(1.0 - spec.stretch, 1.0 + spec.stretch))
            content = render_video(trajs[label], T - n_distract, s)
            start = rng.uniform(0.0, 10.0)
            bg = background(start + np.arange(n_distract) * BASE_STEP)
            clips = np.concatenate([bg[:prefix], content, bg[prefix:]], axis=0)
            clips = clips + rng.normal(0.0, spec.noise, clips.shape)
            sequences.append(FeatureSequence(vid, label, clips.astype(np.float32)))
            stretches.append(s)
            spans.append((prefix, suffix))
            vid += 1
    return SyntheticDataset(spec, sequences, trajs, stretches, spans)


def write_dataset(ds: SyntheticDataset, out_dir: str | Path,
                  ratios: tuple[float, float, float] = (0.5, 0.45, 0.05),
                  split_seed: int | None = None) -> DatasetManifest:
    """Write every video plus a split ``manifest.tsv`` under ``out_dir``."""
    out_dir = Path(out_dir)
    (out_dir / "features").mkdir(parents=True, exist_ok=True)
    manifest = ds.manifest()
    manifest.root = out_dir
    for seq, entry in zip(ds.sequences, manifest.entries):
        write_features(seq, out_dir / entry.path)
    manifest = split(manifest, ratios, ds.spec.seed if split_seed is None else split_seed)
    write_manifest(manifest, out_dir / "manifest.tsv")
    return manifest
