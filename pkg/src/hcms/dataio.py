"""Feature-sequence datasets: on-disk format and the synthetic benchmark.

File layout: a JSON header, the sentinel line ``%%END-HEADER%%``, then one
block per video holding little-endian float32 arrays, row-major ``[T, d]``,
for audio, appearance and motion in that order.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

MODALITIES = ("audio", "appearance", "motion")
FORMAT_NAME = "hcms-features"
FORMAT_VERSION = 1
SENTINEL = b"\n%%END-HEADER%%\n"
DEFAULT_BACKBONE_GFLOPS = {"audio": 0.07, "appearance": 0.99, "motion": 65.7}


class DatasetFormatError(ValueError):
    pass


class VersionError(DatasetFormatError):
    pass


class TruncatedError(DatasetFormatError):
    def __init__(self, index: int, video_id: str):
        super().__init__(f"file truncated inside block of video #{index} ({video_id!r})")
        self.index = index


class DimMismatchError(DatasetFormatError):
    pass


@dataclass
class FeatureSequence:
    video_id: str
    label: int
    audio: np.ndarray  # [T, d_audio]
    appearance: np.ndarray
    motion: np.ndarray

    def __post_init__(self):
        lengths = {len(self.audio), len(self.appearance), len(self.motion)}
        if len(lengths) != 1:
            raise DimMismatchError(f"video {self.video_id!r}: streams have different lengths {sorted(lengths)}")

    @property
    def T(self) -> int:
        return len(self.audio)

    def stream(self, modality: str) -> np.ndarray:
        return getattr(self, modality)

    def dims(self) -> tuple[int, int, int]:
        return tuple(self.stream(m).shape[1] for m in MODALITIES)


@dataclass
class DatasetHeader:
    num_classes: int
    dims: tuple[int, int, int]
    default_T: int
    backbone_gflops: dict = field(default_factory=lambda: dict(DEFAULT_BACKBONE_GFLOPS))
    version: int = FORMAT_VERSION
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        if self.num_classes < 2:
            raise ValueError(f"need at least 2 classes, got {self.num_classes}")
        if any(d <= 0 for d in self.dims):
            raise ValueError(f"dims must be positive, got {self.dims}")


@dataclass
class Dataset:
    header: DatasetHeader
    videos: list[FeatureSequence]

    def __len__(self) -> int:
        return len(self.videos)

    @property
    def labels(self) -> np.ndarray:
        return np.array([v.label for v in self.videos], dtype=np.int64)

    def subset(self, indices) -> "Dataset":
        return Dataset(self.header, [self.videos[i] for i in indices])


def _check_video(header: DatasetHeader, v: FeatureSequence, index: int) -> None:
    if v.dims() != header.dims:
        raise DimMismatchError(f"video #{index} ({v.video_id!r}) has dims {v.dims()}, header says {header.dims}")
    if not 0 <= v.label < header.num_classes:
        raise DimMismatchError(f"video #{index} ({v.video_id!r}) label {v.label} outside [0, {header.num_classes})")


def write_dataset(dataset: Dataset, path) -> None:
    h = dataset.header
    for i, v in enumerate(dataset.videos):
        _check_video(h, v, i)
    doc = {
        "format": FORMAT_NAME,
        "version": h.version,
        "num_classes": h.num_classes,
        "dims": dict(zip(MODALITIES, h.dims)),
        "default_T": h.default_T,
        "backbone_gflops": h.backbone_gflops,
        "num_videos": len(dataset.videos),
        "videos": [{"id": v.video_id, "label": int(v.label), "T": v.T} for v in dataset.videos],
        **({"extra": h.extra} if h.extra else {}),
    }
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(json.dumps(doc, indent=2).encode("utf-8"))
        f.write(SENTINEL)
        for v in dataset.videos:
            for m in MODALITIES:
                f.write(np.ascontiguousarray(v.stream(m), dtype="<f4").tobytes())
    os.replace(tmp, path)


def read_dataset(path) -> Dataset:
    raw = Path(path).read_bytes()
    cut = raw.find(SENTINEL)
    if cut < 0:
        raise DatasetFormatError(f"{path}: header sentinel not found")
    try:
        doc = json.loads(raw[:cut].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DatasetFormatError(f"{path}: malformed header ({e})") from None
    if doc.get("format") != FORMAT_NAME:
        raise DatasetFormatError(f"{path}: not an {FORMAT_NAME} file")
    if doc.get("version") != FORMAT_VERSION:
        raise VersionError(f"{path}: format version {doc.get('version')} unsupported (expected {FORMAT_VERSION})")
    dims = tuple(int(doc["dims"][m]) for m in MODALITIES)
    header = DatasetHeader(
        num_classes=int(doc["num_classes"]),
        dims=dims,
        default_T=int(doc["default_T"]),
        backbone_gflops=doc.get("backbone_gflops", dict(DEFAULT_BACKBONE_GFLOPS)),
        version=doc["version"],
        extra=doc.get("extra", {}),
    )
    records = doc["videos"]
    if len(records) != doc.get("num_videos", len(records)):
        raise DatasetFormatError(f"{path}: num_videos disagrees with video index")
    body = memoryview(raw)[cut + len(SENTINEL) :]
    pos = 0
    videos = []
    for i, rec in enumerate(records):
        T = int(rec["T"])
        streams = []
        for d in dims:
            n = T * d * 4
            if pos + n > len(body):
                raise TruncatedError(i, rec["id"])
            streams.append(np.frombuffer(body[pos : pos + n], dtype="<f4").reshape(T, d).astype(np.float32))
            pos += n
        videos.append(FeatureSequence(rec["id"], int(rec["label"]), *streams))
    if pos != len(body):
        raise DimMismatchError(f"{path}: {len(body) - pos} trailing bytes after last block; dims or T disagree with data")
    return Dataset(header, videos)


# ---------------------------------------------------------------------------
# synthetic benchmark


@dataclass(frozen=True)
class SyntheticSpec:
    """Class groups whose label is only visible in one modality each.

    ``group_sizes`` counts the audio-, appearance- and motion-separable
    classes. ``snr`` is the norm of a planted class mean relative to unit
    per-coordinate noise.
    """

    group_sizes: tuple[int, int, int] = (4, 4, 4)
    T: int = 16
    dims: tuple[int, int, int] = (16, 24, 32)
    snr: float = 4.0
    signal_fraction: float = 0.5
    seed: int = 0
    train_per_class: int = 60
    val_per_class: int = 20
    test_per_class: int = 20

    @property
    def num_classes(self) -> int:
        return sum(self.group_sizes)

    def group_of(self, label: int) -> int:
        return int(np.searchsorted(np.cumsum(self.group_sizes), label, side="right"))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        d = dict(d)
        for k in ("group_sizes", "dims"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


def _validate_spec(spec: SyntheticSpec) -> None:
    if any(d < 2 for d in spec.dims):
        raise ValueError(f"feature dims must be at least 2, got {spec.dims}")
    if any(g < 0 for g in spec.group_sizes) or spec.num_classes < 2:
        raise ValueError(f"invalid class group sizes {spec.group_sizes}")
    if spec.snr <= 0:
        raise ValueError("snr must be positive")
    if not 0 < spec.signal_fraction <= 1:
        raise ValueError("signal_fraction must be in (0, 1]")
    if spec.T < 1:
        raise ValueError("T must be at least 1")


def _class_means(rng: np.random.Generator, n: int, d: int, snr: float) -> np.ndarray:
    if n == 0:
        return np.zeros((0, d))
    g = rng.standard_normal((d, max(n, 1)))
    if n <= d:
        q, _ = np.linalg.qr(g)
        dirs = q[:, :n].T
    else:
        dirs = (g / np.linalg.norm(g, axis=0)).T
    return snr * dirs


def class_means(spec: SyntheticSpec) -> list[np.ndarray]:
    """Planted mean vectors per group, as drawn at the start of generation."""
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    return [_class_means(rng, n, d, spec.snr) for n, d in zip(spec.group_sizes, spec.dims)]


def generate_synthetic(spec: SyntheticSpec = SyntheticSpec()) -> dict[str, Dataset]:
    """Train/val/test splits with modality-specific class signal.

    A class in group ``g`` gets its mean added to modality ``g`` at a random
    ``signal_fraction`` of the steps; every other value is N(0, 1) noise.
    """
    _validate_spec(spec)
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    means = [_class_means(rng, n, d, spec.snr) for n, d in zip(spec.group_sizes, spec.dims)]
    owners = [(g, k) for g, n in enumerate(spec.group_sizes) for k in range(n)]
    n_signal = max(1, int(round(spec.signal_fraction * spec.T)))
    header = DatasetHeader(
        num_classes=spec.num_classes,
        dims=spec.dims,
        default_T=spec.T,
        extra={"synthetic": spec.to_dict()},
    )
    splits = {}
    for split, per_class in (("train", spec.train_per_class), ("val", spec.val_per_class), ("test", spec.test_per_class)):
        labels = np.repeat(np.arange(spec.num_classes), per_class)
        labels = labels[rng.permutation(len(labels))]
        videos = []
        for i, y in enumerate(labels):
            streams = [rng.standard_normal((spec.T, d)) for d in spec.dims]
            g, k = owners[y]
            steps = rng.choice(spec.T, size=n_signal, replace=False)
            streams[g][steps] += means[g][k]
            videos.append(FeatureSequence(f"{split}-{i:05d}", int(y), *(s.astype(np.float32) for s in streams)))
        splits[split] = Dataset(header, videos)
    return splits
