"""Procedural segmentation dataset: coloured shapes on a noisy background.

Class 0 is background; classes 1.. are painted shapes (disc, square,
plus-sign, cycling for larger class counts). Each class has a fixed base
colour and every pixel receives additive Gaussian noise.
"""
from __future__ import annotations

import json
import os
import zlib
from dataclasses import asdict, dataclass, field
from math import ceil

import numpy as np

from .errors import CorruptDataset, IncompleteDataset
from .numkit import RngStream

IGNORE = 255
FORMAT_VERSION = 1

# Base colours for the default 4-class setup. Shape colours sit close to the
# background on purpose so that single pixels are ambiguous under noise.
_BASE_COLORS = np.array(
    [
        [0.0, 0.0, 0.0],
        [0.9, 0.3, 0.0],
        [0.0, 0.9, 0.3],
        [0.3, 0.0, 0.9],
    ]
)

SHAPE_DISC, SHAPE_SQUARE, SHAPE_PLUS = 0, 1, 2


@dataclass
class GenConfig:
    image_size: int = 32
    channels: int = 3
    num_classes: int = 4
    num_train: int = 500
    num_devel: int = 50
    num_val: int = 100
    labeled_fraction: float = 0.02
    noise_sigma: float = 1.0
    # optional per-image colour shift, in units of noise_sigma
    shift_ratio: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if not 0.0 < self.labeled_fraction <= 1.0:
            raise ValueError("labeled_fraction must lie in (0, 1]")
        if self.labeled_fraction * self.num_train < 1:
            raise ValueError("labeled_fraction * num_train must be >= 1")
        if self.image_size < 4 or self.channels < 1:
            raise ValueError("image_size must be >= 4 and channels >= 1")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")


def base_colors(num_classes: int, channels: int) -> np.ndarray:
    """Deterministic per-class base colour table of shape (C, channels)."""
    out = np.zeros((num_classes, channels))
    for k in range(num_classes):
        if k < len(_BASE_COLORS):
            src = _BASE_COLORS[k]
        else:
            src = np.random.default_rng(1000 + k).uniform(0.0, 1.0, size=3)
        out[k] = np.resize(src, channels)
    return out


@dataclass
class Sample:
    id: int
    features: np.ndarray  # (H, W, Ch) float32
    labels: np.ndarray  # (H, W) uint8

    def __eq__(self, other):
        return (
            isinstance(other, Sample)
            and self.id == other.id
            and self.features.dtype == other.features.dtype
            and self.labels.dtype == other.labels.dtype
            and self.features.tobytes() == other.features.tobytes()
            and self.labels.tobytes() == other.labels.tobytes()
            and self.features.shape == other.features.shape
        )


@dataclass
class DatasetSplit:
    labeled: list = field(default_factory=list)
    unlabeled: list = field(default_factory=list)
    development: list = field(default_factory=list)
    validation: list = field(default_factory=list)
    config: GenConfig | None = None

    PARTS = ("labeled", "unlabeled", "development", "validation")

    def ids(self, part):
        return [s.id for s in getattr(self, part)]

    def check_disjoint(self):
        seen = set()
        for part in self.PARTS:
            ids = set(self.ids(part))
            if ids & seen:
                raise ValueError(f"split part {part!r} overlaps another part")
            seen |= ids

    def features(self, part) -> np.ndarray:
        items = getattr(self, part)
        return np.stack([s.features for s in items]) if items else np.empty((0,))

    def labels(self, part) -> np.ndarray:
        items = getattr(self, part)
        return np.stack([s.labels for s in items]) if items else np.empty((0,))

    def unlabeled_features(self) -> np.ndarray:
        """Features of the unlabeled pool; hidden labels are not exposed."""
        return self.features("unlabeled")

    def __eq__(self, other):
        if not isinstance(other, DatasetSplit):
            return NotImplemented
        return all(getattr(self, p) == getattr(other, p) for p in self.PARTS)


def _disc_mask(size, rng):
    r = int(rng.integers(3, 7))
    cy, cx = (int(v) for v in rng.integers(r, size - r, size=2))
    yy, xx = np.mgrid[:size, :size]
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def _square_mask(size, rng):
    side = int(rng.integers(5, 11))
    y0, x0 = (int(v) for v in rng.integers(0, size - side + 1, size=2))
    m = np.zeros((size, size), dtype=bool)
    m[y0 : y0 + side, x0 : x0 + side] = True
    return m


def _plus_mask(size, rng):
    arm = int(rng.integers(3, 7))
    half = int(rng.integers(1, 3))  # bar thickness 2*half - 1
    cy, cx = (int(v) for v in rng.integers(arm, size - arm, size=2))
    m = np.zeros((size, size), dtype=bool)
    m[cy - arm : cy + arm + 1, cx - half + 1 : cx + half] = True
    m[cy - half + 1 : cy + half, cx - arm : cx + arm + 1] = True
    return m


_SHAPES = (_disc_mask, _square_mask, _plus_mask)


def generate_sample(cfg: GenConfig, rng: RngStream, sample_id: int = 0) -> Sample:
    """Paint 1-3 non-overlapping shapes and return features plus labels."""
    size = cfg.image_size
    labels = np.zeros((size, size), dtype=np.uint8)
    n_shapes = int(rng.integers(1, 4))
    for _ in range(n_shapes):
        cls = int(rng.integers(1, cfg.num_classes))
        painter = _SHAPES[(cls - 1) % 3]
        for _attempt in range(100):
            mask = painter(size, rng)
            if not np.any(labels[mask]):
                labels[mask] = cls
                break
        # rejection budget exhausted: keep fewer shapes
    colors = base_colors(cfg.num_classes, cfg.channels)
    feats = colors[labels]
    if cfg.noise_sigma > 0:
        shift = rng.normal(size=cfg.channels, scale=cfg.shift_ratio * cfg.noise_sigma)
        feats = feats + shift + rng.normal(size=feats.shape, scale=cfg.noise_sigma)
    return Sample(sample_id, feats.astype(np.float32), labels)


def make_split(cfg: GenConfig, rng: RngStream | None = None) -> DatasetSplit:
    """Generate every sample and partition into the four split parts.

    Labeled count is ``ceil(labeled_fraction * num_train)``; unlabeled
    samples keep their ground truth on disk for diagnostics only.
    """
    if rng is None:
        rng = RngStream(cfg.seed)
    total = cfg.num_train + cfg.num_devel + cfg.num_val
    samples = [generate_sample(cfg, rng.derive("sample", i), i) for i in range(total)]
    train = samples[: cfg.num_train]
    n_lab = min(cfg.num_train, ceil(round(cfg.labeled_fraction * cfg.num_train, 9)))
    order = rng.derive("assign").permutation(cfg.num_train)
    lab_idx = sorted(int(i) for i in order[:n_lab])
    unl_idx = sorted(int(i) for i in order[n_lab:])
    split = DatasetSplit(
        labeled=[train[i] for i in lab_idx],
        unlabeled=[train[i] for i in unl_idx],
        development=samples[cfg.num_train : cfg.num_train + cfg.num_devel],
        validation=samples[cfg.num_train + cfg.num_devel :],
        config=cfg,
    )
    split.check_disjoint()
    return split


def _crc(data: bytes) -> int:
    return zlib.crc32(data) & 0xFFFFFFFF


def write_dataset(split: DatasetSplit, directory) -> dict:
    """Write the split as ``manifest.json`` plus raw per-sample files."""
    os.makedirs(directory, exist_ok=True)
    files = {}
    first = next(s for p in DatasetSplit.PARTS for s in getattr(split, p))
    height, width, channels = first.features.shape
    for part in DatasetSplit.PARTS:
        for s in getattr(split, part):
            fbytes = s.features.astype("<f4").tobytes()
            lbytes = s.labels.astype(np.uint8).tobytes()
            for name, data in ((f"feat_{s.id}.bin", fbytes), (f"label_{s.id}.bin", lbytes)):
                with open(os.path.join(directory, name), "wb") as fh:
                    fh.write(data)
                files[name] = {"crc32": _crc(data), "size": len(data)}
    manifest = {
        "format_version": FORMAT_VERSION,
        "dims": {"height": height, "width": width, "channels": channels},
        "counts": {p: len(getattr(split, p)) for p in DatasetSplit.PARTS},
        "splits": {p: split.ids(p) for p in DatasetSplit.PARTS},
        "files": files,
        "config": asdict(split.config) if split.config is not None else None,
    }
    with open(os.path.join(directory, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return manifest


def _read_checked(directory, name, meta):
    path = os.path.join(directory, name)
    if not os.path.exists(path):
        raise IncompleteDataset(f"missing file {name}")
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) != meta["size"]:
        raise IncompleteDataset(f"{name}: expected {meta['size']} bytes, found {len(data)}")
    if _crc(data) != meta["crc32"]:
        raise CorruptDataset(f"{name}: checksum mismatch")
    return data


def read_dataset(directory) -> DatasetSplit:
    mpath = os.path.join(directory, "manifest.json")
    if not os.path.exists(mpath):
        raise IncompleteDataset(f"no manifest.json in {directory}")
    with open(mpath) as fh:
        try:
            manifest = json.load(fh)
        except json.JSONDecodeError as exc:
            raise CorruptDataset(f"unreadable manifest: {exc}") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CorruptDataset(f"unsupported format_version {manifest.get('format_version')}")
    d = manifest["dims"]
    shape = (d["height"], d["width"], d["channels"])
    files = manifest["files"]
    parts = {}
    for part in DatasetSplit.PARTS:
        items = []
        for sid in manifest["splits"][part]:
            fname, lname = f"feat_{sid}.bin", f"label_{sid}.bin"
            if fname not in files or lname not in files:
                raise IncompleteDataset(f"sample {sid} missing from manifest")
            feats = np.frombuffer(_read_checked(directory, fname, files[fname]), dtype="<f4")
            labels = np.frombuffer(_read_checked(directory, lname, files[lname]), dtype=np.uint8)
            if feats.size != np.prod(shape) or labels.size != shape[0] * shape[1]:
                raise IncompleteDataset(f"sample {sid} has wrong size")
            items.append(
                Sample(
                    sid,
                    feats.reshape(shape).astype(np.float32),
                    labels.reshape(shape[:2]).copy(),
                )
            )
        parts[part] = items
    cfg = GenConfig(**manifest["config"]) if manifest.get("config") else None
    split = DatasetSplit(config=cfg, **parts)
    split.check_disjoint()
    return split
