"""Synthetic two-domain image benchmark plus the on-disk dataset format.

Each class in a label space is assigned a shape family and a base hue by
hashing "{label_space_id}/{class_index}", so two label spaces share no class
semantics by construction.  Images are rendered from signed distance fields
with per-sample jitter (position, rotation, size, hue, lighting), then the
domain shift is applied: a hue rotation of the whole image about the gray
axis, additive pixel noise, and a background brightness offset.

Everything is plain numpy and keyed by derive_seed, so a DomainSpec renders
to bit-identical float32 arrays on any machine.
"""

from __future__ import annotations

import colorsys
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import hashlib

import numpy as np

from .errors import (
    DatasetCorruptError,
    ConfigError,
    EmptyDatasetError,
    SchemaVersionError,
)
from .utils import derive_seed

MAGIC = b"PXDSET01"
DATASET_SCHEMA_VERSION = 1

SHAPE_FAMILIES = ("disk", "ring", "square", "diamond", "triangle", "cross",
                  "stripes", "dots")

# fraction of each class routed to train/val/test
SPLIT_FRACTIONS = (0.7, 0.1, 0.2)
SPLIT_NAMES = ("train", "val", "test")


@dataclass
class ShiftSpec:
    """Domain-shift knobs applied on top of the base rendering."""

    color_rotation: float = 0.0      # radians of hue rotation about gray axis
    texture_noise_sigma: float = 0.0  # stddev of additive pixel noise
    background_bias: float = 0.0     # brightness offset of the background

    def __post_init__(self):
        if self.texture_noise_sigma < 0:
            raise ConfigError(
                f"texture_noise_sigma must be >= 0, got {self.texture_noise_sigma}")

    def to_dict(self) -> dict:
        return {"color_rotation": self.color_rotation,
                "texture_noise_sigma": self.texture_noise_sigma,
                "background_bias": self.background_bias}

    @classmethod
    def from_dict(cls, d: dict) -> "ShiftSpec":
        return cls(**d)


@dataclass
class DomainSpec:
    """Full recipe for one synthetic domain."""

    name: str
    num_classes: int
    samples_per_class: int
    label_space_id: str
    seed: int
    image_size: tuple[int, int, int] = (32, 32, 3)
    shift: ShiftSpec = field(default_factory=ShiftSpec)

    def __post_init__(self):
        if isinstance(self.shift, dict):
            self.shift = ShiftSpec.from_dict(self.shift)
        self.image_size = tuple(int(v) for v in self.image_size)
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.samples_per_class < 10:
            raise ConfigError(
                "samples_per_class must be >= 10 so every split is non-empty, "
                f"got {self.samples_per_class}")
        if len(self.image_size) != 3 or self.image_size[2] != 3:
            raise ConfigError(
                f"image_size must be (H, W, 3), got {self.image_size}")
        if min(self.image_size[:2]) < 8:
            raise ConfigError(f"images must be at least 8x8, got {self.image_size}")

    def to_dict(self) -> dict:
        return {"name": self.name, "num_classes": self.num_classes,
                "samples_per_class": self.samples_per_class,
                "label_space_id": self.label_space_id, "seed": self.seed,
                "image_size": list(self.image_size),
                "shift": self.shift.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "DomainSpec":
        d = dict(d)
        d["image_size"] = tuple(d["image_size"])
        d["shift"] = ShiftSpec.from_dict(d["shift"])
        return cls(**d)


@dataclass
class LabeledDataset:
    """One split of one domain: float32 images [N,H,W,C] + int64 labels [N]."""

    images: np.ndarray
    labels: np.ndarray
    split: str
    spec: DomainSpec

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[0] != self.labels.shape[0]:
            raise DatasetCorruptError(
                f"images {self.images.shape} and labels {self.labels.shape} "
                "do not line up")

    @property
    def n(self) -> int:
        return int(self.images.shape[0])

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes

    def subset(self, indices: np.ndarray, split_suffix: str | None = None) -> "LabeledDataset":
        split = self.split if split_suffix is None else f"{self.split}-{split_suffix}"
        return LabeledDataset(self.images[indices], self.labels[indices],
                              split, self.spec)

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.images.astype("<f4")).tobytes())
        h.update(np.ascontiguousarray(self.labels.astype("<i4")).tobytes())
        return h.hexdigest()


class DomainSplits(NamedTuple):
    train: LabeledDataset
    val: LabeledDataset
    test: LabeledDataset


# ---------------------------------------------------------------------------
# class semantics


def class_semantics(label_space_id: str, class_index: int) -> dict:
    """Shape family and base hue for one class, derived by hashing.

    The same (label_space_id, class_index) always maps to the same semantics;
    distinct label spaces are unrelated.
    """
    digest = hashlib.sha256(f"{label_space_id}/{class_index}".encode()).digest()
    shape = SHAPE_FAMILIES[digest[0] % len(SHAPE_FAMILIES)]
    hue = int.from_bytes(digest[1:3], "little") / 65536.0
    size = 0.55 + 0.25 * (digest[3] / 255.0)  # nominal half-extent in [-1,1] coords
    return {"shape": shape, "hue": hue, "size": size}


# ---------------------------------------------------------------------------
# SDF rendering

def _shape_sdf(shape: str, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Signed distance (positive inside) of the unit-size shape at (u, v)."""
    if shape == "disk":
        return 1.0 - np.hypot(u, v)
    if shape == "ring":
        return 0.35 - np.abs(np.hypot(u, v) - 0.72)
    if shape == "square":
        return 1.0 - np.maximum(np.abs(u), np.abs(v))
    if shape == "diamond":
        return 1.0 - (np.abs(u) + np.abs(v))
    if shape == "triangle":
        d1 = v + 0.5
        d2 = 0.5 - (np.sqrt(3.0) * u + v) / 2.0
        d3 = 0.5 + (np.sqrt(3.0) * u - v) / 2.0
        return np.minimum(d1, np.minimum(d2, d3))
    if shape == "cross":
        bar_h = np.minimum(0.95 - np.abs(u), 0.34 - np.abs(v))
        bar_v = np.minimum(0.34 - np.abs(u), 0.95 - np.abs(v))
        return np.maximum(bar_h, bar_v)
    if shape == "stripes":
        bound = 0.92 - np.maximum(np.abs(u), np.abs(v))
        bars = 0.16 - np.abs(((v + 4.0) % 0.64) - 0.32)
        return np.minimum(bound, bars)
    if shape == "dots":
        w = ((u + 4.0) % 0.66) - 0.33
        z = ((v + 4.0) % 0.66) - 0.33
        dots = 0.21 - np.hypot(w, z)
        bound = 0.95 - np.maximum(np.abs(u), np.abs(v))
        return np.minimum(dots, bound)
    raise ValueError(f"unknown shape family {shape!r}")


def hue_rotation_matrix(theta: float) -> np.ndarray:
    """3x3 rotation of RGB space about the gray axis (1,1,1)/sqrt(3)."""
    a = np.full(3, 1.0 / np.sqrt(3.0))
    k = np.array([[0.0, -a[2], a[1]],
                  [a[2], 0.0, -a[0]],
                  [-a[1], a[0], 0.0]])
    return (np.eye(3) * np.cos(theta) + np.sin(theta) * k
            + (1.0 - np.cos(theta)) * np.outer(a, a))


def render_sample(spec: DomainSpec, class_index: int, sample_index: int) -> np.ndarray:
    """Render one float32 [H, W, 3] image, fully determined by its key."""
    sem = class_semantics(spec.label_space_id, class_index)
    rng = np.random.default_rng(
        derive_seed(spec.seed, spec.label_space_id, class_index, sample_index))
    h, w, _ = spec.image_size

    cx, cy = rng.uniform(-0.22, 0.22, size=2)
    # rotation jitter stays small so square and diamond remain distinct
    theta = rng.uniform(-0.2, 0.2)
    size = sem["size"] * rng.uniform(0.82, 1.18)
    hue = (sem["hue"] + rng.uniform(-0.03, 0.03)) % 1.0
    sat = 0.55 + 0.35 * rng.uniform()
    val = 0.70 + 0.25 * rng.uniform()
    bg_gray = 0.22 + 0.12 * rng.uniform()

    ys, xs = np.meshgrid(np.linspace(-1.0, 1.0, h), np.linspace(-1.0, 1.0, w),
                         indexing="ij")
    ct, st = np.cos(theta), np.sin(theta)
    u = ((xs - cx) * ct + (ys - cy) * st) / size
    v = (-(xs - cx) * st + (ys - cy) * ct) / size

    sdf = _shape_sdf(sem["shape"], u, v)
    # antialias over ~1.5 px regardless of image size
    px_scale = size * (min(h, w) / 2.0)
    mask = np.clip(0.5 + sdf * px_scale / 1.5, 0.0, 1.0)

    fg = np.array(colorsys.hsv_to_rgb(hue, sat, val))
    bg = np.full(3, np.clip(bg_gray + spec.shift.background_bias, 0.0, 1.0))
    img = bg[None, None, :] + mask[:, :, None] * (fg - bg)[None, None, :]

    if spec.shift.color_rotation != 0.0:
        img = img @ hue_rotation_matrix(spec.shift.color_rotation).T
    if spec.shift.texture_noise_sigma > 0.0:
        img = img + rng.normal(0.0, spec.shift.texture_noise_sigma, img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def generate_domain(spec: DomainSpec) -> DomainSplits:
    """Render the whole domain and split it 70/10/20 per class.

    Split membership is decided by a per-class permutation keyed by the
    domain seed, so the three splits are disjoint and exhaustive.
    """
    h, w, c = spec.image_size
    per_split: dict[str, tuple[list, list]] = {s: ([], []) for s in SPLIT_NAMES}
    for cls in range(spec.num_classes):
        imgs = np.stack([render_sample(spec, cls, i)
                         for i in range(spec.samples_per_class)])
        order = np.random.default_rng(
            derive_seed(spec.seed, spec.label_space_id, cls, "split")
        ).permutation(spec.samples_per_class)
        n_train = int(np.floor(SPLIT_FRACTIONS[0] * spec.samples_per_class))
        n_val = int(np.floor(SPLIT_FRACTIONS[1] * spec.samples_per_class))
        bounds = {"train": order[:n_train],
                  "val": order[n_train:n_train + n_val],
                  "test": order[n_train + n_val:]}
        for split, idx in bounds.items():
            per_split[split][0].append(imgs[idx])
            per_split[split][1].append(np.full(len(idx), cls, dtype=np.int64))
    out = {}
    for split in SPLIT_NAMES:
        images = np.concatenate(per_split[split][0]).astype(np.float32)
        labels = np.concatenate(per_split[split][1])
        out[split] = LabeledDataset(images, labels, split, spec)
    return DomainSplits(**out)


# ---------------------------------------------------------------------------
# on-disk format
#
#   magic (8 bytes) | schema version (u32 LE) | header length (u32 LE)
#   | header JSON (utf-8) | images (float32 LE, C order) | labels (int32 LE)


def save_dataset(ds: LabeledDataset, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "split": ds.split,
        "n": ds.n,
        "image_shape": list(ds.images.shape[1:]),
        "spec": ds.spec.to_dict(),
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", DATASET_SCHEMA_VERSION))
        f.write(struct.pack("<I", len(header_bytes)))
        f.write(header_bytes)
        f.write(np.ascontiguousarray(ds.images.astype("<f4")).tobytes())
        f.write(np.ascontiguousarray(ds.labels.astype("<i4")).tobytes())
    return path


def load_dataset(path: str | Path) -> LabeledDataset:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError as e:
        from .errors import MissingArtifactError
        raise MissingArtifactError(f"dataset file not found: {path}") from e

    if len(raw) < len(MAGIC) + 8:
        raise DatasetCorruptError(f"{path}: truncated before header (got {len(raw)} bytes)")
    if raw[:len(MAGIC)] != MAGIC:
        raise DatasetCorruptError(
            f"{path}: bad magic {raw[:len(MAGIC)]!r} at offset 0")
    version, header_len = struct.unpack_from("<II", raw, len(MAGIC))
    if version != DATASET_SCHEMA_VERSION:
        raise SchemaVersionError(
            f"{path}: dataset schema version {version}, this build reads "
            f"{DATASET_SCHEMA_VERSION}")
    off = len(MAGIC) + 8
    if len(raw) < off + header_len:
        raise DatasetCorruptError(f"{path}: truncated inside header at offset {off}")
    try:
        header = json.loads(raw[off:off + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DatasetCorruptError(f"{path}: unreadable header: {e}") from e
    off += header_len

    n = int(header["n"])
    shape = tuple(int(v) for v in header["image_shape"])
    img_bytes = n * int(np.prod(shape)) * 4
    lbl_bytes = n * 4
    if len(raw) != off + img_bytes + lbl_bytes:
        raise DatasetCorruptError(
            f"{path}: payload is {len(raw) - off} bytes, expected "
            f"{img_bytes + lbl_bytes} (offset {off})")
    images = np.frombuffer(raw, dtype="<f4", count=n * int(np.prod(shape)),
                           offset=off).reshape((n,) + shape).astype(np.float32)
    labels = np.frombuffer(raw, dtype="<i4", count=n,
                           offset=off + img_bytes).astype(np.int64)
    spec = DomainSpec.from_dict(header["spec"])
    ds = LabeledDataset(images.copy(), labels.copy(), header["split"], spec)
    if ds.n == 0:
        raise EmptyDatasetError(f"{path}: dataset has zero samples")
    return ds


def save_domain(splits: DomainSplits, out_dir: str | Path) -> dict[str, Path]:
    out_dir = Path(out_dir)
    return {split: save_dataset(getattr(splits, split), out_dir / f"{split}.bin")
            for split in SPLIT_NAMES}


def load_domain(in_dir: str | Path) -> DomainSplits:
    in_dir = Path(in_dir)
    return DomainSplits(**{split: load_dataset(in_dir / f"{split}.bin")
                           for split in SPLIT_NAMES})


# ---------------------------------------------------------------------------
# shipped desk-scale domains


def desk_broad_spec(seed: int = 7) -> DomainSpec:
    """20-class broad domain the backbone is pretrained on."""
    return DomainSpec(name="broad", num_classes=20, samples_per_class=200,
                      label_space_id="broad-v1", seed=seed,
                      shift=ShiftSpec(texture_noise_sigma=0.03))


def desk_target_spec(seed: int = 11) -> DomainSpec:
    """5-class shifted target domain with a disjoint label space."""
    return DomainSpec(name="target", num_classes=5, samples_per_class=120,
                      label_space_id="target-v1", seed=seed,
                      shift=ShiftSpec(color_rotation=0.5,
                                      texture_noise_sigma=0.10,
                                      background_bias=0.10))
