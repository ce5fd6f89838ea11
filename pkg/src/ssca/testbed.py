"""Synthetic shortcut-learning benchmark and the corruption transforms.

Each image is a textured background plus a class-defining glyph stamped at
up to three slots (each slot independently present, any single glyph
suffices to identify the class) plus, depending on the split, a small
class-correlated color patch in the top-left corner - the shortcut cue.

Splits:
    train / test_id            cue present with probability p_spurious,
                               always matching the label
    test_ood_decorrelated      cue always present, class drawn uniformly
    test_ood_cuefree           no cue pixels at all

Donor images are backgrounds with neither glyphs nor cue.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .augment import LabeledSample
from .errors import DataError, FormatError, GeometryError
from .imaging import Image, read_tensor, write_tensor

SPLIT_NAMES = ("train", "test_id", "test_ood_decorrelated", "test_ood_cuefree")
_SPLIT_STREAM_IDS = {name: i for i, name in enumerate(SPLIT_NAMES)}
_DONOR_STREAM_ID = 97

CUE_PALETTE = (
    (1.0, 0.08, 0.08),
    (0.08, 1.0, 0.08),
    (0.10, 0.10, 1.0),
    (1.0, 1.0, 0.08),
)
_PART_INTENSITY = 0.95
# quarter-aligned slots: each glyph occupies a distinct cell of a 4x4 grid,
# so coarse-grid attribution can excise the cue without clipping glyphs
_SLOT_ANCHORS = ((0.25, 0.25), (0.25, 0.5), (0.5, 0.25), (0.5, 0.5))

CORRUPTION_KINDS = (
    "gaussian_noise",
    "gaussian_blur",
    "brightness",
    "contrast",
    "vertical_flip",
    "horizontal_flip",
)


@dataclass(frozen=True)
class ShortcutDatasetConfig:
    num_classes: int = 4
    height: int = 32
    width: int = 32
    channels: int = 3
    train_per_class: int = 500
    test_per_class: int = 125
    p_spurious: float = 0.95
    cue_size: int = 4
    parts_per_object: int = 3
    part_presence: float = 0.85
    noise_level: float = 0.02
    donor_count: int = 200
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if not 2 <= self.num_classes <= len(CUE_PALETTE):
            raise GeometryError(f"num_classes must be in [2, {len(CUE_PALETTE)}]")
        if self.channels != 3:
            raise GeometryError("the cue palette needs 3-channel images")
        if not 0.0 <= self.p_spurious <= 1.0:
            raise ValueError("p_spurious must lie in [0, 1]")
        if not 0.0 <= self.part_presence <= 1.0:
            raise ValueError("part_presence must lie in [0, 1]")
        if self.noise_level < 0:
            raise ValueError("noise_level must be nonnegative")
        if not 1 <= self.parts_per_object <= len(_SLOT_ANCHORS):
            raise GeometryError(f"parts_per_object must be in [1, {len(_SLOT_ANCHORS)}]")
        if self.cue_size < 1 or self.cue_size > min(self.height, self.width):
            raise GeometryError("cue must fit inside the image")
        # glyph slots must fit and stay clear of the cue corner
        g = _glyph_size(self.height, self.width)
        for top, left in _slot_positions(self.height, self.width, self.parts_per_object):
            if top + g > self.height or left + g > self.width:
                raise GeometryError("glyph slots do not fit inside the image")
            if top < self.cue_size and left < self.cue_size:
                raise GeometryError("a glyph slot overlaps the cue corner")

    def to_json_dict(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "height": self.height,
            "width": self.width,
            "channels": self.channels,
            "train_per_class": self.train_per_class,
            "test_per_class": self.test_per_class,
            "p_spurious": self.p_spurious,
            "cue_size": self.cue_size,
            "parts_per_object": self.parts_per_object,
            "part_presence": self.part_presence,
            "noise_level": self.noise_level,
            "donor_count": self.donor_count,
            "rng_seed": self.rng_seed,
        }

    @staticmethod
    def from_json_dict(d: dict) -> "ShortcutDatasetConfig":
        return ShortcutDatasetConfig(**d)


@dataclass
class DatasetSplit:
    """Array-backed labeled images; sample(i) materializes a LabeledSample."""

    name: str
    images: np.ndarray  # (N, h, w, c) float64 in [0, 1]
    labels: np.ndarray  # (N,) int64

    def __post_init__(self) -> None:
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or self.labels.shape != (self.images.shape[0],):
            raise DataError(f"split {self.name}: images/labels shapes disagree")

    def __len__(self) -> int:
        return self.images.shape[0]

    def sample(self, index: int) -> LabeledSample:
        return LabeledSample(image=Image(self.images[index].copy()), label=int(self.labels[index]))

    @property
    def samples(self) -> list[LabeledSample]:
        return [self.sample(i) for i in range(len(self))]


@dataclass
class TestbedData:
    config: ShortcutDatasetConfig
    splits: dict[str, DatasetSplit]
    donors: list[Image]


def _glyph_size(height: int, width: int) -> int:
    return max(4, round(min(height, width) / 4))


def _slot_positions(height: int, width: int, parts: int) -> list[tuple[int, int]]:
    return [
        (round(ry * height), round(rx * width))
        for ry, rx in _SLOT_ANCHORS[:parts]
    ]


def _glyph(class_id: int, g: int) -> np.ndarray:
    """Boolean stencil for one class; all four are symmetric under both flips."""
    t = max(1, g // 4)
    lo = g // 2 - (t + 1) // 2
    ii, jj = np.meshgrid(np.arange(g), np.arange(g), indexing="ij")
    hbar = (ii >= lo) & (ii < lo + t)
    vbar = (jj >= lo) & (jj < lo + t)
    if class_id == 0:
        return hbar
    if class_id == 1:
        return vbar
    if class_id == 2:
        return (np.abs(ii - jj) < t) | (np.abs(ii + jj - (g - 1)) < t)
    return hbar | vbar


def _background(rng: np.random.Generator, height: int, width: int) -> np.ndarray:
    base = 0.35 + 0.30 * rng.random(3)
    fy, fx = rng.uniform(0.5, 2.0, size=2)
    py, px = rng.uniform(0.0, 2.0 * np.pi, size=2)
    yy = np.linspace(0.0, 1.0, height, endpoint=False)[:, None]
    xx = np.linspace(0.0, 1.0, width, endpoint=False)[None, :]
    ripple = 0.08 * np.sin(2.0 * np.pi * fy * yy + py) + 0.08 * np.sin(2.0 * np.pi * fx * xx + px)
    return np.clip(base[None, None, :] + ripple[:, :, None], 0.05, 0.75)


def _render_sample(
    cfg: ShortcutDatasetConfig,
    rng: np.random.Generator,
    label: int,
    cue_mode: str,
) -> np.ndarray:
    img = _background(rng, cfg.height, cfg.width)
    g = _glyph_size(cfg.height, cfg.width)
    present = rng.random(cfg.parts_per_object) < cfg.part_presence
    stencil = _glyph(label, g)
    for slot, (top, left) in enumerate(_slot_positions(cfg.height, cfg.width, cfg.parts_per_object)):
        if present[slot]:
            block = img[top : top + g, left : left + g, :]
            block[stencil] = _PART_INTENSITY
    if cue_mode == "correlated":
        if rng.random() < cfg.p_spurious:
            img[: cfg.cue_size, : cfg.cue_size, :] = CUE_PALETTE[label]
    elif cue_mode == "decorrelated":
        cue_class = int(rng.integers(cfg.num_classes))
        img[: cfg.cue_size, : cfg.cue_size, :] = CUE_PALETTE[cue_class]
    elif cue_mode != "none":
        raise ValueError(f"unknown cue mode {cue_mode!r}")
    if cfg.noise_level > 0:
        img = img + cfg.noise_level * rng.standard_normal(img.shape)
    return np.clip(img, 0.0, 1.0)


def _sample_rng(cfg: ShortcutDatasetConfig, stream_id: int, index: int) -> np.random.Generator:
    # index-keyed streams: parallel generation must equal sequential byte-for-byte
    return np.random.default_rng((cfg.rng_seed, stream_id, index))


def generate(cfg: ShortcutDatasetConfig) -> TestbedData:
    """Render all four splits plus the donor backgrounds, deterministically."""
    split_specs = {
        "train": (cfg.train_per_class, "correlated"),
        "test_id": (cfg.test_per_class, "correlated"),
        "test_ood_decorrelated": (cfg.test_per_class, "decorrelated"),
        "test_ood_cuefree": (cfg.test_per_class, "none"),
    }
    splits: dict[str, DatasetSplit] = {}
    for name, (per_class, cue_mode) in split_specs.items():
        count = per_class * cfg.num_classes
        images = np.empty((count, cfg.height, cfg.width, cfg.channels))
        labels = np.empty(count, dtype=np.int64)
        stream = _SPLIT_STREAM_IDS[name]
        for i in range(count):
            label = i % cfg.num_classes
            images[i] = _render_sample(cfg, _sample_rng(cfg, stream, i), label, cue_mode)
            labels[i] = label
        splits[name] = DatasetSplit(name=name, images=images, labels=labels)
    donors = []
    for i in range(cfg.donor_count):
        rng = _sample_rng(cfg, _DONOR_STREAM_ID, i)
        img = _background(rng, cfg.height, cfg.width)
        if cfg.noise_level > 0:
            img = img + cfg.noise_level * rng.standard_normal(img.shape)
        donors.append(Image(np.clip(img, 0.0, 1.0)))
    return TestbedData(config=cfg, splits=splits, donors=donors)


# ---------------------------------------------------------------------------
# Corruptions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    param: float | None = None

    def __post_init__(self) -> None:
        if self.kind not in CORRUPTION_KINDS:
            raise ValueError(f"unknown corruption kind {self.kind!r}")
        parametric = self.kind in ("gaussian_noise", "gaussian_blur", "brightness", "contrast")
        if parametric and self.param is None:
            raise ValueError(f"corruption {self.kind} needs a severity parameter")

    def label(self) -> str:
        return self.kind


DEFAULT_CORRUPTIONS: tuple[CorruptionSpec, ...] = (
    CorruptionSpec("gaussian_noise", 0.1),
    CorruptionSpec("gaussian_blur", 1.0),
    CorruptionSpec("brightness", 0.2),
    CorruptionSpec("contrast", 0.5),
    CorruptionSpec("vertical_flip"),
    CorruptionSpec("horizontal_flip"),
)

_MASK64 = (1 << 64) - 1
_GAMMA = np.uint64(0x9E3779B97F4A7C15)


def _mix64(x: np.ndarray) -> np.ndarray:
    z = x.copy()
    z ^= z >> np.uint64(30)
    z *= np.uint64(0xBF58476D1CE4E5B9)
    z ^= z >> np.uint64(27)
    z *= np.uint64(0x94D049BB133111EB)
    z ^= z >> np.uint64(31)
    return z


def normal_stream(seed: int, count: int) -> np.ndarray:
    """Deterministic standard normals: SplitMix64 uniforms through Box-Muller.

    Value k of the underlying stream is mix64(seed + (k+1)*gamma); uniforms
    are ((v >> 11) + 1) * 2**-53 in (0, 1]. Pair 2j, 2j+1 maps to
    r*cos(2*pi*u2), r*sin(2*pi*u2) with r = sqrt(-2*ln(u1)).
    """
    if count == 0:
        return np.zeros(0)
    pairs = (count + 1) // 2
    k = np.arange(2 * pairs, dtype=np.uint64)
    states = np.uint64(seed & _MASK64) + (k + np.uint64(1)) * _GAMMA
    u = ((_mix64(states) >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0**-53
    u1, u2 = u[0::2], u[1::2]
    r = np.sqrt(-2.0 * np.log(u1))
    out = np.empty(2 * pairs)
    out[0::2] = r * np.cos(2.0 * np.pi * u2)
    out[1::2] = r * np.sin(2.0 * np.pi * u2)
    return out[:count]


def mix_seed(*parts: int) -> int:
    """Fold integers into one 64-bit seed (order-sensitive, deterministic)."""
    state = np.uint64(0)
    for p in parts:
        state = _mix64(np.asarray((state + _GAMMA) ^ np.uint64(int(p) & _MASK64)))
    return int(state)


def _gaussian_kernel(sigma: float, taps: int = 5) -> np.ndarray:
    half = taps // 2
    xs = np.arange(-half, half + 1, dtype=np.float64)
    k = np.exp(-0.5 * (xs / sigma) ** 2)
    return k / k.sum()


def _blur(data: np.ndarray, sigma: float) -> np.ndarray:
    kernel = _gaussian_kernel(sigma)
    half = kernel.size // 2
    out = np.pad(data, ((half, half), (0, 0), (0, 0)), mode="reflect")
    out = sum(kernel[i] * out[i : i + data.shape[0]] for i in range(kernel.size))
    out = np.pad(out, ((0, 0), (half, half), (0, 0)), mode="reflect")
    out = sum(kernel[i] * out[:, i : i + data.shape[1]] for i in range(kernel.size))
    return out


def apply_corruption(image: Image, spec: CorruptionSpec, seed: int = 0) -> Image:
    """Apply one corruption; outputs are clamped to [0, 1]."""
    data = image.data
    if spec.kind == "gaussian_noise":
        noise = normal_stream(seed, data.size).reshape(data.shape)
        return Image(np.clip(data + spec.param * noise, 0.0, 1.0))
    if spec.kind == "gaussian_blur":
        return Image(np.clip(_blur(data, float(spec.param)), 0.0, 1.0))
    if spec.kind == "brightness":
        return Image(np.clip(data + spec.param, 0.0, 1.0))
    if spec.kind == "contrast":
        if spec.param == 1.0:
            return Image(data.copy())  # exact identity at factor 1
        return Image(np.clip(0.5 + spec.param * (data - 0.5), 0.0, 1.0))
    if spec.kind == "vertical_flip":
        return Image(data[::-1].copy())
    return Image(data[:, ::-1].copy())  # horizontal_flip


# ---------------------------------------------------------------------------
# On-disk layout
# ---------------------------------------------------------------------------

DATASET_META_VERSION = 1


def _sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def save_dataset(data: TestbedData, out_dir: str | Path) -> dict:
    """Write splits, labels, donors, and a meta.json with a content hash."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries: dict[str, dict] = {}
    hashed_files: list[Path] = []
    for name in SPLIT_NAMES:
        split = data.splits[name]
        split_dir = out / name
        split_dir.mkdir(exist_ok=True)
        img_path = split_dir / "images.ssca"
        write_tensor(img_path, split.images)
        label_path = split_dir / "labels.csv"
        with open(label_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["index", "label"])
            for i, lab in enumerate(split.labels):
                writer.writerow([i, int(lab)])
        entries[name] = {
            "count": len(split),
            "images_sha256": _sha256_file(img_path),
            "labels_sha256": _sha256_file(label_path),
        }
        hashed_files += [img_path, label_path]
    donors_dir = out / "donors"
    donors_dir.mkdir(exist_ok=True)
    donors_path = donors_dir / "images.ssca"
    write_tensor(donors_path, np.stack([d.data for d in data.donors], axis=0))
    hashed_files.append(donors_path)
    digest = hashlib.sha256()
    for p in sorted(hashed_files):
        digest.update(_sha256_file(p).encode("ascii"))
    meta = {
        "format": "ssca-dataset",
        "version": DATASET_META_VERSION,
        "config": data.config.to_json_dict(),
        "splits": entries,
        "donors": {"count": len(data.donors), "images_sha256": _sha256_file(donors_path)},
        "content_hash": digest.hexdigest(),
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return meta


def load_dataset(in_dir: str | Path) -> TestbedData:
    root = Path(in_dir)
    meta_path = root / "meta.json"
    if not meta_path.exists():
        raise DataError(f"{root}: not a dataset directory (missing meta.json)")
    meta = json.loads(meta_path.read_text())
    if meta.get("format") != "ssca-dataset":
        raise FormatError(f"{root}: unexpected dataset format {meta.get('format')!r}")
    if meta.get("version") != DATASET_META_VERSION:
        raise FormatError(f"{root}: unsupported dataset version {meta.get('version')}")
    cfg = ShortcutDatasetConfig.from_json_dict(meta["config"])
    splits: dict[str, DatasetSplit] = {}
    for name in SPLIT_NAMES:
        images = np.clip(read_tensor(root / name / "images.ssca"), 0.0, 1.0)
        labels = []
        with open(root / name / "labels.csv", newline="") as fh:
            for row in csv.DictReader(fh):
                labels.append(int(row["label"]))
        if len(labels) != images.shape[0]:
            raise DataError(f"{root}/{name}: label count {len(labels)} != image count {images.shape[0]}")
        splits[name] = DatasetSplit(name=name, images=images, labels=np.asarray(labels))
    donor_stack = np.clip(read_tensor(root / "donors" / "images.ssca"), 0.0, 1.0)
    donors = [Image(donor_stack[i]) for i in range(donor_stack.shape[0])]
    return TestbedData(config=cfg, splits=splits, donors=donors)
