"""Class-imbalanced synthetic pixel datasets with known latent mode structure.

Each image is a rectangle collage over a dominant background class. Every
pixel's feature vector is drawn from one of its class's latent Gaussian modes
(chosen uniformly), so the hidden mode index provides ground truth for
validating subclass discovery later in the pipeline.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import DataError, GenerationError
from .grids import FeatureGrid, LabelGrid

DATASET_MAGIC = b"USRNDS1"
FREQ_TOL = 1e-6

# default generator settings; mode_noise is sized against unit-scale mode
# centers so that neighbouring classes genuinely overlap
DEFAULT_FEATURE_DIM = 8
DEFAULT_IMAGE_SIZE = 32
DEFAULT_MODE_NOISE = 0.7
DEFAULT_IMAGE_NOISE_FRACTION = 0.85
DEFAULT_FREQUENCIES = (0.70, 0.15, 0.08, 0.05, 0.02)


@dataclass
class SceneSpec:
    """Recipe for one synthetic dataset family."""

    num_classes: int
    class_frequencies: tuple[float, ...]
    modes_per_class: tuple[int, ...]
    feature_dim: int = DEFAULT_FEATURE_DIM
    mode_noise: float = DEFAULT_MODE_NOISE
    image_noise_fraction: float = DEFAULT_IMAGE_NOISE_FRACTION
    height: int = DEFAULT_IMAGE_SIZE
    width: int = DEFAULT_IMAGE_SIZE
    seed: int = 0
    mode_centers: np.ndarray | None = None  # (total_modes, feature_dim)

    def __post_init__(self) -> None:
        if isinstance(self.modes_per_class, int):
            self.modes_per_class = (self.modes_per_class,) * self.num_classes
        self.modes_per_class = tuple(int(m) for m in self.modes_per_class)
        self.class_frequencies = tuple(float(f) for f in self.class_frequencies)
        if self.num_classes < 1 or len(self.class_frequencies) != self.num_classes:
            raise DataError("need one frequency per class")
        if len(self.modes_per_class) != self.num_classes or min(self.modes_per_class) < 1:
            raise DataError("every class needs at least one latent mode")
        if any(f < 0 for f in self.class_frequencies):
            raise DataError("class frequencies must be non-negative")
        if abs(sum(self.class_frequencies) - 1.0) > FREQ_TOL:
            raise DataError(f"class frequencies must sum to 1, got {sum(self.class_frequencies)}")
        if max(self.class_frequencies) < 3.0 * min(self.class_frequencies):
            raise DataError("spec must be imbalanced: max frequency >= 3x min frequency")
        if min(self.height, self.width) < 1 or self.feature_dim < 1:
            raise DataError("image size and feature_dim must be positive")
        if self.mode_noise < 0:
            raise DataError("mode_noise must be >= 0")
        if not 0.0 <= self.image_noise_fraction <= 1.0:
            raise DataError("image_noise_fraction must lie in [0, 1]")
        if self.mode_centers is None:
            rng = np.random.default_rng([self.seed, 1])
            self.mode_centers = rng.normal(size=(self.total_modes, self.feature_dim))
        else:
            self.mode_centers = np.asarray(self.mode_centers, dtype=np.float64)
            if self.mode_centers.shape != (self.total_modes, self.feature_dim):
                raise DataError(f"mode_centers must be {(self.total_modes, self.feature_dim)}, "
                                f"got {self.mode_centers.shape}")

    @property
    def total_modes(self) -> int:
        return sum(self.modes_per_class)

    @property
    def background_class(self) -> int:
        return int(np.argmax(self.class_frequencies))

    def mode_offset(self, cls: int) -> int:
        return sum(self.modes_per_class[:cls])

    def class_of_mode(self) -> np.ndarray:
        """Global mode index -> owning class."""
        return np.repeat(np.arange(self.num_classes), self.modes_per_class)

    def to_json(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "class_frequencies": list(self.class_frequencies),
            "modes_per_class": list(self.modes_per_class),
            "feature_dim": self.feature_dim,
            "mode_noise": self.mode_noise,
            "image_noise_fraction": self.image_noise_fraction,
            "height": self.height,
            "width": self.width,
            "seed": self.seed,
            "mode_centers": self.mode_centers.tolist(),
        }

    @classmethod
    def from_json(cls, payload: dict) -> "SceneSpec":
        known = {"num_classes", "class_frequencies", "modes_per_class", "feature_dim",
                 "mode_noise", "image_noise_fraction", "height", "width", "seed",
                 "mode_centers"}
        unknown = set(payload) - known
        if unknown:
            raise DataError(f"unknown SceneSpec keys: {sorted(unknown)}")
        data = dict(payload)
        if "mode_centers" in data and data["mode_centers"] is not None:
            data["mode_centers"] = np.asarray(data["mode_centers"], dtype=np.float64)
        data["class_frequencies"] = tuple(data["class_frequencies"])
        if isinstance(data.get("modes_per_class"), list):
            data["modes_per_class"] = tuple(data["modes_per_class"])
        return cls(**data)


def default_scene_spec(seed: int = 0) -> SceneSpec:
    return SceneSpec(
        num_classes=len(DEFAULT_FREQUENCIES),
        class_frequencies=DEFAULT_FREQUENCIES,
        modes_per_class=3,
        seed=seed,
    )


@dataclass
class LabeledSample:
    """Feature image plus per-pixel class labels and hidden mode indices."""

    features: FeatureGrid
    labels: LabelGrid
    latent_modes: LabelGrid  # evaluation-only ground truth

    def __post_init__(self) -> None:
        shapes = {self.features.data.shape[:2], self.labels.data.shape, self.latent_modes.data.shape}
        if len(shapes) != 1:
            raise DataError("features, labels and latent modes must share geometry")


def _paint_labels(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    """Rectangle collage: rare classes painted last so their area survives."""
    h, w = spec.height, spec.width
    labels = np.full((h, w), spec.background_class, dtype=np.int64)
    order = sorted(
        (c for c in range(spec.num_classes) if c != spec.background_class),
        key=lambda c: -spec.class_frequencies[c],
    )
    targets = {}
    for c in order:
        freq = spec.class_frequencies[c]
        if freq == 0.0:
            continue
        target = int(round(freq * h * w))
        if target == 0:
            raise GenerationError(f"class {c} frequency {freq} rounds to zero pixels "
                                  f"for a {h}x{w} image")
        targets[c] = target
    # a few top-up rounds compensate pixels overwritten by later rectangles
    for _ in range(4):
        for c in order:
            if c not in targets:
                continue
            attempts = 0
            while int((labels == c).sum()) < targets[c] and attempts < 50:
                deficit = targets[c] - int((labels == c).sum())
                side = max(1.0, np.sqrt(deficit))
                rh = int(np.clip(round(side * rng.uniform(0.7, 1.4)), 1, h))
                rw = int(np.clip(round(deficit / rh * rng.uniform(0.7, 1.4)), 1, w))
                y = int(rng.integers(0, h - rh + 1))
                x = int(rng.integers(0, w - rw + 1))
                labels[y:y + rh, x:x + rw] = c
                attempts += 1
    return labels


def generate(spec: SceneSpec, num_images: int) -> list[LabeledSample]:
    """Seeded dataset of rectangle-collage images with mode-mixture features.

    Aggregate class pixel fractions track spec.class_frequencies (within
    roughly 10% relative over a couple hundred images); per-pixel features are
    center[mode] + Gaussian noise with total std mode_noise, the mode drawn
    uniformly from the pixel's class.

    The noise has two Gaussian components: image_noise_fraction of its
    variance is a single offset drawn once per image and shared by every
    pixel (a sensor or illumination analog), the rest is drawn per pixel.
    Each pixel's marginal noise is N(0, mode_noise^2) either way, but the
    shared component makes individual images coherent "takes" of the scene
    family, so a handful of labelled images cannot cover the full feature
    distribution the way the same pixel count spread over many images would.
    """
    if num_images < 1:
        raise GenerationError("num_images must be >= 1")
    samples = []
    class_of_mode = spec.class_of_mode()
    sigma_img = spec.mode_noise * math.sqrt(spec.image_noise_fraction)
    sigma_px = spec.mode_noise * math.sqrt(1.0 - spec.image_noise_fraction)
    for i in range(num_images):
        rng = np.random.default_rng([spec.seed, 2, i])  # per-image derived seed
        labels = _paint_labels(spec, rng)
        modes = np.zeros_like(labels)
        for c in range(spec.num_classes):
            mask = labels == c
            n = int(mask.sum())
            if n == 0:
                continue
            modes[mask] = spec.mode_offset(c) + rng.integers(0, spec.modes_per_class[c], size=n)
        feats = spec.mode_centers[modes]
        if sigma_img > 0:
            feats = feats + sigma_img * rng.normal(size=(1, 1, spec.feature_dim))
        if sigma_px > 0:
            feats = feats + rng.normal(scale=sigma_px, size=feats.shape)
        samples.append(LabeledSample(
            features=FeatureGrid(feats),
            labels=LabelGrid(labels, spec.num_classes),
            latent_modes=LabelGrid(modes, spec.total_modes),
        ))
        assert np.all(class_of_mode[modes] == labels)
    return samples


@dataclass
class DatasetSplit:
    """Disjoint labelled/unlabelled/eval pools.

    Unlabelled samples keep their labels for evaluation only; training code
    must go through unlabelled_features() and never touch them.
    """

    labelled: list[LabeledSample]
    unlabelled: list[LabeledSample]
    eval: list[LabeledSample]
    split_fraction: float

    def unlabelled_features(self) -> list[FeatureGrid]:
        return [s.features for s in self.unlabelled]

    def content_hash(self) -> str:
        import hashlib

        digest = hashlib.sha256()
        for pool in (self.labelled, self.unlabelled, self.eval):
            for s in pool:
                digest.update(s.features.data.tobytes())
                digest.update(s.labels.data.tobytes())
        return digest.hexdigest()


def split(samples: list[LabeledSample], labelled_fraction: float, seed: int,
          eval_samples: list[LabeledSample] | None = None) -> DatasetSplit:
    """Seeded shuffle-and-partition of a train pool into labelled/unlabelled."""
    if not 0 < labelled_fraction < 1:
        raise DataError(f"labelled_fraction must be in (0, 1), got {labelled_fraction}")
    n = len(samples)
    n_lab = int(round(labelled_fraction * n))
    if n_lab < 1:
        raise DataError(f"fraction {labelled_fraction} of {n} images leaves no labelled data")
    if n_lab >= n:
        raise DataError(f"fraction {labelled_fraction} of {n} images leaves no unlabelled data")
    perm = np.random.default_rng([seed, 3]).permutation(n)
    labelled = [samples[i] for i in perm[:n_lab]]
    unlabelled = [samples[i] for i in perm[n_lab:]]
    return DatasetSplit(labelled, unlabelled, list(eval_samples or []), labelled_fraction)


# ---------------------------------------------------------------------------
# augmentations


@dataclass
class WeakGeometry:
    """Flip + crop-resize, expressed as source index maps (nearest neighbour)."""

    flip: bool
    row_map: np.ndarray
    col_map: np.ndarray


def weak_geometry(height: int, width: int, seed) -> WeakGeometry:
    """Sample flip (p=0.5) and crop scale in [0.8, 1.0] with random origin."""
    rng = np.random.default_rng(seed)
    flip = bool(rng.random() < 0.5)
    scale = rng.uniform(0.8, 1.0)
    ch = max(1, int(round(height * scale)))
    cw = max(1, int(round(width * scale)))
    oy = int(rng.integers(0, height - ch + 1))
    ox = int(rng.integers(0, width - cw + 1))
    row_map = oy + (np.arange(height) * ch // height)
    col_map = ox + (np.arange(width) * cw // width)
    if flip:
        col_map = (width - 1) - col_map
    return WeakGeometry(flip, row_map, col_map)


def apply_geometry(geom: WeakGeometry, data: np.ndarray) -> np.ndarray:
    """Apply the same geometric transform to any (H, W, ...) array."""
    return data[geom.row_map][:, geom.col_map]


def augment_weak(features: FeatureGrid, seed) -> FeatureGrid:
    """Flip/crop/resize a feature grid; use weak_geometry + apply_geometry to
    keep label grids pixel-aligned with the same draw."""
    geom = weak_geometry(features.height, features.width, seed)
    return FeatureGrid(apply_geometry(geom, features.data))


def augment_strong(features: FeatureGrid, seed, *, noise_sigma: float,
                   gain_range: tuple[float, float] = (0.7, 1.3),
                   bias_range: tuple[float, float] = (-0.2, 0.2),
                   blur: bool = True) -> FeatureGrid:
    """Photometric-analog corruption: per-channel affine jitter, additive
    Gaussian noise, then a 3x3 box blur. Geometry is unchanged."""
    rng = np.random.default_rng(seed)
    gains = rng.uniform(*gain_range, size=features.dim)
    biases = rng.uniform(*bias_range, size=features.dim)
    data = features.data * gains + biases
    if noise_sigma > 0:
        data = data + rng.normal(scale=noise_sigma, size=data.shape)
    if blur:
        data = ndimage.uniform_filter(data, size=(3, 3, 1), mode="nearest")
    return FeatureGrid(data)


# ---------------------------------------------------------------------------
# serialization


def save_dataset(samples: list[LabeledSample], path) -> None:
    """Flat binary: magic "USRNDS1", u32 image count, u32 num_classes,
    u32 num_modes, then per image u32 h/w/d + f64 features + i64 labels +
    i64 latent modes (all little-endian)."""
    if not samples:
        raise DataError("refusing to save an empty dataset")
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<III", len(samples), samples[0].labels.num_classes,
                             samples[0].latent_modes.num_classes))
        for s in samples:
            fh.write(struct.pack("<III", s.features.height, s.features.width, s.features.dim))
            fh.write(s.features.data.astype("<f8").tobytes())
            fh.write(s.labels.data.astype("<i8").tobytes())
            fh.write(s.latent_modes.data.astype("<i8").tobytes())


def load_dataset(path) -> list[LabeledSample]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:len(DATASET_MAGIC)] != DATASET_MAGIC:
        raise DataError("bad magic; not a dataset file")
    off = len(DATASET_MAGIC)
    count, num_classes, num_modes = struct.unpack_from("<III", blob, off)
    off += 12
    samples = []
    for _ in range(count):
        h, w, d = struct.unpack_from("<III", blob, off)
        off += 12
        feats = np.frombuffer(blob, dtype="<f8", count=h * w * d, offset=off).reshape(h, w, d).copy()
        off += 8 * h * w * d
        labels = np.frombuffer(blob, dtype="<i8", count=h * w, offset=off).reshape(h, w).copy()
        off += 8 * h * w
        modes = np.frombuffer(blob, dtype="<i8", count=h * w, offset=off).reshape(h, w).copy()
        off += 8 * h * w
        samples.append(LabeledSample(FeatureGrid(feats), LabelGrid(labels, num_classes),
                                     LabelGrid(modes, num_modes)))
    return samples


def save_spec(spec: SceneSpec, path) -> None:
    with open(path, "w") as fh:
        json.dump(spec.to_json(), fh, indent=2)


def load_spec(path) -> SceneSpec:
    with open(path) as fh:
        return SceneSpec.from_json(json.load(fh))
