"""
Deterministic synthetic multi-label scenes with per-class reference masks
"""

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .errors import ChecksumMismatchError, CorruptManifestError
from .seeding import derive_seed

logger = logging.getLogger(__name__)

DATASET_FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"

# vegetation, water, bare soil, built-up, snow/cloud
DEFAULT_PALETTE = (
    ((0.20, 0.60, 0.20), 1.0),
    ((0.15, 0.25, 0.70), 0.5),
    ((0.70, 0.50, 0.30), 0.8),
    ((0.55, 0.55, 0.55), 1.0),
    ((0.85, 0.85, 0.80), 0.3),
)
REGION_SHAPES = ("rectangle", "blob")


def default_signatures(num_classes: int, channels: int, noise_std: float) -> Tuple[List[List[float]], List[float]]:
    """Class spectral means and texture amplitudes for a given geometry"""
    if channels == 3 and num_classes <= len(DEFAULT_PALETTE):
        chosen = DEFAULT_PALETTE[:num_classes]
        return [list(sig) for sig, _ in chosen], [amp for _, amp in chosen]

    rng = np.random.default_rng(derive_seed("palette", num_classes, channels))
    min_distance = max(4.0 * noise_std, 0.25)
    signatures: List[np.ndarray] = []
    for _ in range(10000):
        candidate = rng.uniform(0.1, 0.9, size=channels)
        if all(np.linalg.norm(candidate - s) > min_distance for s in signatures):
            signatures.append(candidate)
            if len(signatures) == num_classes:
                break
    else:
        raise ValueError(f"could not place {num_classes} distinct signatures in {channels} channels")
    return [[float(v) for v in s] for s in signatures], [1.0] * num_classes


@dataclass
class SceneConfig:
    """Container for scene geometry, class palette and noise settings"""
    height: int = 64
    width: int = 64
    channels: int = 3
    num_classes: int = 5
    class_signatures: Optional[List[List[float]]] = None
    texture_amplitudes: Optional[List[float]] = None
    min_regions: int = 1
    max_regions: int = 4
    region_shape: str = "rectangle"
    noise_std: float = 0.05
    single_class_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("scenes need at least 2 classes")
        if self.region_shape not in REGION_SHAPES:
            raise ValueError(f"region shape must be one of {REGION_SHAPES}")
        if not 1 <= self.min_regions <= self.max_regions:
            raise ValueError("need 1 <= min_regions <= max_regions")
        if not 0.0 <= self.single_class_fraction <= 1.0:
            raise ValueError("single_class_fraction must lie in [0, 1]")
        if self.class_signatures is None:
            signatures, amplitudes = default_signatures(self.num_classes, self.channels, self.noise_std)
            self.class_signatures = signatures
            if self.texture_amplitudes is None:
                self.texture_amplitudes = amplitudes
        if self.texture_amplitudes is None:
            self.texture_amplitudes = [1.0] * self.num_classes

        sig = np.asarray(self.class_signatures, dtype=np.float64)
        if sig.shape != (self.num_classes, self.channels):
            raise ValueError(f"signatures shape {sig.shape} != ({self.num_classes}, {self.channels})")
        if len(self.texture_amplitudes) != self.num_classes:
            raise ValueError("one texture amplitude per class required")
        distances = np.linalg.norm(sig[:, None, :] - sig[None, :, :], axis=-1)
        closest = distances[~np.eye(self.num_classes, dtype=bool)].min()
        if closest <= 4 * self.noise_std:
            raise ValueError(f"class signatures too close ({closest:.3f}) for noise std {self.noise_std}")


@dataclass
class Scene:
    """Container for an image [C,H,W], its label vector [L] and masks [L,H,W]"""
    image: np.ndarray
    labels: np.ndarray
    masks: Optional[np.ndarray]
    scene_id: int = 0

    @property
    def is_single_class(self) -> bool:
        return int(self.labels.sum()) == 1


@dataclass
class SceneDataset:
    """Container for a generated or loaded set of scenes"""
    config: SceneConfig
    scenes: List[Scene] = field(default_factory=list)
    has_masks: bool = True

    def __len__(self) -> int:
        return len(self.scenes)

    def images(self) -> np.ndarray:
        return np.stack([s.image for s in self.scenes])

    def labels(self) -> np.ndarray:
        return np.stack([s.labels for s in self.scenes])


def _split_regions(height: int, width: int, count: int, rng: np.random.Generator) -> List[Tuple[int, int, int, int]]:
    # guillotine cuts of the largest rectangle; (top, left, height, width)
    rects = [(0, 0, height, width)]
    while len(rects) < count:
        index = max(range(len(rects)), key=lambda i: rects[i][2] * rects[i][3])
        top, left, h, w = rects[index]
        if max(h, w) < 2:
            break
        if h >= w:
            cut = int(rng.integers(max(1, h // 4), h - max(1, h // 4) + 1)) if h >= 4 else 1
            parts = [(top, left, cut, w), (top + cut, left, h - cut, w)]
        else:
            cut = int(rng.integers(max(1, w // 4), w - max(1, w // 4) + 1)) if w >= 4 else 1
            parts = [(top, left, h, cut), (top, left + cut, h, w - cut)]
        rects[index:index + 1] = parts
    return rects


def _warp_regions(region_map: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    h, w = region_map.shape
    amplitude = max(h, w) / 8.0
    displacement = []
    for _ in range(2):
        field_ = ndimage.gaussian_filter(rng.normal(size=(h, w)), sigma=max(h, w) / 8.0)
        peak = np.abs(field_).max()
        displacement.append(field_ / peak * amplitude if peak > 0 else field_)
    rows, cols = np.mgrid[0:h, 0:w]
    src_r = np.clip(np.rint(rows + displacement[0]), 0, h - 1).astype(int)
    src_c = np.clip(np.rint(cols + displacement[1]), 0, w - 1).astype(int)
    return region_map[src_r, src_c]


def generate_scene(config: SceneConfig, scene_seed: int) -> Scene:
    """Class-signature image plus Gaussian texture noise, clamped to [0,1].

    Deterministic per (config, scene_seed). Pixel values are float32-representable
    so that stored datasets round-trip bitwise.
    """
    rng = np.random.default_rng(derive_seed("scene", config.seed, scene_seed))
    h, w, L = config.height, config.width, config.num_classes

    if rng.random() < config.single_class_fraction:
        rects = [(0, 0, h, w)]
    else:
        count = int(rng.integers(config.min_regions, config.max_regions + 1))
        rects = _split_regions(h, w, count, rng)

    region_map = np.zeros((h, w), dtype=int)
    for index, (top, left, rh, rw) in enumerate(rects):
        region_map[top:top + rh, left:left + rw] = index
    if config.region_shape == "blob" and len(rects) > 1:
        region_map = _warp_regions(region_map, rng)

    region_classes = rng.integers(0, L, size=len(rects))
    class_map = region_classes[region_map]
    masks = (class_map[None, :, :] == np.arange(L)[:, None, None]).astype(np.uint8)
    labels = masks.reshape(L, -1).any(axis=1).astype(np.uint8)

    signatures = np.asarray(config.class_signatures, dtype=np.float64)
    amplitudes = np.asarray(config.texture_amplitudes, dtype=np.float64)
    image = signatures[class_map].transpose(2, 0, 1)
    noise = rng.normal(size=image.shape) * (config.noise_std * amplitudes[class_map])[None, :, :]
    image = np.clip(image + noise, 0.0, 1.0).astype(np.float32).astype(np.float64)
    return Scene(image=image, labels=labels, masks=masks, scene_id=int(scene_seed))


def generate_dataset(config: SceneConfig, n: int, base_seed: int = 0) -> SceneDataset:
    if n < 1:
        raise ValueError(f"dataset size must be >= 1, got {n}")
    scenes = [generate_scene(config, base_seed + i) for i in range(n)]
    logger.info(f"Generated {n} scenes ({sum(s.is_single_class for s in scenes)} single-class)")
    return SceneDataset(config=config, scenes=scenes, has_masks=True)


def dataset_summary(scenes: Sequence[Scene]) -> Dict:
    labels = np.stack([s.labels for s in scenes])
    return {
        "count": len(scenes),
        "class_frequency": [float(v) for v in labels.mean(axis=0)],
        "single_class": int(sum(s.is_single_class for s in scenes)),
    }


def file_sha256(path: Path) -> str:
    sha256_hash = hashlib.sha256()
    with open(path, "rb") as f:
        for byte_block in iter(lambda: f.read(4096), b""):
            sha256_hash.update(byte_block)
    return sha256_hash.hexdigest()


def _sample_name(scene_id: int) -> str:
    return f"sample_{scene_id:06d}.bin"


def save_dataset(dataset: SceneDataset, path: Path, with_masks: bool = True) -> Path:
    """Write manifest.json plus one blob per scene: f4 image, u1 labels, u1 masks"""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    with_masks = with_masks and dataset.has_masks
    entries = []
    for scene in dataset.scenes:
        sample_path = path / _sample_name(scene.scene_id)
        blob = scene.image.astype("<f4").tobytes() + scene.labels.astype("u1").tobytes()
        if with_masks:
            blob += scene.masks.astype("u1").tobytes()
        sample_path.write_bytes(blob)
        entries.append({"file": sample_path.name, "scene_id": scene.scene_id,
                        "sha256": file_sha256(sample_path)})

    manifest = {
        "format_version": DATASET_FORMAT_VERSION,
        "config": asdict(dataset.config),
        "count": len(entries),
        "has_masks": with_masks,
        "samples": entries,
    }
    (path / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    logger.info(f"Saved {len(entries)} scenes to {path}")
    return path


def load_dataset(path: Path) -> SceneDataset:
    path = Path(path)
    manifest_path = path / MANIFEST_NAME
    try:
        manifest = json.loads(manifest_path.read_text())
        config = SceneConfig(**manifest["config"])
        has_masks = bool(manifest["has_masks"])
        entries = manifest["samples"]
        if manifest.get("format_version") != DATASET_FORMAT_VERSION or len(entries) != manifest["count"]:
            raise CorruptManifestError(f"inconsistent manifest in {path}")
    except FileNotFoundError:
        raise CorruptManifestError(f"no manifest at {manifest_path}")
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise CorruptManifestError(f"malformed manifest {manifest_path}: {e}")

    c, h, w, L = config.channels, config.height, config.width, config.num_classes
    image_bytes, label_bytes = c * h * w * 4, L
    expected = image_bytes + label_bytes + (L * h * w if has_masks else 0)

    scenes = []
    for entry in entries:
        sample_path = path / entry["file"]
        if not sample_path.is_file():
            raise CorruptManifestError(f"manifest references missing sample {sample_path.name}")
        if file_sha256(sample_path) != entry["sha256"]:
            raise ChecksumMismatchError(f"checksum mismatch for {sample_path.name}")
        blob = sample_path.read_bytes()
        if len(blob) != expected:
            raise CorruptManifestError(f"{sample_path.name} has {len(blob)} bytes, expected {expected}")
        image = np.frombuffer(blob, dtype="<f4", count=c * h * w).astype(np.float64).reshape(c, h, w)
        labels = np.frombuffer(blob, dtype="u1", count=L, offset=image_bytes).copy()
        masks = None
        if has_masks:
            masks = np.frombuffer(blob, dtype="u1", offset=image_bytes + label_bytes).copy().reshape(L, h, w)
        scenes.append(Scene(image=image, labels=labels, masks=masks, scene_id=int(entry["scene_id"])))

    logger.info(f"Loaded {len(scenes)} scenes from {path}")
    return SceneDataset(config=config, scenes=scenes, has_masks=has_masks)
