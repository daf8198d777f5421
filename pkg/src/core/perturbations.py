"""
Input perturbation machinery shared by attribution methods and metrics:
baselines, masking, pixel orderings, segmentations and input noise.
"""

import logging
import math
from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np
from sklearn.cluster import KMeans

from .errors import BaselineSpecError, ShapeMismatchError

logger = logging.getLogger(__name__)

BASELINE_KINDS = ("black", "mean", "uniform_random", "constant")
STRATEGIES = ("morf", "lerf")
SLIC_COLOR_SCALE = 100.0


@dataclass(frozen=True)
class BaselineSpec:
    """Container for the value substituted into removed pixels"""
    kind: str = "black"
    constant_value: Optional[float] = None
    seed: Optional[int] = None

    def __post_init__(self):
        if self.kind not in BASELINE_KINDS:
            raise BaselineSpecError(f"unknown baseline kind '{self.kind}', expected one of {BASELINE_KINDS}")
        if (self.kind == "constant") != (self.constant_value is not None):
            raise BaselineSpecError("constant_value is required for, and only for, the constant baseline")

    @classmethod
    def parse(cls, text: str, seed: Optional[int] = None) -> "BaselineSpec":
        """'black', 'mean', 'uniform' / 'uniform_random' or 'constant:<value>'"""
        if text.startswith("constant:"):
            return cls("constant", float(text.split(":", 1)[1]))
        if text == "uniform":
            text = "uniform_random"
        return cls(text, seed=seed if text == "uniform_random" else None)


@dataclass(frozen=True)
class PixelOrdering:
    """Container for a permutation of flat pixel indices"""
    order: np.ndarray
    strategy: str


@dataclass(frozen=True, eq=False)
class Segmentation:
    """Container for an exhaustive segment id map [H,W] with ids in [0, count)"""
    segment_id: np.ndarray
    count: int

    def __post_init__(self):
        occupied = np.unique(self.segment_id)
        if occupied.size != self.count or occupied[0] != 0 or occupied[-1] != self.count - 1:
            raise ValueError(f"segment ids are not exactly 0..{self.count - 1}")

    def masks(self) -> np.ndarray:
        """Boolean masks [count, H, W], one per segment"""
        return self.segment_id[None, :, :] == np.arange(self.count)[:, None, None]


def resolve_baseline(spec: BaselineSpec, x: np.ndarray) -> np.ndarray:
    """Per-channel vector [C], or per-pixel field [C,H,W] for uniform_random"""
    c = x.shape[0]
    if spec.kind == "black":
        return np.zeros(c)
    if spec.kind == "mean":
        return x.reshape(c, -1).mean(axis=1)
    if spec.kind == "constant":
        return np.full(c, float(spec.constant_value))
    rng = np.random.default_rng(spec.seed if spec.seed is not None else 0)
    return rng.uniform(0.0, 1.0, size=x.shape)


def baseline_image(spec: BaselineSpec, x: np.ndarray) -> np.ndarray:
    return _expand(resolve_baseline(spec, x), x.shape)


def _expand(baseline: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    baseline = np.asarray(baseline, dtype=np.float64)
    if baseline.ndim == 1:
        baseline = baseline[:, None, None]
    return np.broadcast_to(baseline, shape)


def apply_mask(x: np.ndarray, mask: np.ndarray, baseline: Union[np.ndarray, float]) -> np.ndarray:
    """Replace masked pixels across all channels by the baseline.

    `mask` is [H,W] (result [C,H,W]) or a stack [N,H,W] (result [N,C,H,W]).
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape[-2:] != x.shape[-2:]:
        raise ShapeMismatchError(f"mask {mask.shape} does not match image {x.shape}")
    if np.ndim(baseline) == 0:
        base = np.broadcast_to(float(baseline), x.shape)
    else:
        base = _expand(baseline, x.shape)
    if mask.ndim == 2:
        return np.where(mask[None, :, :], base, x)
    return np.where(mask[:, None, :, :], base[None], x[None])


def rank_pixels(attr, strategy: str) -> PixelOrdering:
    """Stable ordering of flat pixel indices; ties keep row-major order"""
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy '{strategy}'")
    values = np.asarray(getattr(attr, "values", attr), dtype=np.float64).ravel()
    keys = -values if strategy == "morf" else values
    return PixelOrdering(order=np.argsort(keys, kind="stable"), strategy=strategy)


def segment_grid(height: int, width: int, gh: int, gw: int) -> Segmentation:
    """gh x gw rectangular tiles; the last tile row and column absorb remainders"""
    if not (1 <= gh <= height and 1 <= gw <= width):
        raise ValueError(f"grid {gh}x{gw} does not fit {height}x{width}")
    rows = np.minimum(np.arange(height) // (height // gh), gh - 1)
    cols = np.minimum(np.arange(width) // (width // gw), gw - 1)
    return Segmentation(rows[:, None] * gw + cols[None, :], gh * gw)


def grid_shape(height: int, width: int, segments: int) -> Tuple[int, int]:
    """Factor pair gh*gw == segments whose tile aspect is closest to square"""
    best = None
    for gh in range(1, segments + 1):
        if segments % gh:
            continue
        gw = segments // gh
        if gh > height or gw > width:
            continue
        score = abs(math.log((height / gh) / (width / gw)))
        if best is None or score < best[0] - 1e-12:
            best = (score, gh, gw)
    if best is None:
        side = max(1, min(height, width, int(math.sqrt(segments))))
        return side, side
    return best[1], best[2]


def _relabel_by_first_appearance(labels: np.ndarray) -> Tuple[np.ndarray, int]:
    _, first, inverse = np.unique(labels.ravel(), return_index=True, return_inverse=True)
    rank = np.argsort(np.argsort(first))
    return rank[inverse].reshape(labels.shape), int(first.size)


def segment_slic_like(x: np.ndarray, segments: int, compactness: float = 10.0,
                      iterations: int = 10, seed: int = 0) -> Segmentation:
    """k-means superpixels over (color, scaled xy) features, seeded from a grid"""
    c, h, w = x.shape
    if not 1 <= segments <= h * w:
        raise ValueError(f"segment count {segments} outside [1, {h * w}]")
    gh, gw = grid_shape(h, w, segments)
    grid = segment_grid(h, w, gh, gw)

    spacing = math.sqrt(h * w / (gh * gw))
    rows, cols = np.mgrid[0:h, 0:w]
    features = np.concatenate([
        x.reshape(c, -1).T * SLIC_COLOR_SCALE,
        np.stack([rows.ravel(), cols.ravel()], axis=1) * (compactness / spacing),
    ], axis=1)
    tiles = grid.segment_id.ravel()
    centroids = np.stack([features[tiles == k].mean(axis=0) for k in range(grid.count)])

    kmeans = KMeans(n_clusters=grid.count, init=centroids, n_init=1, max_iter=iterations,
                    random_state=seed % 2**32, algorithm="lloyd")
    labels = kmeans.fit_predict(features).reshape(h, w)
    labels, count = _relabel_by_first_appearance(labels)
    if count < segments:
        logger.warning(f"SLIC-like segmentation produced {count} of {segments} requested segments")
    return Segmentation(labels, count)


def gaussian_input_noise(x: np.ndarray, std: float, seed: int) -> np.ndarray:
    """x + N(0, std^2) i.i.d., clamped to [0,1]"""
    if std < 0:
        raise ValueError(f"noise std must be >= 0, got {std}")
    if std == 0:
        return x.copy()
    rng = np.random.default_rng(seed)
    return np.clip(x + rng.normal(0.0, std, size=x.shape), 0.0, 1.0)


def uniform_ball_noise(x: np.ndarray, eps: float, seed: int) -> np.ndarray:
    """x + U(-eps, eps) i.i.d. per pixel, clamped to [0,1]"""
    if eps < 0:
        raise ValueError(f"noise radius must be >= 0, got {eps}")
    rng = np.random.default_rng(seed)
    return np.clip(x + rng.uniform(-eps, eps, size=x.shape), 0.0, 1.0)
