"""Stage one: slide -> representative-patch mosaic -> feature bag.

A slide is a grid of RGB patches. Non-tissue patches are dropped with a
colour threshold, the survivors are clustered on a cheap colour summary,
and a fixed fraction of each cluster is sampled to form the mosaic. An
encoder then maps the mosaic's patches to the feature vectors of a bag.
"""

from __future__ import annotations

import re
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import EmptySlideError, ShapeError
from .hencoder import HierarchicalLabel

#: a pixel counts as tissue when it is dark enough and saturated enough
BRIGHTNESS_LIMIT = 0.8
SATURATION_FLOOR = 0.05

#: default fraction of tissue pixels required for a patch to count as tissue
DEFAULT_TISSUE_THRESHOLD = 0.5
#: stricter proxy for an external cellularity filter; not a reproduction of it
STRICT_TISSUE_THRESHOLD = 0.7

DEFAULT_CLUSTERS = 9
DEFAULT_FRACTION = 0.10


@dataclass
class Patch:
    pixels: np.ndarray  # (H, W, 3) uint8
    grid_row: int
    grid_col: int
    slide_id: str


@dataclass
class Mosaic:
    slide_id: str
    selected: list[Patch]
    cluster_of: list[int]  # cluster index of selected[i]
    k: int
    fraction: float


@dataclass
class Bag:
    """The MIL unit: an unordered set of feature vectors with one label."""

    slide_id: str
    features: np.ndarray  # (n, d) float64
    label: HierarchicalLabel | None = None
    coords: np.ndarray | None = None  # (n, 2) int32 grid rows/cols, mosaic provenance

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] == 0:
            raise ShapeError("a bag needs a non-empty (n, d) feature matrix")
        if self.coords is not None:
            self.coords = np.asarray(self.coords, dtype=np.int32)
            if self.coords.shape != (self.features.shape[0], 2):
                raise ShapeError("coords must be (n, 2)")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


def tissue_mask(patch: Patch, threshold: float = DEFAULT_TISSUE_THRESHOLD) -> tuple[bool, float]:
    """Classify a patch as tissue and report its tissue-pixel fraction."""
    pixels = np.asarray(patch.pixels)
    if pixels.ndim != 3 or pixels.shape[2] != 3 or pixels.shape[0] == 0 or pixels.shape[1] == 0:
        raise ShapeError(f"expected non-empty (H, W, 3) pixels, got {pixels.shape}")
    values = pixels.astype(np.float64) / 255.0
    brightness = values.mean(axis=2)
    saturation = values.max(axis=2) - values.min(axis=2)
    tissue = (brightness < BRIGHTNESS_LIMIT) & (saturation > SATURATION_FLOOR)
    ratio = float(tissue.mean())
    return ratio >= threshold, ratio


# ---------------------------------------------------------------------------
# clustering


def within_cluster_variance(points: np.ndarray, assignments: np.ndarray, k: int) -> float:
    """Sum of squared distances to each cluster's own mean."""
    total = 0.0
    for j in range(k):
        members = points[assignments == j]
        if members.shape[0]:
            total += float(((members - members.mean(axis=0)) ** 2).sum())
    return total


def kmeans_full(
    points: np.ndarray, k: int, seed: int, max_iter: int = 100
) -> tuple[np.ndarray, np.ndarray, list[float]]:
    """Seeded Lloyd iterations; returns (assignments, centers, variance history).

    Initial centers are k distinct random points. An empty cluster is
    reseeded to the point farthest from its current center (and that point
    is reassigned to it), so every cluster is non-empty on return.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[0] == 0:
        raise ValueError("points must be a non-empty (n, d) array")
    n = points.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    rng = np.random.default_rng(seed)
    centers = points[rng.choice(n, size=k, replace=False)].copy()

    assignments = np.zeros(n, dtype=np.int64)
    history: list[float] = []
    previous = None
    for _ in range(max_iter):
        d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        assignments = d2.argmin(axis=1)
        current = d2[np.arange(n), assignments]
        for j in range(k):
            if not (assignments == j).any():
                i = int(current.argmax())
                centers[j] = points[i]
                assignments[i] = j
                current[i] = 0.0
        history.append(within_cluster_variance(points, assignments, k))
        if previous is not None and np.array_equal(assignments, previous):
            break
        previous = assignments.copy()
        centers = np.stack([points[assignments == j].mean(axis=0) for j in range(k)])
    return assignments, centers, history


def kmeans(points: np.ndarray, k: int, seed: int, max_iter: int = 100) -> np.ndarray:
    assignments, _, _ = kmeans_full(points, k, seed, max_iter)
    return assignments


# ---------------------------------------------------------------------------
# mosaic selection


def color_summary(patch: Patch) -> np.ndarray:
    """9-dim clustering feature: mean RGB over a 3-band vertical split."""
    values = np.asarray(patch.pixels, dtype=np.float64) / 255.0
    return np.concatenate([band.mean(axis=(0, 1)) for band in np.array_split(values, 3, axis=0)])


def select_mosaic(
    patches: Sequence[Patch],
    feature_fn: Callable[[Patch], np.ndarray] | None = None,
    k: int = DEFAULT_CLUSTERS,
    fraction: float = DEFAULT_FRACTION,
    seed: int = 0,
    tissue_threshold: float = DEFAULT_TISSUE_THRESHOLD,
) -> Mosaic:
    """Cluster the tissue patches and sample a fraction of each cluster.

    Per cluster, max(1, round(fraction * size)) patches are drawn without
    replacement, so small clusters are never dropped. k is clamped to the
    tissue-patch count.
    """
    if not patches:
        raise EmptySlideError("no patches given")
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    if k < 1:
        raise ValueError("k must be >= 1")
    feature_fn = feature_fn or color_summary

    tissue = [p for p in patches if tissue_mask(p, tissue_threshold)[0]]
    if not tissue:
        raise EmptySlideError(f"no tissue patches above threshold {tissue_threshold}")

    k_eff = min(k, len(tissue))
    feats = np.stack([np.asarray(feature_fn(p), dtype=np.float64) for p in tissue])
    assignments = kmeans(feats, k_eff, seed=seed)

    rng = np.random.default_rng(seed)
    selected: list[Patch] = []
    cluster_of: list[int] = []
    for j in range(k_eff):
        members = np.flatnonzero(assignments == j)
        take = max(1, round(fraction * members.shape[0]))
        chosen = np.sort(rng.choice(members, size=take, replace=False))
        for i in chosen:
            selected.append(tissue[int(i)])
            cluster_of.append(j)
    return Mosaic(
        slide_id=patches[0].slide_id,
        selected=selected,
        cluster_of=cluster_of,
        k=k_eff,
        fraction=fraction,
    )


def build_bag(
    mosaic: Mosaic,
    encoder: Callable[[Patch], np.ndarray],
    label: HierarchicalLabel | None = None,
) -> Bag:
    """Encode each mosaic patch; row order mirrors the mosaic but is meaningless."""
    if not mosaic.selected:
        raise EmptySlideError("mosaic is empty")
    rows = []
    dim = None
    for patch in mosaic.selected:
        vec = np.asarray(encoder(patch), dtype=np.float64).reshape(-1)
        if dim is None:
            dim = vec.shape[0]
        elif vec.shape[0] != dim:
            raise ShapeError(f"encoder output drifted from {dim} to {vec.shape[0]}")
        rows.append(vec)
    coords = np.array([[p.grid_row, p.grid_col] for p in mosaic.selected], dtype=np.int32)
    return Bag(slide_id=mosaic.slide_id, features=np.stack(rows), label=label, coords=coords)


# ---------------------------------------------------------------------------
# bag files
#
# Layout (little-endian):
#   magic b"FMBG", u32 version=1,
#   u16 slide_id length, slide_id utf-8,
#   u32 n, u32 d, i32 site, i32 diagnosis (-1/-1 when unlabeled),
#   u8 has_coords, [n * (i32 row, i32 col) when has_coords],
#   n*d float64 features, row-major.

BAG_MAGIC = b"FMBG"
BAG_VERSION = 1


def save_bag(path, bag: Bag) -> None:
    sid = bag.slide_id.encode("utf-8")
    site = bag.label.site if bag.label else -1
    diagnosis = bag.label.diagnosis if bag.label else -1
    with open(path, "wb") as fh:
        fh.write(BAG_MAGIC)
        fh.write(struct.pack("<IH", BAG_VERSION, len(sid)))
        fh.write(sid)
        fh.write(struct.pack("<IIiiB", len(bag), bag.dim, site, diagnosis, int(bag.coords is not None)))
        if bag.coords is not None:
            fh.write(np.ascontiguousarray(bag.coords, dtype="<i4").tobytes())
        fh.write(np.ascontiguousarray(bag.features, dtype="<f8").tobytes())


def load_bag(path) -> Bag:
    data = Path(path).read_bytes()
    if data[:4] != BAG_MAGIC:
        raise ValueError(f"{path}: not a bag file (bad magic)")
    version, sid_len = struct.unpack("<IH", data[4:10])
    if version != BAG_VERSION:
        raise ValueError(f"{path}: unsupported bag version {version}")
    offset = 10
    slide_id = data[offset : offset + sid_len].decode("utf-8")
    offset += sid_len
    n, d, site, diagnosis, has_coords = struct.unpack("<IIiiB", data[offset : offset + 17])
    offset += 17
    coords = None
    if has_coords:
        coords = np.frombuffer(data, dtype="<i4", count=n * 2, offset=offset).reshape(n, 2).copy()
        offset += n * 8
    features = np.frombuffer(data, dtype="<f8", count=n * d, offset=offset).reshape(n, d).copy()
    offset += n * d * 8
    if offset != len(data):
        raise ShapeError(f"{path}: {len(data) - offset} trailing bytes")
    label = None if site < 0 else HierarchicalLabel(site=site, diagnosis=diagnosis)
    return Bag(slide_id=slide_id, features=features, label=label, coords=coords)


# ---------------------------------------------------------------------------
# slide directories: patch files named r{row}_c{col}.png (or .ppm)

_PATCH_NAME = re.compile(r"^r(\d+)_c(\d+)\.(png|ppm)$")


def load_slide_dir(path) -> list[Patch]:
    from PIL import Image

    path = Path(path)
    patches = []
    for entry in sorted(path.iterdir()):
        m = _PATCH_NAME.match(entry.name)
        if not m:
            continue
        pixels = np.asarray(Image.open(entry).convert("RGB"))
        patches.append(
            Patch(pixels=pixels, grid_row=int(m.group(1)), grid_col=int(m.group(2)), slide_id=path.name)
        )
    if not patches:
        raise EmptySlideError(f"{path}: no patch files matching r<row>_c<col>.png/.ppm")
    return patches


def save_patch_image(path, pixels: np.ndarray) -> None:
    from PIL import Image

    Image.fromarray(np.asarray(pixels, dtype=np.uint8)).save(path)
