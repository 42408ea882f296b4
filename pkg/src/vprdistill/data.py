"""Place-labelled datasets: manifests, P-x-K batch sampling, synthetic data.

A manifest is a headerless CSV with one image per line:

    image_ref, place_id, coord_system, c1, c2

coord_system is "utm" (planar metres: easting, northing) or "wgs84"
(latitude, longitude in degrees). Training batches group P distinct places
with K distinct images each, so every anchor sees K-1 positives.
"""

from __future__ import annotations

import csv
import os
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch

from .backbone import SmallViT, load_precomputed, write_feature_archive
from .errors import FormatError, ValidationError
from .fusion import stack_token_maps

COORD_SYSTEMS = ("utm", "wgs84")


@dataclass(frozen=True)
class PlaceRecord:
    image_ref: str
    place_id: int
    coord_system: str
    c1: float
    c2: float


@dataclass
class PlaceDataset:
    records: list[PlaceRecord]
    images: dict[str, torch.Tensor] | None = None  # in-memory synthetic images
    by_place: dict[int, list[PlaceRecord]] = field(init=False)

    def __post_init__(self):
        self.by_place = {}
        for rec in self.records:
            self.by_place.setdefault(rec.place_id, []).append(rec)

    def __len__(self):
        return len(self.records)

    def eligible_places(self, k: int) -> list[int]:
        """Place ids with at least k images, ascending."""
        return sorted(pid for pid, recs in self.by_place.items() if len(recs) >= k)

    def record(self, image_ref: str) -> PlaceRecord:
        for rec in self.records:
            if rec.image_ref == image_ref:
                return rec
        raise KeyError(image_ref)


@dataclass
class PlaceBatch:
    records: list[PlaceRecord]
    labels: torch.Tensor  # (B,) long place ids


def load_manifest(path) -> PlaceDataset:
    records = []
    seen = set()
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != 5:
                raise FormatError(f"{path}:{lineno}: expected 5 fields, got {len(row)}")
            image_ref = row[0].strip()
            if image_ref in seen:
                raise FormatError(f"{path}:{lineno}: duplicate image_ref {image_ref!r}")
            seen.add(image_ref)
            system = row[2].strip()
            if system not in COORD_SYSTEMS:
                raise FormatError(f"{path}:{lineno}: unknown coord_system {system!r}")
            try:
                place_id = int(row[1])
                c1, c2 = float(row[3]), float(row[4])
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: malformed numeric field ({exc})") from None
            if not (np.isfinite(c1) and np.isfinite(c2)):
                raise FormatError(f"{path}:{lineno}: non-finite coordinate")
            records.append(PlaceRecord(image_ref, place_id, system, c1, c2))
    return PlaceDataset(records)


def save_manifest(path, dataset: PlaceDataset) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for rec in dataset.records:
            writer.writerow([rec.image_ref, rec.place_id, rec.coord_system,
                             repr(float(rec.c1)), repr(float(rec.c2))])


def sample_batch(dataset: PlaceDataset, p: int, k: int, rng: np.random.Generator) -> PlaceBatch:
    """Sample P distinct places, K distinct images each, place-major order."""
    if p < 1 or k < 1:
        raise ValidationError("P and K must be positive")
    eligible = dataset.eligible_places(k)
    excluded = len(dataset.by_place) - len(eligible)
    if excluded:
        warnings.warn(f"{excluded} place(s) have fewer than {k} images and are excluded "
                      "from training sampling")
    if p > len(eligible):
        raise ValueError(f"cannot sample {p} places: only {len(eligible)} have >= {k} images")
    chosen = rng.choice(np.asarray(eligible), size=p, replace=False)
    records = []
    for pid in chosen:
        recs = dataset.by_place[int(pid)]
        picks = rng.choice(len(recs), size=k, replace=False)
        records.extend(recs[i] for i in picks)
    labels = torch.tensor([rec.place_id for rec in records], dtype=torch.long)
    return PlaceBatch(records, labels)


def epoch_batches(dataset: PlaceDataset, p: int, k: int, rng: np.random.Generator) -> list[PlaceBatch]:
    """One epoch: every eligible place appears in at most one batch."""
    eligible = dataset.eligible_places(k)
    if p > len(eligible):
        raise ValueError(f"cannot sample {p} places: only {len(eligible)} have >= {k} images")
    order = rng.permutation(np.asarray(eligible))
    batches = []
    for start in range(0, len(order) - p + 1, p):
        chunk = order[start:start + p]
        records = []
        for pid in chunk:
            recs = dataset.by_place[int(pid)]
            picks = rng.choice(len(recs), size=k, replace=False)
            records.extend(recs[i] for i in picks)
        labels = torch.tensor([rec.place_id for rec in records], dtype=torch.long)
        batches.append(PlaceBatch(records, labels))
    return batches


def generate_synthetic(seed: int, n_places: int = 16, per_place: int = 6,
                       noise: float = 0.08, drift: int = 2,
                       image_size: int = 56) -> PlaceDataset:
    """Synthetic place dataset with in-memory images.

    Each place is a random blocky pattern; its images are that pattern under
    a brightness shift and pixel noise (both scaled by ``noise``) and an
    integer circular shift of at most ``drift`` pixels per axis. Place
    centres sit on a 200 m UTM grid; within-place jitter stays under 5 m.
    """
    if n_places < 1 or per_place < 1:
        raise ValidationError("n_places and per_place must be positive")
    if noise < 0 or drift < 0:
        raise ValidationError("noise and drift must be non-negative")
    if image_size % 4 != 0:
        raise ValidationError("synthetic image_size must be divisible by 4")
    rng = np.random.default_rng(seed)
    grid = int(np.ceil(np.sqrt(n_places)))
    records, images = [], {}
    for place in range(n_places):
        base = rng.normal(0.5, 0.25, size=(3, image_size // 4, image_size // 4))
        pattern = np.kron(base, np.ones((1, 4, 4)))
        east0 = 500000.0 + 200.0 * (place % grid)
        north0 = 4000000.0 + 200.0 * (place // grid)
        for i in range(per_place):
            img = pattern.copy()
            dx, dy = rng.integers(-drift, drift + 1, size=2)
            img = np.roll(img, (int(dx), int(dy)), axis=(1, 2))
            img = img + rng.normal(0.0, 0.5) * noise
            img = img + rng.normal(0.0, 1.0, size=img.shape) * noise
            jitter = rng.uniform(-1.7, 1.7, size=2)
            ref = f"p{place:03d}_i{i}"
            records.append(PlaceRecord(ref, place, "utm",
                                       float(east0 + jitter[0]), float(north0 + jitter[1])))
            images[ref] = torch.from_numpy(img.astype(np.float32))
    return PlaceDataset(records, images=images)


def export_features(dataset: PlaceDataset, backbone: SmallViT, out_dir,
                    layer_indices=None) -> tuple[str, str]:
    """Write manifest.csv and a feature archive for every dataset image."""
    if dataset.images is None:
        raise ValidationError("dataset has no in-memory images to export")
    layers = layer_indices or list(range(1, backbone.cfg.depth + 1))
    os.makedirs(out_dir, exist_ok=True)
    archive_dir = os.path.join(out_dir, "features")
    for rec in dataset.records:
        maps = backbone.forward_tokens(dataset.images[rec.image_ref], layers)
        write_feature_archive(archive_dir, rec.image_ref, maps)
    manifest_path = os.path.join(out_dir, "manifest.csv")
    save_manifest(manifest_path, dataset)
    return manifest_path, archive_dir


class ArchiveFeatureSource:
    """Stacked fusion inputs read from a feature archive, cached in memory."""

    def __init__(self, archive_dir, layer_indices, expected_shape=None):
        self.archive_dir = archive_dir
        self.layer_indices = list(layer_indices)
        self.expected_shape = expected_shape
        self._cache: dict[str, list] = {}

    def maps(self, image_ref: str):
        if image_ref not in self._cache:
            self._cache[image_ref] = load_precomputed(
                self.archive_dir, image_ref, self.layer_indices, self.expected_shape)
        return self._cache[image_ref]

    def stack(self, records: list[PlaceRecord]) -> torch.Tensor:
        return stack_token_maps([self.maps(rec.image_ref) for rec in records])


class BackboneFeatureSource:
    """Stacked fusion inputs computed from in-memory images, cached."""

    def __init__(self, backbone: SmallViT, dataset: PlaceDataset, layer_indices):
        if dataset.images is None:
            raise ValidationError("dataset has no in-memory images")
        self.backbone = backbone
        self.dataset = dataset
        self.layer_indices = list(layer_indices)
        self._cache: dict[str, list] = {}

    def maps(self, image_ref: str):
        if image_ref not in self._cache:
            image = self.dataset.images[image_ref]
            self._cache[image_ref] = self.backbone.forward_tokens(image, self.layer_indices)
        return self._cache[image_ref]

    def stack(self, records: list[PlaceRecord]) -> torch.Tensor:
        return stack_token_maps([self.maps(rec.image_ref) for rec in records])
