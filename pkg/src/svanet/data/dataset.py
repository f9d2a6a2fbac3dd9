"""Directory-backed segmentation datasets and deterministic batching."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from ..core import ConfigurationError, Rng
from .area import ObjectRecord, object_records, read_manifest, read_mask
from .augment import AugmentConfig, augment, crop

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


@dataclass
class SegmentationSample:
    image_id: str
    image: np.ndarray  # (3, H, W) float32 in [0, 1]
    mask: np.ndarray   # (H, W) int64 class indices

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise ConfigurationError(f"{self.image_id}: image must be (3, H, W), got {self.image.shape}")
        if self.mask.shape != self.image.shape[1:]:
            raise ConfigurationError(f"{self.image_id}: mask {self.mask.shape} vs image {self.image.shape[1:]}")


def read_image(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1).copy()


class SegmentationDataset:
    """``images/<id>.<ext>`` paired with ``masks/<id>.png``, loaded eagerly."""

    def __init__(self, root, num_classes: int):
        self.root = Path(root)
        if not (self.root / "images").is_dir() or not (self.root / "masks").is_dir():
            raise FileNotFoundError(f"{self.root}: expected images/ and masks/ subdirectories")
        self.num_classes = num_classes
        self.samples: list[SegmentationSample] = []
        images = {p.stem: p for p in sorted((self.root / "images").iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES}
        for image_id, path in images.items():
            mpath = self.root / "masks" / f"{image_id}.png"
            if not mpath.exists():
                raise FileNotFoundError(f"{image_id}: missing mask {mpath}")
            mask = read_mask(mpath)
            if mask.max(initial=0) >= num_classes:
                raise ConfigurationError(f"{image_id}: mask label {mask.max()} >= num_classes {num_classes}")
            self.samples.append(SegmentationSample(image_id, read_image(path), mask))
        manifest = self.root / "manifest.jsonl"
        if manifest.exists():
            self.records = read_manifest(manifest)
        else:
            self.records = [r for s in self.samples for r in object_records(s.mask, s.image_id, num_classes)]

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, i: int) -> SegmentationSample:
        return self.samples[i]

    def records_for(self, image_id: str) -> list[ObjectRecord]:
        return [r for r in self.records if r.image_id == image_id]


def iterate_batches(dataset, batch_size: int, rng: Rng | None = None, augment_cfg: AugmentConfig | None = None,
                    crop_size: int | None = None, drop_last: bool = False):
    """Yield ``(images, masks, ids)`` arrays.

    With an rng the order is a seeded permutation and augmentation draws from
    a per-sample stream, so delivery depends only on the rng path.
    """
    n = len(dataset)
    order = rng.stream("order").permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        if drop_last and len(idx) < batch_size:
            break
        images, masks, ids = [], [], []
        for i in idx:
            s = dataset[int(i)]
            img, msk = s.image, s.mask
            if augment_cfg is not None and rng is not None:
                img, msk = augment(img, msk, rng.stream(f"augment/{s.image_id}"), augment_cfg)
            elif crop_size is not None and img.shape[1:] != (crop_size, crop_size):
                img, msk = crop(img, msk, crop_size, None)
            images.append(img)
            masks.append(msk)
            ids.append(s.image_id)
        yield np.stack(images).astype(np.float32), np.stack(masks).astype(np.int64), ids
