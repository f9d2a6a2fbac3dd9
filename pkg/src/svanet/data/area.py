"""Per-object area ratios and size buckets from index masks."""

from __future__ import annotations

import enum
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


class SizeBucket(str, enum.Enum):
    ULTRA_SMALL = "UltraSmall"
    SMALL = "Small"
    ALL = "All"

    @property
    def threshold(self) -> float:
        return {"UltraSmall": 0.01, "Small": 0.10, "All": 1.0}[self.value]

    def contains(self, ratio: float) -> bool:
        """Buckets are cumulative: UltraSmall is inside Small is inside All."""
        if self is SizeBucket.ALL:
            return ratio <= 1.0
        return ratio < self.threshold


BUCKETS = (SizeBucket.ULTRA_SMALL, SizeBucket.SMALL, SizeBucket.ALL)


def bucket_of(ratio: float) -> SizeBucket:
    """The tightest bucket holding ``ratio``."""
    for b in BUCKETS:
        if b.contains(ratio):
            return b
    raise ValueError(f"area ratio {ratio} outside (0, 1]")


@dataclass(frozen=True)
class ObjectRecord:
    image_id: str
    class_id: int
    pixels: int
    ratio: float
    bucket: str

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ObjectRecord":
        return cls(str(d["image_id"]), int(d["class_id"]), int(d["pixels"]), float(d["ratio"]), str(d["bucket"]))


def components(mask: np.ndarray, class_id: int) -> tuple[np.ndarray, int]:
    """8-connected component labels of one class."""
    return ndimage.label(mask == class_id, structure=EIGHT_CONNECTED)


def object_records(mask: np.ndarray, image_id: str, num_classes: int | None = None) -> list[ObjectRecord]:
    mask = np.asarray(mask)
    total = mask.size
    classes = range(1, num_classes) if num_classes is not None else [int(c) for c in np.unique(mask) if c > 0]
    records = []
    for c in classes:
        labels, count = components(mask, c)
        if not count:
            continue
        sizes = np.bincount(labels.ravel(), minlength=count + 1)[1:]
        for px in sizes:
            ratio = int(px) / total
            records.append(ObjectRecord(image_id, int(c), int(px), ratio, bucket_of(ratio).value))
    return records


@dataclass
class AreaReport:
    records: list[ObjectRecord] = field(default_factory=list)
    errors: list[dict] = field(default_factory=list)
    num_classes: int = 2

    def histogram(self) -> dict[int, dict[str, int]]:
        """Cumulative object counts per foreground class and bucket."""
        hist = {c: {b.value: 0 for b in BUCKETS} for c in range(1, self.num_classes)}
        for r in self.records:
            row = hist.setdefault(r.class_id, {b.value: 0 for b in BUCKETS})
            for b in BUCKETS:
                if b.contains(r.ratio):
                    row[b.value] += 1
        return hist

    def table(self) -> str:
        head = f"{'class':>5}  " + "  ".join(f"{b.value:>10}" for b in BUCKETS)
        lines = [head]
        for c, row in sorted(self.histogram().items()):
            lines.append(f"{c:>5}  " + "  ".join(f"{row[b.value]:>10}" for b in BUCKETS))
        if self.errors:
            lines.append(f"errors: {len(self.errors)}")
        return "\n".join(lines)


def read_mask(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("L", "P", "I", "I;16"):
            raise ValueError(f"mask must be single-channel, got mode {im.mode}")
        return np.asarray(im).astype(np.int64)


def area_stats(mask_dir, num_classes: int) -> AreaReport:
    """Records for every mask in ``mask_dir``; bad files become error entries."""
    mask_dir = Path(mask_dir)
    report = AreaReport(num_classes=num_classes)
    if not mask_dir.is_dir():
        return report
    for path in sorted(mask_dir.glob("*.png")):
        try:
            mask = read_mask(path)
            if mask.ndim != 2:
                raise ValueError(f"mask must be 2-D, got shape {mask.shape}")
            if mask.size and (mask.min() < 0 or mask.max() >= num_classes):
                raise ValueError(f"mask values outside [0, {num_classes})")
        except Exception as exc:  # noqa: BLE001 - every failure is reported per file
            report.errors.append({"file": path.name, "error": str(exc)})
            continue
        report.records.extend(object_records(mask, path.stem, num_classes))
    return report


def write_manifest(path, records: list[ObjectRecord]) -> None:
    Path(path).write_text("".join(r.to_json() + "\n" for r in records))


def read_manifest(path) -> list[ObjectRecord]:
    path = Path(path)
    if not path.exists():
        return []
    return [ObjectRecord.from_dict(json.loads(line)) for line in path.read_text().splitlines() if line.strip()]
