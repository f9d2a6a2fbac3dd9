"""Datasets, augmentation, synthetic generation and object-size statistics."""

from .area import BUCKETS, AreaReport, ObjectRecord, SizeBucket, area_stats, bucket_of, object_records
from .augment import AugmentConfig, augment
from .dataset import SegmentationDataset, SegmentationSample, iterate_batches
from .synthetic import SynthSpec, generate_splits, generate_synthetic

__all__ = [
    "BUCKETS",
    "AreaReport",
    "AugmentConfig",
    "ObjectRecord",
    "SegmentationDataset",
    "SegmentationSample",
    "SizeBucket",
    "SynthSpec",
    "area_stats",
    "augment",
    "bucket_of",
    "generate_splits",
    "generate_synthetic",
    "iterate_batches",
    "object_records",
]
