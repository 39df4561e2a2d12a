"""Synthetic domain-shift benchmark: scenes, corruptions, streams, metrics."""

from .corrupt import DomainSpec, corrupt
from .metrics import ConfusionMatrix, miou, per_class_iou, pixel_acc, update_confusion
from .rawio import load_directory_dataset, read_image, read_label, write_image, write_label
from .scenes import CLASS_NAMES, SceneConfig, gen_scene
from .stream import FrameRecord, Sample, StreamConfig, StreamManifest, clean_stream, make_stream

__all__ = [
    "CLASS_NAMES", "ConfusionMatrix", "DomainSpec", "FrameRecord", "Sample", "SceneConfig",
    "StreamConfig", "StreamManifest", "clean_stream", "corrupt", "gen_scene",
    "load_directory_dataset", "make_stream", "miou", "per_class_iou", "pixel_acc", "read_image",
    "read_label", "update_confusion", "write_image", "write_label",
]
