"""Raw image/label files and a directory-of-pairs dataset loader.

Image file: ``b"DATI"``, u8 version (1), u8 channels, u16 H, u16 W, then
channels*H*W little-endian f32 values in [0, 1]. Label file: ``b"DATL"``, the
same header with channels = 1, then H*W u8 class ids. All integers are
little-endian.
"""

from __future__ import annotations

import re
import struct
from pathlib import Path
from typing import Iterator

import numpy as np

from ..errors import LoadError
from .stream import Sample

IMAGE_MAGIC = b"DATI"
LABEL_MAGIC = b"DATL"
VERSION = 1
_HEADER = struct.Struct("<4sBBHH")
_NAME = re.compile(r"^(img|lbl)_(\d+)(\.\w+)?$")


def encode_image(image: np.ndarray) -> bytes:
    image = np.asarray(image, dtype=np.float32)
    C, H, W = image.shape
    return _HEADER.pack(IMAGE_MAGIC, VERSION, C, H, W) + image.astype("<f4").tobytes()


def encode_label(label: np.ndarray) -> bytes:
    label = np.asarray(label)
    if label.size and (label.min() < 0 or label.max() > 255):
        raise ValueError("label values must fit in u8")
    H, W = label.shape
    return _HEADER.pack(LABEL_MAGIC, VERSION, 1, H, W) + label.astype(np.uint8).tobytes()


def _parse(blob: bytes, magic: bytes, where: str) -> tuple[int, int, int, bytes]:
    if len(blob) < _HEADER.size:
        raise LoadError(f"{where}: file too short for a header ({len(blob)} bytes)")
    got, version, C, H, W = _HEADER.unpack_from(blob)
    if got != magic:
        raise LoadError(f"{where}: bad magic {got!r}, expected {magic!r}")
    if version != VERSION:
        raise LoadError(f"{where}: unsupported version {version}")
    return C, H, W, blob[_HEADER.size:]


def decode_image(blob: bytes, where: str = "<bytes>") -> np.ndarray:
    C, H, W, body = _parse(blob, IMAGE_MAGIC, where)
    if len(body) != 4 * C * H * W:
        raise LoadError(f"{where}: expected {4 * C * H * W} payload bytes for {C}x{H}x{W}, got {len(body)}")
    return np.frombuffer(body, dtype="<f4").reshape(C, H, W).astype(np.float32)


def decode_label(blob: bytes, where: str = "<bytes>", num_classes: int | None = None) -> np.ndarray:
    C, H, W, body = _parse(blob, LABEL_MAGIC, where)
    if C != 1:
        raise LoadError(f"{where}: label files must have 1 channel, got {C}")
    if len(body) != H * W:
        raise LoadError(f"{where}: expected {H * W} payload bytes for {H}x{W}, got {len(body)}")
    label = np.frombuffer(body, dtype=np.uint8).reshape(H, W).astype(np.int64)
    if num_classes is not None and label.size and label.max() >= num_classes:
        raise LoadError(f"{where}: label value {int(label.max())} >= num_classes {num_classes}")
    return label


def write_image(path, image: np.ndarray) -> None:
    Path(path).write_bytes(encode_image(image))


def write_label(path, label: np.ndarray) -> None:
    Path(path).write_bytes(encode_label(label))


def read_image(path) -> np.ndarray:
    return decode_image(Path(path).read_bytes(), str(path))


def read_label(path, num_classes: int | None = None) -> np.ndarray:
    return decode_label(Path(path).read_bytes(), str(path), num_classes)


def load_directory_dataset(path, num_classes: int) -> Iterator[Sample]:
    """Samples from ``img_NNNN`` / ``lbl_NNNN`` pairs, ordered by index.

    Every image needs a label with the same index and matching H x W. The whole
    directory counts as one domain; the first sample carries the boundary flag.
    """
    root = Path(path)
    if not root.is_dir():
        raise LoadError(f"{root}: not a directory")
    images, labels = {}, {}
    for f in root.iterdir():
        m = _NAME.match(f.name)
        if m:
            (images if m.group(1) == "img" else labels)[int(m.group(2))] = f
    missing = sorted(set(images) ^ set(labels))
    if missing:
        i = missing[0]
        have = images.get(i) or labels.get(i)
        raise LoadError(f"{have}: no matching {'label' if i in images else 'image'} file for index {i}")

    def gen():
        for n, i in enumerate(sorted(images)):
            image = read_image(images[i])
            label = read_label(labels[i], num_classes)
            if label.shape != image.shape[1:]:
                raise LoadError(f"{labels[i]}: label {label.shape} does not match image {image.shape[1:]}")
            yield Sample(image, label, root.name, 0, n, n == 0)

    return gen()
