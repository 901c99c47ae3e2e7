"""Binary volume files.

Layout (all integers little endian):
    magic   4 bytes  b"SSV1"
    rank    u32
    extents u32 * rank
    dtype   u8       0 = float32 image data, 1 = uint8 label data
    payload raw row-major array bytes

A case on disk is a pair sharing a filename stem: ``<stem>.image.ssv``
holds the (H, W, D, C) image and ``<stem>.labels.ssv`` the (H, W, D)
label map.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .phantom import LabeledVolume

MAGIC = b"SSV1"
DTYPE_IMAGE = 0
DTYPE_LABELS = 1
IMAGE_SUFFIX = ".image.ssv"
LABELS_SUFFIX = ".labels.ssv"


def write_array(path, array: np.ndarray) -> None:
    array = np.asarray(array)
    if np.issubdtype(array.dtype, np.floating):
        payload = array.astype("<f4")
        tag = DTYPE_IMAGE
    elif array.dtype == np.uint8:
        payload = array
        tag = DTYPE_LABELS
    else:
        raise ValueError(f"unsupported array dtype {array.dtype}; expected float or uint8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", array.ndim))
        fh.write(struct.pack(f"<{array.ndim}I", *array.shape))
        fh.write(struct.pack("<B", tag))
        fh.write(np.ascontiguousarray(payload).tobytes())


def read_array(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise ValueError(f"{path}: not a volume file (bad magic {magic!r})")
        (rank,) = struct.unpack("<I", fh.read(4))
        extents = struct.unpack(f"<{rank}I", fh.read(4 * rank))
        (tag,) = struct.unpack("<B", fh.read(1))
        if tag == DTYPE_IMAGE:
            dtype = np.dtype("<f4")
        elif tag == DTYPE_LABELS:
            dtype = np.dtype(np.uint8)
        else:
            raise ValueError(f"{path}: unknown dtype tag {tag}")
        count = int(np.prod(extents)) if rank else 1
        data = fh.read(count * dtype.itemsize)
        if len(data) != count * dtype.itemsize:
            raise ValueError(f"{path}: truncated payload")
        return np.frombuffer(data, dtype=dtype).reshape(extents)


def save_case(directory, volume: LabeledVolume) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_array(directory / f"{volume.patient_id}{IMAGE_SUFFIX}", volume.image)
    write_array(directory / f"{volume.patient_id}{LABELS_SUFFIX}", volume.labels)


def load_case(directory, stem: str,
              voxel_spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)) -> LabeledVolume:
    directory = Path(directory)
    image = read_array(directory / f"{stem}{IMAGE_SUFFIX}").astype(np.float64)
    labels = read_array(directory / f"{stem}{LABELS_SUFFIX}")
    if labels.dtype != np.uint8:
        raise ValueError(f"{stem}: label file does not hold uint8 data")
    if image.ndim != 4 or labels.ndim != 3 or image.shape[:3] != labels.shape:
        raise ValueError(f"{stem}: image {image.shape} and labels {labels.shape} do not pair")
    return LabeledVolume(image=image, labels=labels, voxel_spacing=voxel_spacing,
                         patient_id=stem)


def list_case_stems(directory) -> list[str]:
    directory = Path(directory)
    stems = sorted(p.name[:-len(IMAGE_SUFFIX)] for p in directory.glob(f"*{IMAGE_SUFFIX}"))
    if not stems:
        raise ValueError(f"no volume cases found in {directory}")
    return stems
