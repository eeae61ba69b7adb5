"""Reads RGB-thermal sequences from disk.

The expected layout is one directory per sequence::

    root/
        sequence-a/
            rgb/00001.png ...
            tir/00001.png ...
            groundtruth.txt

``groundtruth.txt`` holds one ``x,y,w,h`` line per frame. Values may be separated by
commas or whitespace and may be integers or floats. Images are matched to annotation
lines in sorted file-name order.
"""
__all__ = ["load_dataset", "read_groundtruth", "read_image"]

from logging import getLogger
from pathlib import Path
from typing import List, Text, Union

import numpy as np

from ckdtrack.errors import DataError
from ckdtrack.sequences import BBox, FramePair, RGBTSequence

IMAGE_SUFFIXES = (".png", ".bmp", ".tif", ".tiff", ".jpg", ".jpeg")


def read_image(path: Path, mode: Text) -> np.ndarray:
    """Image as an ``H x W x C`` float array in [0, 1].

    ``mode`` is a pillow mode: "RGB" for colour, "L" for thermal.
    """
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(path) as image:
            data = np.asarray(image.convert(mode), dtype=np.float32) / 255.0
    except (OSError, UnidentifiedImageError) as error:
        raise IOError(f"Could not read image {path}: {error}") from error
    return data if data.ndim == 3 else data[..., None]


def read_groundtruth(path: Path) -> List[BBox]:
    """One box per non-empty line of an annotation file."""
    from pandas import read_csv
    from pandas.errors import EmptyDataError, ParserError

    try:
        table = read_csv(path, sep=r"[,\s]+", header=None, engine="python")
    except FileNotFoundError as error:
        raise DataError(f"Missing annotation file {path}") from error
    except EmptyDataError as error:
        raise DataError(f"Annotation file {path} is empty") from error
    except ParserError as error:
        raise DataError(f"Could not parse annotation file {path}: {error}") from error
    if table.shape[1] != 4:
        raise DataError(f"{path} should have 4 values per line, got {table.shape[1]}")
    boxes = []
    for line, row in enumerate(table.itertuples(index=False), 1):
        try:
            boxes.append(BBox(*(float(v) for v in row)))
        except ValueError as error:
            raise DataError(f"{path}, line {line}: {error}") from error
    return boxes


def _images(directory: Path) -> List[Path]:
    if not directory.is_dir():
        raise DataError(f"Missing image directory {directory}")
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def _frame_box(box: BBox, image: np.ndarray, directory: Path, line: int) -> BBox:
    """Annotation clipped to the frame."""
    if not box.is_valid:
        raise DataError(f"Sequence {directory.name}, line {line}: degenerate box {box}")
    height, width = image.shape[:2]
    try:
        return box.clip(width, height)
    except DataError as error:
        raise DataError(
            f"Sequence {directory.name}, line {line}: box {box} lies outside the "
            f"{width}x{height} frame"
        ) from error


def load_dataset(root: Union[Text, Path]) -> List[RGBTSequence]:
    """Loads every sequence under ``root``, sorted by name.

    Annotations are clipped to the frame.

    Raises:
        IOError: when ``root`` does not exist or an image cannot be read.
        DataError: when image and annotation counts differ, or when an annotation
            is malformed, degenerate or outside the frame, naming the sequence.
    """
    root = Path(root)
    if not root.is_dir():
        raise IOError(f"Dataset directory {root} does not exist")

    sequences = []
    for directory in sorted(p for p in root.iterdir() if p.is_dir()):
        rgb_paths = _images(directory / "rgb")
        tir_paths = _images(directory / "tir")
        boxes = read_groundtruth(directory / "groundtruth.txt")
        if not len(rgb_paths) == len(tir_paths) == len(boxes):
            raise DataError(
                f"Sequence {directory.name}: {len(rgb_paths)} RGB images, "
                f"{len(tir_paths)} TIR images and {len(boxes)} annotation lines"
            )
        frames = []
        for line, (rgb, tir, box) in enumerate(zip(rgb_paths, tir_paths, boxes), 1):
            rgb, tir = read_image(rgb, "RGB"), read_image(tir, "L")
            frames.append(FramePair(rgb, tir, _frame_box(box, rgb, directory, line)))
        sequences.append(RGBTSequence(name=directory.name, frames=frames))
        getLogger(__name__).debug(f"Read {directory.name}: {len(frames)} frames")

    getLogger(__name__).info(f"Read {len(sequences)} sequences from {root}")
    return sequences
