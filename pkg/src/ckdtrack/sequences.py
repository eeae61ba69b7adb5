"""Paired RGB-thermal sequences, the synthetic benchmark, and crops.

Images are numpy arrays with values in [0, 1]: ``H x W x 3`` for RGB and
``H x W x 1`` for thermal (TIR). Boxes are ``(x, y, w, h)`` in pixels, with ``(x, y)``
the top-left corner. Pixel ``k`` covers the continuous interval ``[k, k + 1)``.

Crops follow the usual one-stream tracker convention: a square region of side
``factor * sqrt(w * h)`` centred on a box, resampled to a fixed size. The mapping
from crop to frame coordinates is kept in a :py:class:`CropTransform`.
"""
__all__ = [
    "BBox",
    "FramePair",
    "RGBTSequence",
    "StylePreset",
    "STYLE_PRESETS",
    "register_style_preset",
    "generate_synthetic_sequence",
    "CropConfig",
    "CropTransform",
    "FrameSample",
    "SampleBatch",
    "crop_region",
    "make_sample",
    "sample_training_pair",
    "collate",
]

from dataclasses import dataclass
from typing import (
    Callable,
    List,
    MutableMapping,
    Optional,
    Sequence,
    Text,
    Tuple,
    Union,
)

import numpy as np
import torch

from ckdtrack.errors import ConfigurationError, ContractError, DataError
from ckdtrack.registration import registrator


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box, top-left corner plus width and height, in pixels."""

    x: float
    y: float
    w: float
    h: float

    @property
    def center(self) -> Tuple[float, float]:
        return self.x + 0.5 * self.w, self.y + 0.5 * self.h

    @property
    def xyxy(self) -> Tuple[float, float, float, float]:
        return self.x, self.y, self.x + self.w, self.y + self.h

    @property
    def is_valid(self) -> bool:
        return bool(np.isfinite(self.as_array()).all() and self.w > 0 and self.h > 0)

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.w, self.h], dtype=float)

    @classmethod
    def from_center(cls, cx: float, cy: float, w: float, h: float) -> "BBox":
        return cls(cx - 0.5 * w, cy - 0.5 * h, w, h)

    def clip(self, width: int, height: int) -> "BBox":
        """Intersection of the box with a ``width x height`` frame.

        >>> from ckdtrack.sequences import BBox
        >>> BBox(-4, 2, 10, 6).clip(20, 20)
        BBox(x=0.0, y=2.0, w=6.0, h=6.0)
        >>> BBox(30, 2, 10, 6).clip(20, 20)
        Traceback (most recent call last):
        ...
        ckdtrack.errors.DataError: Box BBox(x=30, y=2, w=10, h=6) is outside the frame
        """
        x0, y0 = float(max(self.x, 0)), float(max(self.y, 0))
        x1, y1 = float(min(self.x + self.w, width)), float(min(self.y + self.h, height))
        if x1 <= x0 or y1 <= y0:
            raise DataError(f"Box {self} is outside the frame")
        return BBox(x0, y0, x1 - x0, y1 - y0)


@dataclass(frozen=True)
class FramePair:
    """Aligned RGB and thermal images with their ground-truth box.

    A thermal image given as ``H x W`` is stored as ``H x W x 1``. The box has a
    positive size and lies inside the frame.
    """

    rgb: np.ndarray
    tir: np.ndarray
    gt: BBox

    def __post_init__(self):
        if self.tir.ndim == 2:
            object.__setattr__(self, "tir", self.tir[..., None])
        if self.rgb.ndim != 3 or self.rgb.shape[-1] != 3:
            raise DataError(f"RGB image should be H x W x 3, got {self.rgb.shape}")
        if self.tir.ndim != 3 or self.tir.shape[-1] != 1:
            raise DataError(f"TIR image should be H x W x 1, got {self.tir.shape}")
        if self.rgb.shape[:2] != self.tir.shape[:2]:
            raise DataError(
                f"RGB {self.rgb.shape[:2]} and TIR {self.tir.shape[:2]} are not aligned"
            )
        if not self.gt.is_valid:
            raise DataError(f"Degenerate ground-truth box {self.gt}")
        x0, y0, x1, y1 = self.gt.xyxy
        if min(x0, y0) < -1e-6 or x1 > self.width + 1e-6 or y1 > self.height + 1e-6:
            raise DataError(
                f"Ground-truth box {self.gt} is not inside the "
                f"{self.width}x{self.height} frame"
            )

    @property
    def height(self) -> int:
        return self.rgb.shape[0]

    @property
    def width(self) -> int:
        return self.rgb.shape[1]


@dataclass(frozen=True)
class RGBTSequence:
    """Named, ordered list of frame pairs, at least two of them."""

    name: Text
    frames: Tuple[FramePair, ...]

    def __post_init__(self):
        object.__setattr__(self, "frames", tuple(self.frames))
        if len(self.frames) < 2:
            raise DataError(f"Sequence {self.name} has fewer than two frames")

    def __len__(self) -> int:
        return len(self.frames)

    def __getitem__(self, index: int) -> FramePair:
        return self.frames[index]

    def __iter__(self):
        return iter(self.frames)

    @property
    def boxes(self) -> List[BBox]:
        return [frame.gt for frame in self.frames]


@dataclass(frozen=True)
class StylePreset:
    """Appearance of the two modalities in the synthetic benchmark.

    The thermal background sits at a different global level from the RGB clutter, so
    that the two modalities differ in style while sharing the same content.
    """

    name: Text
    rgb_background: Tuple[float, float] = (0.15, 0.55)
    rgb_target: Tuple[float, float] = (0.55, 1.0)
    tir_background: float = 0.7
    tir_spread: float = 0.05
    tir_contrast: float = 0.25
    tir_blur: float = 1.0
    target_size: Tuple[int, int] = (10, 16)
    speed: float = 1.0
    noise: float = 0.01


STYLE_PRESETS: MutableMapping[Text, Callable[[], StylePreset]] = {}
"""Synthetic style presets, by name."""


@registrator(registry=STYLE_PRESETS, logname="style preset")
def register_style_preset(function: Callable[[], StylePreset]):
    """Registers a function returning a :py:class:`StylePreset`."""
    return function


@register_style_preset(name="default")
def two_style() -> StylePreset:
    """Cluttered RGB, warm thermal background, moving target."""
    return StylePreset(name="default")


@register_style_preset
def static() -> StylePreset:
    """As the default, with a target that does not move."""
    return StylePreset(name="static", speed=0.0)


@register_style_preset
def aligned() -> StylePreset:
    """Both modalities at the same global level: a small modality gap."""
    return StylePreset(name="aligned", tir_background=0.35, tir_spread=0.2)


def _rescale(image: np.ndarray, low: float, high: float) -> np.ndarray:
    span = image.max() - image.min()
    unit = (image - image.min()) / (span if span > 0 else 1.0)
    return low + (high - low) * unit


def generate_synthetic_sequence(
    seed: int,
    length: int = 50,
    canvas: int = 128,
    style: Union[Text, StylePreset] = "default",
) -> RGBTSequence:
    """Creates a synthetic two-style RGB-thermal sequence.

    The RGB frame shows a textured target over smoothed colour clutter. The thermal
    frame shows a smoothed warm blob over a flat background at a shifted global level.
    The target follows a smooth random walk, bouncing off the canvas borders, and the
    ground-truth box is the exact (integer) support of the target in both modalities.

    >>> from ckdtrack.sequences import generate_synthetic_sequence
    >>> sequence = generate_synthetic_sequence(seed=0, length=2, canvas=128)
    >>> len(sequence), sequence[0].rgb.shape, sequence[0].tir.shape
    (2, (128, 128, 3), (128, 128, 1))
    """
    from scipy.ndimage import gaussian_filter

    from ckdtrack.registration import lookup

    preset = (
        style
        if isinstance(style, StylePreset)
        else lookup(STYLE_PRESETS, style, "style preset")()
    )
    if length < 2:
        raise ConfigurationError(f"A sequence needs at least 2 frames, got {length}")
    if canvas < 4 * max(preset.target_size):
        raise ConfigurationError(
            f"Canvas of {canvas} pixels is smaller than 4 x the target size "
            f"{max(preset.target_size)}"
        )

    rng = np.random.default_rng(seed)
    w, h = (int(v) for v in rng.integers(*preset.target_size, endpoint=True, size=2))

    rgb_background = _rescale(
        gaussian_filter(rng.random((canvas, canvas, 3)), sigma=(2.0, 2.0, 0)),
        *preset.rgb_background,
    )
    tir_background = _rescale(
        gaussian_filter(rng.random((canvas, canvas)), sigma=6.0),
        preset.tir_background - preset.tir_spread,
        preset.tir_background + preset.tir_spread,
    )

    colour = rng.uniform(*preset.rgb_target, size=3)
    checker = (np.add.outer(np.arange(h) // 2, np.arange(w) // 2) % 2)[..., None]
    texture = colour * (0.75 + 0.25 * checker) * rng.uniform(0.9, 1.0, size=(h, w, 3))
    yy, xx = np.mgrid[0:h, 0:w]
    blob = np.exp(
        -2.0 * (((xx + 0.5) / w - 0.5) ** 2 + ((yy + 0.5) / h - 0.5) ** 2) / 0.25**2
    )

    center = rng.uniform([w, h], [canvas - w, canvas - h])
    velocity = rng.normal(0, preset.speed, size=2)
    frames = []
    for _ in range(length):
        x, y = int(round(center[0] - w / 2)), int(round(center[1] - h / 2))
        x, y = min(max(x, 0), canvas - w), min(max(y, 0), canvas - h)

        rgb = rgb_background.copy()
        rgb[y : y + h, x : x + w] = texture
        rgb += rng.normal(0, preset.noise, size=rgb.shape)

        tir = tir_background.copy()
        tir[y : y + h, x : x + w] += preset.tir_contrast * blob
        tir = gaussian_filter(tir, sigma=preset.tir_blur)
        tir += rng.normal(0, preset.noise, size=tir.shape)

        frames.append(
            FramePair(
                rgb=np.clip(rgb, 0, 1).astype(np.float32),
                tir=np.clip(tir, 0, 1).astype(np.float32)[..., None],
                gt=BBox(float(x), float(y), float(w), float(h)),
            )
        )

        velocity = 0.8 * velocity + rng.normal(0, preset.speed, size=2)
        center = center + velocity
        for axis, half in enumerate((w / 2, h / 2)):
            if center[axis] < half or center[axis] > canvas - half:
                velocity[axis] = -velocity[axis]
                center[axis] = min(max(center[axis], half), canvas - half)

    return RGBTSequence(name=f"synthetic-{preset.name}-{seed:06d}", frames=frames)


@dataclass(frozen=True)
class CropConfig:
    """Sizes (pixels) and context factors of the template and search crops."""

    template_size: int = 32
    search_size: int = 64
    template_factor: float = 2.0
    search_factor: float = 4.0


@dataclass(frozen=True)
class CropTransform:
    """Maps crop coordinates to frame coordinates: ``frame = crop * scale + offset``.

    >>> from ckdtrack.sequences import BBox, CropTransform
    >>> transform = CropTransform(scale=2.0, offset_x=10.0, offset_y=-4.0)
    >>> transform.to_frame(BBox(1, 2, 3, 4))
    BBox(x=12.0, y=0.0, w=6.0, h=8.0)
    >>> transform.to_crop(transform.to_frame(BBox(1, 2, 3, 4)))
    BBox(x=1.0, y=2.0, w=3.0, h=4.0)
    """

    scale: float = 1.0
    offset_x: float = 0.0
    offset_y: float = 0.0

    def to_frame(self, box: BBox) -> BBox:
        return BBox(
            box.x * self.scale + self.offset_x,
            box.y * self.scale + self.offset_y,
            box.w * self.scale,
            box.h * self.scale,
        )

    def to_crop(self, box: BBox) -> BBox:
        return BBox(
            (box.x - self.offset_x) / self.scale,
            (box.y - self.offset_y) / self.scale,
            box.w / self.scale,
            box.h / self.scale,
        )


@dataclass(frozen=True)
class FrameSample:
    """Template and search crops of both modalities, with the ground truth."""

    template_rgb: np.ndarray
    template_tir: np.ndarray
    search_rgb: np.ndarray
    search_tir: np.ndarray
    gt_in_search: BBox
    crop_transform: CropTransform


def crop_region(
    image: np.ndarray, box: BBox, factor: float, size: int
) -> Tuple[np.ndarray, CropTransform]:
    """Square crop of side ``factor * sqrt(w * h)`` centred on ``box``.

    The crop is resampled bilinearly to ``size x size``. Pixels falling outside the
    image take the per-channel mean of the image.
    """
    from scipy.ndimage import map_coordinates

    side = factor * np.sqrt(box.w * box.h)
    cx, cy = box.center
    transform = CropTransform(
        scale=side / size, offset_x=cx - 0.5 * side, offset_y=cy - 0.5 * side
    )
    # centre of crop pixel j sits at frame coordinate (j + 0.5) * scale + offset,
    # i.e. at index coordinate one half-pixel lower
    steps = (np.arange(size) + 0.5) * transform.scale - 0.5
    rows, cols = np.meshgrid(
        steps + transform.offset_y, steps + transform.offset_x, indexing="ij"
    )
    fill = image.reshape(-1, image.shape[-1]).mean(axis=0)
    crop = np.stack(
        [
            map_coordinates(
                image[..., c].astype(float),
                [rows, cols],
                order=1,
                mode="constant",
                cval=float(fill[c]),
            )
            for c in range(image.shape[-1])
        ],
        axis=-1,
    )
    return crop.astype(image.dtype), transform


def make_sample(
    frame: FramePair,
    template_frame: FramePair,
    prev_box: BBox,
    cfg: CropConfig,
    fallback: Optional[BBox] = None,
    template_box: Optional[BBox] = None,
) -> FrameSample:
    """Template crop around the template box, search crop around ``prev_box``.

    The template box defaults to the ground truth of the template frame. A degenerate
    ``prev_box`` is replaced by ``fallback``, the last valid box.

    >>> import numpy as np
    >>> from ckdtrack.sequences import BBox, CropConfig, FramePair, make_sample
    >>> box = BBox(56, 56, 16, 16)
    >>> frame = FramePair(np.full((128, 128, 3), 0.5), np.full((128, 128), 0.2), box)
    >>> sample = make_sample(frame, frame, box, CropConfig())
    >>> sample.gt_in_search
    BBox(x=24.0, y=24.0, w=16.0, h=16.0)
    >>> sample.crop_transform.to_frame(sample.gt_in_search) == box
    True
    """
    if not prev_box.is_valid:
        if fallback is None or not fallback.is_valid:
            raise ContractError(f"No valid box to centre the search region: {prev_box}")
        prev_box = fallback
    template_box = template_frame.gt if template_box is None else template_box
    if not template_box.is_valid:
        raise ContractError(f"Degenerate template box: {template_box}")

    for size in (cfg.template_size, cfg.search_size):
        if size <= 0:
            raise ConfigurationError(f"Crop sizes must be positive, got {size}")

    template_rgb, _ = crop_region(
        template_frame.rgb, template_box, cfg.template_factor, cfg.template_size
    )
    template_tir, _ = crop_region(
        template_frame.tir, template_box, cfg.template_factor, cfg.template_size
    )
    search_rgb, transform = crop_region(
        frame.rgb, prev_box, cfg.search_factor, cfg.search_size
    )
    search_tir, _ = crop_region(frame.tir, prev_box, cfg.search_factor, cfg.search_size)
    return FrameSample(
        template_rgb=template_rgb,
        template_tir=template_tir,
        search_rgb=search_rgb,
        search_tir=search_tir,
        gt_in_search=transform.to_crop(frame.gt),
        crop_transform=transform,
    )


def sample_training_pair(
    sequence: RGBTSequence,
    rng: np.random.Generator,
    cfg: CropConfig,
    max_gap: int = 10,
    center_jitter: float = 0.25,
    scale_jitter: float = 0.15,
) -> FrameSample:
    """Random template/search pair from a sequence.

    The search frame follows the template frame by at most ``max_gap`` frames. The
    search region is centred on a jittered copy of the ground truth, shifted by up to
    ``center_jitter`` box sizes and rescaled by ``exp(N(0, scale_jitter))``.
    """
    first = int(rng.integers(0, len(sequence) - 1))
    last = min(len(sequence) - 1, first + max_gap)
    second = int(rng.integers(first + 1, last, endpoint=True))
    frame = sequence[second]

    cx, cy = frame.gt.center
    size = np.sqrt(frame.gt.w * frame.gt.h)
    shift = rng.uniform(-center_jitter, center_jitter, size=2) * size
    scale = float(np.exp(rng.normal(0, scale_jitter)))
    jittered = BBox.from_center(
        cx + shift[0], cy + shift[1], frame.gt.w * scale, frame.gt.h * scale
    )
    return make_sample(frame, sequence[first], jittered, cfg)


@dataclass(frozen=True)
class SampleBatch:
    """Channel-first tensors for a batch of samples.

    ``gt`` holds ``(x, y, w, h)`` boxes in search-crop coordinates, shape ``(B, 4)``.
    """

    template_rgb: torch.Tensor
    template_tir: torch.Tensor
    search_rgb: torch.Tensor
    search_tir: torch.Tensor
    gt: torch.Tensor
    transforms: Tuple[CropTransform, ...]

    def __len__(self) -> int:
        return self.search_rgb.shape[0]


def collate(samples: Sequence[FrameSample], **kwargs) -> SampleBatch:
    """Stacks samples into a :py:class:`SampleBatch`.

    Keyword arguments, e.g. ``dtype``, are forwarded to :py:func:`torch.as_tensor`.
    """
    if len(samples) == 0:
        raise ContractError("Cannot collate an empty batch")
    kwargs.setdefault("dtype", torch.float32)

    def stack(name: Text) -> torch.Tensor:
        images = np.stack([getattr(s, name) for s in samples]).transpose(0, 3, 1, 2)
        return torch.as_tensor(np.ascontiguousarray(images), **kwargs)

    return SampleBatch(
        template_rgb=stack("template_rgb"),
        template_tir=stack("template_tir"),
        search_rgb=stack("search_rgb"),
        search_tir=stack("search_tir"),
        gt=torch.as_tensor(
            np.stack([s.gt_in_search.as_array() for s in samples]), **kwargs
        ),
        transforms=tuple(s.crop_transform for s in samples),
    )
