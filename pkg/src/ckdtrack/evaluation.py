"""One-pass evaluation, tracking metrics and the modality-gap report.

A tracker is initialized once on the ground truth of the first frame and then run
through the sequence without re-initialization. The first frame is excluded from
every metric.

Metrics follow the usual tracking-toolkit conventions:

- precision rate (PR): fraction of frames whose centre error is at most ``tau``
  pixels
- normalized precision (NPR): the centre error is scaled by the ground-truth size,
  the fraction at or below each of 51 thresholds in [0, 0.5] is averaged
- success rate (SR): the fraction of frames whose IoU is strictly above each of 21
  thresholds in [0, 1] is averaged
"""
__all__ = [
    "OpeResult",
    "MetricReport",
    "Tracker",
    "CKDTracker",
    "EchoTracker",
    "run_ope",
    "box_iou",
    "center_errors",
    "precision_rate",
    "normalized_precision",
    "success_auc",
    "evaluate",
    "gap_statistics",
    "gap_report",
]

from dataclasses import dataclass, field
from logging import getLogger
from typing import Dict, List, Optional, Sequence, Text, Union

import numpy as np
import pandas as pd
import torch
import xarray as xr

from ckdtrack.backbone import FourBranchModel, forward_ckd
from ckdtrack.elimination import EliminationConfig
from ckdtrack.errors import ContractError, DataError, NumericError
from ckdtrack.sequences import (
    BBox,
    CropConfig,
    FramePair,
    FrameSample,
    RGBTSequence,
    SampleBatch,
    collate,
    make_sample,
)

NPR_THRESHOLDS = np.linspace(0, 0.5, 51)
"""Thresholds on the normalized centre error."""

SR_THRESHOLDS = np.linspace(0, 1, 21)
"""Thresholds on the overlap."""


@dataclass
class OpeResult:
    """Predicted boxes and per-frame wall time of a one-pass run."""

    name: Text
    boxes: List[BBox] = field(default_factory=list)
    times: List[float] = field(default_factory=list)

    def as_array(self) -> np.ndarray:
        return np.stack([box.as_array() for box in self.boxes])


class Tracker:
    """Interface of trackers run by :py:func:`run_ope`."""

    def initialize(self, frame: FramePair, box: BBox) -> None:
        raise NotImplementedError()

    def track(self, frame: FramePair) -> BBox:
        raise NotImplementedError()


class EchoTracker(Tracker):
    """Returns the ground truth of each frame. Useful to check the harness."""

    def initialize(self, frame: FramePair, box: BBox) -> None:
        pass

    def track(self, frame: FramePair) -> BBox:
        return frame.gt


class CKDTracker(Tracker):
    """Tracks with the two students, the fused head, and candidate elimination."""

    def __init__(
        self,
        model: FourBranchModel,
        crop: Optional[CropConfig] = None,
        elim: Optional[EliminationConfig] = None,
    ):
        self.model = model.eval()
        config = model.config
        self.crop = crop or CropConfig(
            template_size=config.template_size, search_size=config.search_size
        )
        if (self.crop.template_size, self.crop.search_size) != (
            config.template_size,
            config.search_size,
        ):
            raise ContractError("Crop sizes do not match the model geometry")
        self.elim = elim
        self.dtype = next(model.parameters()).dtype
        self.template_frame: Optional[FramePair] = None
        self.template_box: Optional[BBox] = None
        self.previous: Optional[BBox] = None

    def initialize(self, frame: FramePair, box: BBox) -> None:
        self.template_frame, self.template_box, self.previous = frame, box, box

    def track(self, frame: FramePair) -> BBox:
        from ckdtrack.head import decode_box, track_heads

        if self.template_frame is None or self.previous is None:
            raise ContractError("The tracker must be initialized first")
        sample = make_sample(
            frame,
            self.template_frame,
            self.previous,
            self.crop,
            template_box=self.template_box,
        )
        batch = collate([sample], dtype=self.dtype)
        with torch.no_grad():
            outputs = forward_ckd(batch, self.model, "infer", elim=self.elim)
            heads = track_heads(self.model, outputs)
        box = decode_box(
            heads["fused"],
            sample.crop_transform,
            self.model.config.patch,
            self.model.config.search_size,
        )
        if box.is_valid:
            try:
                box = box.clip(frame.width, frame.height)
            except DataError:
                box = self.previous
        else:
            box = self.previous
        self.previous = box
        return box


def run_ope(tracker: Tracker, sequence: RGBTSequence) -> OpeResult:
    """Runs a tracker once through a sequence, starting from the first ground truth."""
    from time import perf_counter

    result = OpeResult(name=sequence.name)
    first = sequence[0]
    start = perf_counter()
    tracker.initialize(first, first.gt)
    result.boxes.append(first.gt)
    result.times.append(perf_counter() - start)
    for index, frame in enumerate(sequence.frames[1:], start=1):
        start = perf_counter()
        try:
            box = tracker.track(frame)
        except (NumericError, ContractError) as error:
            raise type(error)(f"{sequence.name}, frame {index}: {error}") from error
        result.times.append(perf_counter() - start)
        result.boxes.append(box)
    return result


def _as_boxes(boxes: Union[np.ndarray, Sequence[BBox]]) -> np.ndarray:
    if len(boxes) > 0 and isinstance(boxes[0], BBox):
        return np.stack([box.as_array() for box in boxes])  # type: ignore
    return np.asarray(boxes, dtype=float).reshape(-1, 4)


def _check_lengths(preds: np.ndarray, gts: np.ndarray) -> None:
    if preds.shape != gts.shape:
        raise ContractError(
            f"{len(preds)} predictions for {len(gts)} ground-truth boxes"
        )


def center_errors(preds, gts) -> np.ndarray:
    """Euclidean distance between box centres."""
    preds, gts = _as_boxes(preds), _as_boxes(gts)
    _check_lengths(preds, gts)
    delta = preds[:, :2] + preds[:, 2:] / 2 - gts[:, :2] - gts[:, 2:] / 2
    return np.sqrt((delta**2).sum(axis=-1))


def box_iou(preds, gts) -> np.ndarray:
    """Intersection over union of ``x, y, w, h`` boxes, frame by frame.

    >>> from ckdtrack.evaluation import box_iou
    >>> box_iou([[0, 0, 1, 1]], [[0, 0, 2, 1]])
    array([0.5])
    """
    preds, gts = _as_boxes(preds), _as_boxes(gts)
    _check_lengths(preds, gts)
    lt = np.maximum(preds[:, :2], gts[:, :2])
    rb = np.minimum(preds[:, :2] + preds[:, 2:], gts[:, :2] + gts[:, 2:])
    inter = np.clip(rb - lt, 0, None).prod(axis=-1)
    union = preds[:, 2:].prod(axis=-1) + gts[:, 2:].prod(axis=-1) - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)


def precision_rate(preds, gts, tau: float = 20) -> float:
    """Fraction of frames whose centre error is at most ``tau`` pixels.

    >>> from ckdtrack.evaluation import precision_rate
    >>> precision_rate([[5, 0, 10, 10], [25, 0, 10, 10]], [[0, 0, 10, 10]] * 2)
    0.5
    """
    errors = center_errors(preds, gts)
    return float((errors <= tau).mean()) if len(errors) else 0.0


def normalized_precision_curve(preds, gts) -> np.ndarray:
    preds, gts = _as_boxes(preds), _as_boxes(gts)
    _check_lengths(preds, gts)
    if not (gts[:, 2:] > 0).all():
        raise ContractError("Degenerate ground-truth box")
    delta = (preds[:, :2] + preds[:, 2:] / 2 - gts[:, :2] - gts[:, 2:] / 2) / gts[:, 2:]
    errors = np.sqrt((delta**2).sum(axis=-1))
    return (errors[None, :] <= NPR_THRESHOLDS[:, None]).mean(axis=-1)


def normalized_precision(preds, gts) -> float:
    """Average over thresholds in [0, 0.5] of the normalized precision."""
    return float(normalized_precision_curve(preds, gts).mean())


def success_curve(preds, gts) -> np.ndarray:
    overlaps = box_iou(preds, gts)
    return (overlaps[None, :] > SR_THRESHOLDS[:, None]).mean(axis=-1)


def success_auc(preds, gts) -> float:
    """Area under the success curve, IoU strictly above each threshold.

    >>> from ckdtrack.evaluation import success_auc
    >>> round(success_auc([[0, 0, 10, 10]], [[0, 0, 10, 10]]), 4)
    0.9524
    """
    return float(success_curve(preds, gts).mean())


@dataclass(frozen=True)
class MetricReport:
    """Per-sequence and aggregate metrics.

    The data holds ``pr``, ``npr`` and ``sr`` along ``sequence``, and the underlying
    curves along ``npr_threshold`` and ``sr_threshold``.
    """

    data: xr.Dataset
    tau: float

    @property
    def pr(self) -> float:
        return float(self.data.pr.mean("sequence"))

    @property
    def npr(self) -> float:
        return float(self.data.npr.mean("sequence"))

    @property
    def sr(self) -> float:
        return float(self.data.sr.mean("sequence"))

    def to_dict(self) -> Dict:
        return {
            "tau": self.tau,
            "aggregate": {"pr": self.pr, "npr": self.npr, "sr": self.sr},
            "sequences": {
                str(name): {
                    key: float(self.data[key].sel(sequence=name))
                    for key in ("pr", "npr", "sr")
                }
                for name in self.data.sequence.values
            },
            "thresholds": {
                "npr": self.data.npr_threshold.values.tolist(),
                "sr": self.data.sr_threshold.values.tolist(),
            },
        }


def evaluate(
    tracker: Tracker, sequences: Sequence[RGBTSequence], tau: float = 20
) -> MetricReport:
    """Runs the tracker through each sequence and computes the metrics.

    Aggregate values are means over sequences.
    """
    if len(sequences) == 0:
        raise ContractError("No sequences to evaluate")
    names, pr, npr_curves, sr_curves = [], [], [], []
    for sequence in sequences:
        result = run_ope(tracker, sequence)
        preds, gts = result.as_array()[1:], _as_boxes(sequence.boxes)[1:]
        names.append(sequence.name)
        pr.append(precision_rate(preds, gts, tau))
        npr_curves.append(normalized_precision_curve(preds, gts))
        sr_curves.append(success_curve(preds, gts))
        getLogger(__name__).info(
            f"{sequence.name}: PR {pr[-1]:.3f}, NPR {npr_curves[-1].mean():.3f}, "
            f"SR {sr_curves[-1].mean():.3f}"
        )

    data = xr.Dataset(
        {
            "pr": ("sequence", np.array(pr)),
            "npr_curve": (("sequence", "npr_threshold"), np.stack(npr_curves)),
            "sr_curve": (("sequence", "sr_threshold"), np.stack(sr_curves)),
        },
        coords={
            "sequence": names,
            "npr_threshold": NPR_THRESHOLDS,
            "sr_threshold": SR_THRESHOLDS,
        },
    )
    data["npr"] = data.npr_curve.mean("npr_threshold")
    data["sr"] = data.sr_curve.mean("sr_threshold")
    return MetricReport(data=data, tau=tau)


def gap_statistics(
    rgb: Sequence[torch.Tensor], tir: Sequence[torch.Tensor], epsilon: float = 1e-5
) -> pd.DataFrame:
    """Style statistics and modality distances of two feature stacks, layer by layer.

    Rows are per layer and channel (batch-averaged means and deviations), then one
    row per layer with channel "all" holding the distances, and a final summary row
    averaging them over layers:

    - ``style_distance``: squared style difference, as in style distillation
    - ``pre_in_distance``: mean squared difference of the raw features
    - ``post_in_distance``: the same after instance normalization

    The distances compare features elementwise, over tokens and channels, rather than
    comparing per-channel means. Instance-normalized features have zero channel means,
    so a mean-based distance would vanish after normalization whatever the content.
    """
    from ckdtrack.distill import instance_normalize, style_distill_loss, style_stats

    a, b = style_stats(rgb), style_stats(tir)
    rows = []
    for layer in range(a.layers):
        for channel in range(a.mu.shape[-1]):
            rows.append(
                {
                    "layer": str(layer + 1),
                    "channel": str(channel),
                    "mu_rgb": float(a.mu[layer, :, channel].mean()),
                    "sigma_rgb": float(a.sigma[layer, :, channel].mean()),
                    "mu_tir": float(b.mu[layer, :, channel].mean()),
                    "sigma_tir": float(b.sigma[layer, :, channel].mean()),
                }
            )

    layer_rows = []
    for layer, (x, y) in enumerate(zip(rgb, tir)):
        x_in, y_in = instance_normalize([x, y], epsilon)
        layer_rows.append(
            {
                "layer": str(layer + 1),
                "channel": "all",
                "style_distance": float(style_distill_loss([x], [y])),
                "pre_in_distance": float(((x - y) ** 2).mean()),
                "post_in_distance": float(((x_in - y_in) ** 2).mean()),
            }
        )
    summary = pd.DataFrame(layer_rows)[
        ["style_distance", "pre_in_distance", "post_in_distance"]
    ].mean()
    layer_rows.append({"layer": "all", "channel": "all", **summary.to_dict()})

    columns = [
        "layer",
        "channel",
        "mu_rgb",
        "sigma_rgb",
        "mu_tir",
        "sigma_tir",
        "style_distance",
        "pre_in_distance",
        "post_in_distance",
    ]
    return pd.DataFrame(rows + layer_rows, columns=columns)


def style_distance(report: pd.DataFrame) -> float:
    """Style distance averaged over layers, from the summary row of a gap report."""
    summary = report[(report.layer == "all") & (report.channel == "all")]
    return float(summary.style_distance.iloc[0])


def gap_report(
    model: FourBranchModel,
    samples: Union[SampleBatch, Sequence[FrameSample]],
    epsilon: float = 1e-5,
) -> pd.DataFrame:
    """Modality gap between the two students on a set of samples.

    Students run without masks or elimination. See :py:func:`gap_statistics`.
    """
    if not isinstance(samples, SampleBatch):
        if len(samples) == 0:
            raise ContractError("No samples for the gap report")
        samples = collate(samples, dtype=next(model.parameters()).dtype)

    was_training = model.training
    model.eval()
    with torch.no_grad():
        outputs = forward_ckd(samples, model, "infer")
    model.train(was_training)
    return gap_statistics(
        outputs["student_rgb"].features, outputs["student_tir"].features, epsilon
    )
