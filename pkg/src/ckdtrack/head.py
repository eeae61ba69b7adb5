"""Center-based tracking heads, their loss and box decoding.

A head reads a dense ``G x G`` map of search-token features and predicts three maps:
a score for the target centre being in each cell, the sub-cell offset of that centre,
and the box size normalized by the search crop size. Teachers each have a head of
``D`` input channels. The two students share a single head reading their
concatenated features, ``2 D`` channels.
"""
__all__ = [
    "HeadOutput",
    "TrackingHead",
    "fuse_student_features",
    "head_forward",
    "head_inputs",
    "track_heads",
    "decode_box",
    "giou",
    "task_loss",
]

from dataclasses import dataclass
from math import log
from typing import TYPE_CHECKING, Dict, Mapping, Text

import numpy as np
import torch
from torch import Tensor, nn

from ckdtrack.errors import ContractError, NumericError
from ckdtrack.sequences import BBox, CropTransform

if TYPE_CHECKING:
    from ckdtrack.backbone import BranchOutput, FourBranchModel

FOCAL_ALPHA = 2
FOCAL_BETA = 4
WEIGHT_L1 = 5.0
WEIGHT_GIOU = 2.0


@dataclass(frozen=True)
class HeadOutput:
    """Pre-sigmoid maps: score ``(B, G, G)``, offset and size ``(B, 2, G, G)``.

    Channel 0 of the offset and size maps is horizontal (x, width), channel 1
    vertical (y, height).
    """

    score_logits: Tensor
    offset_logits: Tensor
    size_logits: Tensor

    @property
    def score_map(self) -> Tensor:
        return torch.sigmoid(self.score_logits)

    @property
    def offset_map(self) -> Tensor:
        return torch.sigmoid(self.offset_logits)

    @property
    def size_map(self) -> Tensor:
        return torch.sigmoid(self.size_logits)

    @property
    def grid(self) -> int:
        return self.score_logits.shape[-1]


def _branch(channels: int, outputs: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(channels, channels, 3, padding=1),
        nn.ReLU(),
        nn.Conv2d(channels, outputs, 1),
    )


class TrackingHead(nn.Module):
    """1x1 projection followed by a small convolutional stack per map."""

    def __init__(self, in_channels: int, channels: int = 32, prior: float = 0.01):
        super().__init__()
        self.in_channels = in_channels
        self.proj = nn.Conv2d(in_channels, channels, 1)
        self.score = _branch(channels, 1)
        self.offset = _branch(channels, 2)
        self.size = _branch(channels, 2)
        nn.init.constant_(self.score[-1].bias, -log((1 - prior) / prior))

    def forward(self, features: Tensor) -> HeadOutput:
        x = torch.relu(self.proj(features.permute(0, 3, 1, 2)))
        return HeadOutput(
            score_logits=self.score(x)[:, 0],
            offset_logits=self.offset(x),
            size_logits=self.size(x),
        )


def fuse_student_features(rgb: Tensor, tir: Tensor, grid: int) -> Tensor:
    """Channel concatenation, RGB first, reshaped row-major to ``(B, G, G, 2 D)``.

    >>> import torch
    >>> from ckdtrack.head import fuse_student_features
    >>> fuse_student_features(torch.ones(2, 16, 4), torch.zeros(2, 16, 4), 4).shape
    torch.Size([2, 4, 4, 8])
    """
    if rgb.shape != tir.shape:
        raise ContractError(
            f"RGB {tuple(rgb.shape)} and TIR {tuple(tir.shape)} grids differ"
        )
    if rgb.shape[1] != grid * grid:
        raise ContractError(f"{rgb.shape[1]} tokens do not form a {grid}x{grid} grid")
    fused = torch.cat([rgb, tir], dim=-1)
    return fused.reshape(fused.shape[0], grid, grid, fused.shape[-1])


def head_forward(features: Tensor, head: TrackingHead) -> HeadOutput:
    """Runs a head on ``(B, G, G, C)`` features, checking for non-finite maps."""
    if not torch.isfinite(features).all():
        raise NumericError("Non-finite head input")
    out = head(features)
    for name in ("score_logits", "offset_logits", "size_logits"):
        if not torch.isfinite(getattr(out, name)).all():
            raise NumericError(f"Non-finite head output: {name}")
    return out


def head_inputs(
    outputs: Mapping[Text, "BranchOutput"],
    grid: int,
    content_only: bool = False,
    epsilon: float = 1e-5,
) -> Dict[Text, Tensor]:
    """Dense head inputs from branch outputs.

    Returns ``rgb`` and ``tir`` for whichever teachers ran, and ``fused`` from the
    students. With ``content_only``, student features are instance-normalized before
    fusion.
    """
    from ckdtrack.distill import instance_normalize
    from ckdtrack.elimination import scatter_back

    def dense(name: Text, normalize: bool = False) -> Tensor:
        final, kept = outputs[name].final, outputs[name].kept
        search = final.search
        if normalize:
            search = instance_normalize([search], epsilon)[0]
        return scatter_back(search, kept, grid * grid)

    result = {}
    for modality in ("rgb", "tir"):
        if f"teacher_{modality}" in outputs:
            teacher = dense(f"teacher_{modality}")
            result[modality] = teacher.reshape(-1, grid, grid, teacher.shape[-1])
    result["fused"] = fuse_student_features(
        dense("student_rgb", content_only), dense("student_tir", content_only), grid
    )
    return result


def track_heads(
    model: "FourBranchModel", outputs: Mapping[Text, "BranchOutput"]
) -> Dict[Text, HeadOutput]:
    """Runs every head whose input branches ran."""
    config = model.config
    inputs = head_inputs(outputs, config.grid, config.content_only)
    return {name: head_forward(x, model.heads[name]) for name, x in inputs.items()}


def decode_box(
    out: HeadOutput,
    crop_transform: CropTransform,
    patch: int,
    search_size: int,
    index: int = 0,
) -> BBox:
    """Box at the highest-scoring cell, in frame coordinates.

    Ties go to the first cell in row-major order.
    """
    score = out.score_logits[index].detach().cpu().numpy()
    row, col = divmod(int(np.argmax(score.ravel())), score.shape[-1])
    offset = out.offset_map[index, :, row, col].detach().cpu().numpy()
    size = out.size_map[index, :, row, col].detach().cpu().numpy()
    box = BBox.from_center(
        float((col + offset[0]) * patch),
        float((row + offset[1]) * patch),
        float(size[0] * search_size),
        float(size[1] * search_size),
    )
    return crop_transform.to_frame(box)


def giou(a: Tensor, b: Tensor) -> Tensor:
    """Generalized IoU of ``(..., 4)`` boxes in ``x0, y0, x1, y1`` form.

    >>> import torch
    >>> from ckdtrack.head import giou
    >>> giou(torch.tensor([0.0, 0.0, 1.0, 1.0]), torch.tensor([1.0, 1.0, 2.0, 2.0]))
    tensor(-0.5000)
    """
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    lt = torch.maximum(a[..., :2], b[..., :2])
    rb = torch.minimum(a[..., 2:], b[..., 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a + area_b - inter
    hull = torch.maximum(a[..., 2:], b[..., 2:]) - torch.minimum(a[..., :2], b[..., :2])
    enclosing = hull[..., 0] * hull[..., 1]
    return inter / union - (enclosing - union) / enclosing


def gaussian_target(centers: Tensor, sigmas: Tensor, grid: int) -> Tensor:
    """``(B, G, G)`` maps peaking at 1 on the given ``(row, col)`` cells."""
    cells = torch.arange(grid, dtype=sigmas.dtype, device=sigmas.device)
    dy = (cells[None, :] - centers[:, :1]) ** 2 / (2 * sigmas[:, 1:] ** 2)
    dx = (cells[None, :] - centers[:, 1:]) ** 2 / (2 * sigmas[:, :1] ** 2)
    return torch.exp(-(dy[:, :, None] + dx[:, None, :]))


def focal_loss(logits: Tensor, target: Tensor) -> Tensor:
    """Penalty-reduced focal loss on score maps, normalized by the positive cells."""
    from torch.nn.functional import logsigmoid

    prob = torch.sigmoid(logits)
    positive = target.eq(1).to(logits.dtype)
    positive_loss = -((1 - prob) ** FOCAL_ALPHA) * logsigmoid(logits) * positive
    negative_loss = (
        -((1 - target) ** FOCAL_BETA)
        * prob**FOCAL_ALPHA
        * logsigmoid(-logits)
        * (1 - positive)
    )
    per_sample = (positive_loss + negative_loss).sum(dim=(-2, -1))
    return per_sample / positive.sum(dim=(-2, -1)).clamp(min=1)


def task_loss(out: HeadOutput, gt: Tensor, patch: int, search_size: int) -> Tensor:
    """Classification, L1 and GIoU loss against ``(B, 4)`` ground-truth boxes.

    Boxes are ``x, y, w, h`` in search-crop pixels. The regressed box is read at the
    cell holding the ground-truth centre. The score target is a Gaussian of standard
    deviation a quarter of the box size, and at least one cell, per axis.
    """
    if gt.ndim != 2 or gt.shape[-1] != 4:
        raise ContractError(f"Ground truth should be (B, 4), got {tuple(gt.shape)}")
    if not (gt[:, 2:] > 0).all():
        raise ContractError("Degenerate ground-truth box")

    grid = out.grid
    batch = torch.arange(gt.shape[0], device=gt.device)
    center = (gt[:, :2] + 0.5 * gt[:, 2:]) / patch
    cell = center.floor().clamp(0, grid - 1).long()
    row, col = cell[:, 1], cell[:, 0]

    sigmas = (gt[:, 2:] / patch / 4).clamp(min=1)
    target = gaussian_target(
        torch.stack([row, col], dim=-1).to(gt.dtype), sigmas, grid
    )
    classification = focal_loss(out.score_logits, target)

    offset = out.offset_map[batch, :, row, col]
    size = out.size_map[batch, :, row, col]
    pred_center = (torch.stack([col, row], dim=-1).to(gt.dtype) + offset) * patch
    pred_size = size * search_size
    pred = torch.cat([pred_center - 0.5 * pred_size, pred_center + 0.5 * pred_size], -1)
    true = torch.cat([gt[:, :2], gt[:, :2] + gt[:, 2:]], dim=-1)
    pred, true = pred / search_size, true / search_size

    l1 = (pred - true).abs().mean(dim=-1)
    overlap = giou(pred, true)
    return (classification + WEIGHT_L1 * l1 + WEIGHT_GIOU * (1 - overlap)).mean()
