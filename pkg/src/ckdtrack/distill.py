"""Style and content distillation between branches.

The style of a modality is the per-layer, per-channel mean and standard deviation of
its token features, computed over all tokens. Its content is what is left after
instance normalization removes that style. Style distillation pulls the two students'
styles together. Content distillation pulls each student's content toward the
content of the teacher of the same modality.

Features are stacks of per-layer tensors ``(B, N, D)``, as recorded by the encoder.
All losses average over the batch.
"""
__all__ = [
    "DistillConfig",
    "StyleStats",
    "style_stats",
    "style_distill_loss",
    "instance_normalize",
    "content_distill_loss",
    "feature_distill_loss",
]

from dataclasses import dataclass
from typing import List, Sequence

import torch
from torch import Tensor

from ckdtrack.errors import ContractError

LayerFeatures = Sequence[Tensor]
"""Per-layer token features, each ``(B, N, D)``."""


@dataclass(frozen=True)
class DistillConfig:
    """Weights of the distillation losses and the variance guard."""

    lambda_sd: float = 2.0
    lambda_cd: float = 1.0
    lambda_fd: float = 2.0
    epsilon: float = 1e-5


@dataclass(frozen=True)
class StyleStats:
    """Per-layer channel statistics, each ``(L, B, D)``."""

    mu: Tensor
    sigma: Tensor

    @property
    def layers(self) -> int:
        return self.mu.shape[0]


def _check_pair(a: LayerFeatures, b: LayerFeatures, what: str) -> None:
    if len(a) != len(b):
        raise ContractError(f"{what}: {len(a)} layers against {len(b)}")
    for layer, (x, y) in enumerate(zip(a, b)):
        if x.shape != y.shape:
            raise ContractError(
                f"{what}: shapes {tuple(x.shape)} and {tuple(y.shape)} differ at "
                f"layer {layer}"
            )


def style_stats(features: LayerFeatures) -> StyleStats:
    """Mean and population standard deviation over tokens.

    >>> import torch
    >>> from ckdtrack.distill import style_stats
    >>> stats = style_stats([torch.tensor([[[1.0, 2.0], [3.0, 6.0]]])])
    >>> stats.mu, stats.sigma
    (tensor([[[2., 4.]]]), tensor([[[1., 2.]]]))
    """
    if len(features) == 0:
        raise ContractError("No layers to compute style statistics from")
    stacked = torch.stack(list(features))
    return StyleStats(
        mu=stacked.mean(dim=-2), sigma=stacked.var(dim=-2, unbiased=False).sqrt()
    )


def style_distill_loss(rgb: LayerFeatures, tir: LayerFeatures) -> Tensor:
    """Squared distance between the styles of two feature stacks.

    Mean over channels of the squared differences of means plus that of standard
    deviations, averaged over layers and batch. Gradients flow to both arguments.
    """
    _check_pair(rgb, tir, "style distillation")
    a, b = style_stats(rgb), style_stats(tir)
    per_layer = ((a.mu - b.mu) ** 2).mean(dim=-1) + ((a.sigma - b.sigma) ** 2).mean(
        dim=-1
    )
    return per_layer.mean()


def instance_normalize(features: LayerFeatures, epsilon: float = 1e-5) -> List[Tensor]:
    """Removes each channel's token mean and scales it to unit variance.

    >>> import torch
    >>> from ckdtrack.distill import instance_normalize
    >>> instance_normalize([torch.tensor([[[1.0], [3.0]]])], epsilon=1e-12)[0][0, :, 0]
    tensor([-1.,  1.])
    """
    result = []
    for f in features:
        mu = f.mean(dim=-2, keepdim=True)
        var = f.var(dim=-2, unbiased=False, keepdim=True)
        result.append((f - mu) / torch.sqrt(var + epsilon))
    return result


def content_distill_loss(
    teacher: LayerFeatures, student: LayerFeatures, epsilon: float = 1e-5
) -> Tensor:
    """Mean squared difference of instance-normalized features, averaged over layers.

    Teacher features are detached: the loss only ever moves the student.
    """
    _check_pair(teacher, student, "content distillation")
    teacher_content = instance_normalize([t.detach() for t in teacher], epsilon)
    student_content = instance_normalize(student, epsilon)
    return torch.stack(
        [((t - s) ** 2).mean() for t, s in zip(teacher_content, student_content)]
    ).mean()


def feature_distill_loss(a: LayerFeatures, b: LayerFeatures) -> Tensor:
    """Mean squared difference of raw features, averaged over layers."""
    _check_pair(a, b, "feature distillation")
    return torch.stack([((x - y) ** 2).mean() for x, y in zip(a, b)]).mean()
