"""Joint online training of the four branches and three heads.

Each step samples fresh masks for the students, runs the four branches, and
minimizes the sum of the three head losses plus the weighted distillation terms
enabled by the variant:

.. math::

    L = L_{task} + \\lambda_{cd} L_{cd} + \\lambda_{sd} L_{sd} + \\lambda_{fd} L_{fd}

Teachers learn from their own heads only. Inside content distillation they are
constants.

The loss breakdown of every step is published on the ``loss_breakdown`` topic, see
:py:class:`ckdtrack.outputs.losslog.LossLog`.
"""
__all__ = [
    "TrainConfig",
    "LossBreakdown",
    "Trainer",
    "total_loss",
    "train_step",
    "make_optimizer",
    "sample_masks",
    "save_checkpoint",
    "load_checkpoint",
    "grad_check",
]

from dataclasses import asdict, dataclass
from logging import getLogger
from pathlib import Path
from typing import (
    TYPE_CHECKING,
    Callable,
    Dict,
    List,
    Optional,
    Sequence,
    Text,
    Union,
)

import numpy as np
import torch
from torch import Tensor

from ckdtrack.backbone import STUDENTS, FourBranchModel, ModelConfig, forward_ckd
from ckdtrack.distill import (
    DistillConfig,
    content_distill_loss,
    feature_distill_loss,
    style_distill_loss,
)
from ckdtrack.errors import CheckpointError, ContractError, NonFiniteLoss
from ckdtrack.head import task_loss, track_heads
from ckdtrack.sequences import SampleBatch

if TYPE_CHECKING:
    from ckdtrack.readers.toml import RunConfig
    from ckdtrack.sequences import RGBTSequence
    from ckdtrack.variants import Variant

LOSS_TOPIC = "loss_breakdown"
"""Topic on which each step publishes its :py:class:`LossBreakdown`."""


@dataclass(frozen=True)
class TrainConfig:
    """Training loop settings."""

    variant: Text = "ckd"
    steps: int = 2000
    batch_size: int = 8
    mask_ratio: float = 0.25
    lr_backbone: float = 2e-4
    lr_head: float = 2e-3
    weight_decay: float = 1e-4
    max_gap: int = 10
    center_jitter: float = 0.25
    scale_jitter: float = 0.15
    log_every: int = 100


@dataclass(frozen=True)
class LossBreakdown:
    """Values of the loss terms at one step. Disabled terms are zero."""

    step: int
    task: float
    cd: float
    sd: float
    fd: float
    total: float

    def to_dict(self) -> Dict[Text, float]:
        return asdict(self)


def total_loss(
    task: Tensor,
    cd: Tensor,
    sd: Tensor,
    cfg: DistillConfig,
    fd: Union[Tensor, float] = 0.0,
    step: int = -1,
) -> Tensor:
    """Weighted sum of the task and distillation losses.

    >>> import torch
    >>> from ckdtrack.distill import DistillConfig
    >>> from ckdtrack.train import total_loss
    >>> config = DistillConfig(lambda_cd=1.0, lambda_sd=2.0)
    >>> total_loss(torch.tensor(1.0), torch.tensor(0.5), torch.tensor(0.25), config)
    tensor(2.)
    """
    terms = {"task": task, "cd": cd, "sd": sd, "fd": torch.as_tensor(fd)}
    for name, value in terms.items():
        if not torch.isfinite(value).all():
            raise NonFiniteLoss(name, float(value), step)
    total = (
        task + cfg.lambda_cd * cd + cfg.lambda_sd * sd + cfg.lambda_fd * terms["fd"]
    )
    if not torch.isfinite(total):
        raise NonFiniteLoss("total", float(total), step)
    return total


def make_optimizer(model: FourBranchModel, cfg: TrainConfig) -> torch.optim.Optimizer:
    """AdamW with separate learning rates for the encoder and the heads."""
    return torch.optim.AdamW(
        [
            {"params": model.branches.parameters(), "lr": cfg.lr_backbone},
            {"params": model.heads.parameters(), "lr": cfg.lr_head},
        ],
        betas=(0.9, 0.999),
        weight_decay=cfg.weight_decay,
    )


def sample_masks(
    batch_size: int, n_search: int, ratio: float, generator: torch.Generator
) -> Dict[Text, Tensor]:
    """Independent ``(B, n_search)`` masks for each student and each sample."""
    from ckdtrack.backbone import sample_mask

    return {
        name: torch.stack(
            [sample_mask(n_search, ratio, generator) for _ in range(batch_size)]
        )
        for name in STUDENTS
    }


def train_step(
    model: FourBranchModel,
    batch: SampleBatch,
    optimizer: torch.optim.Optimizer,
    variant: "Variant",
    train_cfg: TrainConfig,
    distill_cfg: DistillConfig,
    generator: torch.Generator,
    step: int = 0,
) -> LossBreakdown:
    """One optimizer update of the whole model.

    The model is updated in place. The breakdown is returned and published on
    :py:data:`LOSS_TOPIC`.
    """
    from pubsub import pub

    if len(batch) == 0:
        raise ContractError("Cannot train on an empty batch")
    config = model.config
    model.train()

    masks = None
    if variant.masking and train_cfg.mask_ratio > 0:
        masks = sample_masks(
            len(batch), config.n_search, train_cfg.mask_ratio, generator
        )
    outputs = forward_ckd(batch, model, "train", masks)
    heads = track_heads(model, outputs)

    task = sum(
        task_loss(heads[name], batch.gt, config.patch, config.search_size)
        for name in ("fused", "rgb", "tir")
    )
    zero = task.new_zeros(())
    cd = zero
    if variant.content:
        cd = sum(
            content_distill_loss(
                outputs[f"teacher_{m}"].features,
                outputs[f"student_{m}"].features,
                distill_cfg.epsilon,
            )
            for m in ("rgb", "tir")
        )
    sd = zero
    if variant.style:
        sd = style_distill_loss(
            outputs["student_rgb"].features, outputs["student_tir"].features
        )
    fd = zero
    if variant.feature:
        fd = feature_distill_loss(
            outputs["student_rgb"].features, outputs["student_tir"].features
        )
    total = total_loss(task, cd, sd, distill_cfg, fd=fd, step=step)

    optimizer.zero_grad()
    total.backward()
    optimizer.step()

    breakdown = LossBreakdown(
        step=step,
        task=float(task),
        cd=float(cd),
        sd=float(sd),
        fd=float(fd),
        total=float(total),
    )
    pub.sendMessage(LOSS_TOPIC, breakdown=breakdown)
    return breakdown


class Trainer:
    """Owns the model, the optimizer and the random streams of a training run.

    Batches are drawn from a numpy generator and masks from a torch generator, both
    seeded from the run seed, so that a run is reproducible.
    """

    def __init__(self, config: "RunConfig", model: Optional[FourBranchModel] = None):
        from ckdtrack.variants import get_variant

        self.config = config
        self.variant = get_variant(config.train.variant)
        self.model = model or FourBranchModel.build(config.model, seed=config.seed)
        self.optimizer = make_optimizer(self.model, config.train)
        self.generator = torch.Generator().manual_seed(config.seed)
        self.rng = np.random.default_rng(config.seed)
        self.step = 0

    def next_batch(self, sequences: Sequence["RGBTSequence"]) -> SampleBatch:
        from ckdtrack.sequences import collate, sample_training_pair

        cfg = self.config.train
        picks = self.rng.integers(0, len(sequences), size=cfg.batch_size)
        samples = [
            sample_training_pair(
                sequences[i],
                self.rng,
                self.config.crop,
                max_gap=cfg.max_gap,
                center_jitter=cfg.center_jitter,
                scale_jitter=cfg.scale_jitter,
            )
            for i in picks
        ]
        dtype = next(self.model.parameters()).dtype
        return collate(samples, dtype=dtype)

    def fit(
        self, sequences: Sequence["RGBTSequence"], steps: Optional[int] = None
    ) -> List[LossBreakdown]:
        """Runs ``steps`` training steps, defaulting to ``train.steps``."""
        if len(sequences) == 0:
            raise ContractError("No training sequences")
        steps = self.config.train.steps if steps is None else steps
        every = self.config.train.log_every
        logger = getLogger(__name__)
        logger.info(
            f"Training variant {self.variant.name} for {steps} steps "
            f"on {len(sequences)} sequences"
        )

        history = []
        for _ in range(steps):
            breakdown = train_step(
                self.model,
                self.next_batch(sequences),
                self.optimizer,
                self.variant,
                self.config.train,
                self.config.distill,
                self.generator,
                step=self.step,
            )
            history.append(breakdown)
            if self.step % every == 0 or self.step == steps - 1:
                logger.info(
                    f"step {breakdown.step}: total {breakdown.total:.4f}, "
                    f"task {breakdown.task:.4f}, cd {breakdown.cd:.4f}, "
                    f"sd {breakdown.sd:.4f}, fd {breakdown.fd:.4f}"
                )
            self.step += 1
        return history


def save_checkpoint(model: FourBranchModel, path: Union[Text, Path]) -> Path:
    """Saves every named parameter with its shape and the model geometry."""
    from ckdtrack.defaults import CHECKPOINT_VERSION

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = model.state_dict()
    torch.save(
        {
            "format": CHECKPOINT_VERSION,
            "config": asdict(model.config),
            "shapes": {k: list(v.shape) for k, v in state.items()},
            "state": state,
        },
        path,
    )
    getLogger(__name__).info(f"Saved checkpoint to {path}")
    return path


def load_checkpoint(
    path: Union[Text, Path], config: Optional[ModelConfig] = None
) -> FourBranchModel:
    """Loads a model saved with :py:func:`save_checkpoint`.

    When ``config`` is given, it must match the geometry stored in the checkpoint.
    """
    from ckdtrack.defaults import CHECKPOINT_VERSION

    path = Path(path)
    if not path.is_file():
        raise CheckpointError(path, "file does not exist")
    try:
        content = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as error:
        raise CheckpointError(path, f"corrupt file ({error})") from error
    if not isinstance(content, dict) or content.get("format") != CHECKPOINT_VERSION:
        found = content.get("format") if isinstance(content, dict) else None
        raise CheckpointError(
            path, f"expected format {CHECKPOINT_VERSION}, found {found}"
        )

    stored = ModelConfig(**content["config"])
    if config is not None and config != stored:
        raise CheckpointError(path, f"geometry {stored} differs from {config}")
    state = content["state"]
    for name, shape in content["shapes"].items():
        if name not in state or list(state[name].shape) != shape:
            raise CheckpointError(path, f"parameter {name} does not match its shape")

    model = FourBranchModel(stored)
    floating = [v.dtype for v in state.values() if v.is_floating_point()]
    if floating:
        model = model.to(floating[0])
    try:
        model.load_state_dict(state, strict=True)
    except RuntimeError as error:
        raise CheckpointError(path, str(error)) from error
    return model


def grad_check(
    closure: Callable[[], Tensor],
    params: Sequence[Tensor],
    epsilon: float = 1e-6,
    n_coords: int = 200,
    generator: Optional[torch.Generator] = None,
    floor: float = 1e-5,
) -> float:
    """Largest relative error between analytic and central-difference gradients.

    Checks ``n_coords`` coordinates drawn at random across ``params``, or all of them
    if there are fewer. The relative error of a coordinate is
    ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``. Meant for double
    precision.

    >>> import torch
    >>> from ckdtrack.train import grad_check
    >>> x = torch.randn(10, dtype=torch.float64, requires_grad=True)
    >>> grad_check(lambda: (x**2).sum(), [x]) < 1e-8
    True
    """
    params = list(params)
    analytic = torch.autograd.grad(closure(), params, allow_unused=True)
    analytic = [
        torch.zeros_like(p) if g is None else g.detach()
        for p, g in zip(params, analytic)
    ]

    sizes = [p.numel() for p in params]
    offsets = np.cumsum([0] + sizes)
    total = int(offsets[-1])
    chosen = torch.randperm(total, generator=generator)[: min(n_coords, total)]

    worst = 0.0
    with torch.no_grad():
        for flat in chosen.tolist():
            which = int(np.searchsorted(offsets, flat, side="right") - 1)
            index = flat - int(offsets[which])
            values = params[which].view(-1)
            original = values[index].item()
            values[index] = original + epsilon
            plus = float(closure())
            values[index] = original - epsilon
            minus = float(closure())
            values[index] = original
            numeric = (plus - minus) / (2 * epsilon)
            exact = float(analytic[which].reshape(-1)[index])
            scale = max(abs(exact), abs(numeric), floor)
            worst = max(worst, abs(exact - numeric) / scale)
    return worst
