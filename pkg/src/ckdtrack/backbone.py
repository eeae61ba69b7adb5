"""Four-branch transformer encoder.

Each branch turns a template crop and a search crop into a single token sequence,
search tokens first, and runs it through a stack of pre-norm transformer blocks. Two
teacher branches (RGB and thermal) are supervised only by their own tracking heads.
Two student branches receive masked inputs during training and are distilled from
the teachers and from each other. Only the students run at inference.

Tensors are batched: tokens are ``(B, N, D)``, attention weights ``(B, H, N, N)`` and
images ``(B, C, H, W)``.
"""
__all__ = [
    "ModelConfig",
    "TokenSeq",
    "Branch",
    "Block",
    "BranchOutput",
    "FourBranchModel",
    "BRANCHES",
    "STUDENTS",
    "TEACHERS",
    "patchify",
    "patch_embed",
    "concat_tokens",
    "sample_mask",
    "apply_mask",
    "block_forward",
    "forward_branch",
    "forward_branches",
    "forward_ckd",
]

from dataclasses import dataclass, field
from math import floor, sqrt
from typing import Dict, List, Mapping, Optional, Sequence, Text, Tuple

import torch
from torch import Tensor, nn

from ckdtrack.elimination import (
    ELIMINATION_MODES,
    EliminationConfig,
    filter_and_record,
    top_k_keep,
)
from ckdtrack.errors import ConfigurationError, ContractError, NumericError
from ckdtrack.head import TrackingHead
from ckdtrack.registration import lookup
from ckdtrack.sequences import SampleBatch

TEACHERS = ("teacher_rgb", "teacher_tir")
STUDENTS = ("student_rgb", "student_tir")
BRANCHES = TEACHERS + STUDENTS


@dataclass(frozen=True)
class ModelConfig:
    """Geometry of the encoder, shared by the four branches."""

    layers: int = 4
    channels: int = 64
    heads: int = 4
    patch: int = 8
    mlp_ratio: int = 4
    head_channels: int = 32
    template_size: int = 32
    search_size: int = 64
    content_only: bool = False

    def __post_init__(self):
        if self.channels % self.heads != 0:
            raise ConfigurationError(
                f"channels ({self.channels}) must be divisible by heads ({self.heads})"
            )
        for size in (self.template_size, self.search_size):
            if size % self.patch != 0:
                raise ConfigurationError(
                    f"Crop size {size} is not divisible by the patch size {self.patch}"
                )

    @property
    def grid(self) -> int:
        """Side of the search grid, in patches."""
        return self.search_size // self.patch

    @property
    def n_search(self) -> int:
        return self.grid**2

    @property
    def n_template(self) -> int:
        return (self.template_size // self.patch) ** 2


@dataclass(frozen=True)
class TokenSeq:
    """Token sequence with its layout: ``n_search`` search tokens, then template."""

    tokens: Tensor
    n_search: int
    n_template: int

    def __post_init__(self):
        if self.tokens.shape[1] != self.n_search + self.n_template:
            raise ContractError(
                f"{self.tokens.shape[1]} tokens do not match the layout "
                f"{self.n_search} + {self.n_template}"
            )

    @property
    def search(self) -> Tensor:
        return self.tokens[:, : self.n_search]

    @property
    def template(self) -> Tensor:
        return self.tokens[:, self.n_search :]

    def with_tokens(self, tokens: Tensor) -> "TokenSeq":
        return TokenSeq(tokens, self.n_search, self.n_template)


class Block(nn.Module):
    """Pre-norm transformer block returning its attention weights."""

    def __init__(self, channels: int, heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.heads = heads
        self.norm1 = nn.LayerNorm(channels)
        self.qkv = nn.Linear(channels, 3 * channels)
        self.proj = nn.Linear(channels, channels)
        self.norm2 = nn.LayerNorm(channels)
        self.fc1 = nn.Linear(channels, mlp_ratio * channels)
        self.fc2 = nn.Linear(mlp_ratio * channels, channels)

    def forward(self, x: Tensor) -> Tuple[Tensor, Tensor]:
        B, N, D = x.shape
        qkv = self.qkv(self.norm1(x)).reshape(B, N, 3, self.heads, D // self.heads)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)
        attn = torch.softmax(q @ k.transpose(-2, -1) / sqrt(D // self.heads), dim=-1)
        x = x + self.proj((attn @ v).transpose(1, 2).reshape(B, N, D))
        x = x + self.fc2(nn.functional.gelu(self.fc1(self.norm2(x))))
        return x, attn


class Branch(nn.Module):
    """Patch embedding, position embeddings, mask embedding and blocks of a branch."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        D = config.channels
        self.patch = config.patch
        self.embed = nn.Linear(config.patch**2 * 3, D)
        self.pos_search = nn.Parameter(torch.zeros(1, config.n_search, D))
        self.pos_template = nn.Parameter(torch.zeros(1, config.n_template, D))
        self.mask_token = nn.Parameter(torch.zeros(1, 1, D))
        self.blocks = nn.ModuleList(
            [Block(D, config.heads, config.mlp_ratio) for _ in range(config.layers)]
        )
        self.norm = nn.LayerNorm(D)

        nn.init.trunc_normal_(self.pos_search, std=0.02)
        nn.init.trunc_normal_(self.pos_template, std=0.02)
        for module in self.modules():
            if isinstance(module, nn.Linear):
                nn.init.trunc_normal_(module.weight, std=0.02)
                nn.init.zeros_(module.bias)


def patchify(image: Tensor, patch: int) -> Tensor:
    """Flattened ``patch x patch`` patches in row-major order, ``(B, N, p*p*C)``.

    >>> import torch
    >>> from ckdtrack.backbone import patchify
    >>> patchify(torch.zeros(2, 3, 64, 32), 8).shape
    torch.Size([2, 32, 192])
    """
    B, C, H, W = image.shape
    if H % patch != 0 or W % patch != 0:
        raise ConfigurationError(
            f"Image of size {H} x {W} is not divisible by the patch size {patch}"
        )
    x = image.reshape(B, C, H // patch, patch, W // patch, patch)
    return x.permute(0, 2, 4, 3, 5, 1).reshape(B, -1, patch * patch * C)


def patch_embed(image: Tensor, branch: Branch, region: Text = "search") -> TokenSeq:
    """Tokens of one crop: projected patches plus position embeddings.

    Single-channel (thermal) images are replicated to three channels.
    """
    if image.shape[1] == 1:
        image = image.expand(-1, 3, -1, -1)
    tokens = branch.embed(patchify(image, branch.patch))
    position = branch.pos_search if region == "search" else branch.pos_template
    if tokens.shape[1] != position.shape[1]:
        raise ConfigurationError(
            f"{tokens.shape[1]} {region} tokens, but the branch expects "
            f"{position.shape[1]}"
        )
    tokens = tokens + position
    if region == "search":
        return TokenSeq(tokens, tokens.shape[1], 0)
    return TokenSeq(tokens, 0, tokens.shape[1])


def concat_tokens(search: TokenSeq, template: TokenSeq) -> TokenSeq:
    """Single sequence with search tokens first."""
    return TokenSeq(
        torch.cat([search.search, template.template], dim=1),
        search.n_search,
        template.n_template,
    )


def sample_mask(
    n_search: int, ratio: float, generator: Optional[torch.Generator] = None
) -> Tensor:
    """Boolean mask with exactly ``floor(ratio * n_search)`` masked positions.

    >>> import torch
    >>> from ckdtrack.backbone import sample_mask
    >>> int(sample_mask(64, 0.25, torch.Generator().manual_seed(0)).sum())
    16
    >>> int(sample_mask(10, 0.75, torch.Generator().manual_seed(0)).sum())
    7
    """
    if not 0 <= ratio < 1:
        raise ConfigurationError(f"Mask ratio should be in [0, 1), got {ratio}")
    count = floor(ratio * n_search + 1e-9)
    mask = torch.zeros(n_search, dtype=torch.bool)
    mask[torch.randperm(n_search, generator=generator)[:count]] = True
    return mask


def apply_mask(seq: TokenSeq, mask: Tensor, branch: Branch) -> TokenSeq:
    """Replaces masked search tokens by the mask embedding plus their position.

    ``mask`` is ``(n_search,)`` or ``(B, n_search)``. Template tokens are untouched.
    """
    if mask.shape[-1] != seq.n_search:
        raise ContractError(
            f"Mask of length {mask.shape[-1]} for {seq.n_search} search tokens"
        )
    replacement = (branch.mask_token + branch.pos_search).to(seq.tokens.dtype)
    search = torch.where(mask[..., None], replacement, seq.search)
    return seq.with_tokens(torch.cat([search, seq.template], dim=1))


def _check_finite(tensor: Tensor, what: Text) -> None:
    if not torch.isfinite(tensor).all():
        raise NumericError(f"Non-finite values in {what}")


def block_forward(seq: TokenSeq, block: Block) -> Tuple[TokenSeq, Tensor]:
    """One block on a token sequence, returning the attention weights as well."""
    _check_finite(seq.tokens, "block input")
    tokens, attn = block(seq.tokens)
    _check_finite(tokens, "block output")
    return seq.with_tokens(tokens), attn


@dataclass
class BranchOutput:
    """What a branch produces.

    Attributes:
        features: token features after each block, ``L`` tensors ``(B, N_l, D)``
        kept: indices in the original search grid of the surviving search tokens
        final: final-normed last-layer tokens
        attention: attention weights of each block
    """

    features: List[Tensor]
    kept: Tensor
    final: TokenSeq
    attention: List[Tensor] = field(default_factory=list)


def forward_branches(
    seqs: Sequence[TokenSeq],
    branches: Sequence[Branch],
    elim: Optional[EliminationConfig] = None,
) -> List[BranchOutput]:
    """Runs branches in lockstep, so that elimination can see every modality.

    With two branches, the first is taken as RGB and the second as thermal. With a
    single branch, its own attention stands for both modalities.
    """
    if len(seqs) != len(branches) or len(seqs) not in (1, 2):
        raise ContractError("Expected one or two token sequences and branches")
    depth = {len(b.blocks) for b in branches}
    if len(depth) != 1:
        raise ContractError("Branches run in lockstep must have the same depth")
    layers = depth.pop()

    active = elim is not None and elim.mode != "none"
    if active and any(not 1 <= k <= layers for k in elim.layers):
        raise ConfigurationError(
            f"Elimination layers {elim.layers} not within [1, {layers}]"
        )
    select = None
    if active:
        select = lookup(ELIMINATION_MODES, elim.mode, "elimination mode")

    batch = seqs[0].tokens.shape[0]
    current = list(seqs)
    kept = [
        torch.arange(s.n_search, device=s.tokens.device).expand(batch, -1)
        for s in seqs
    ]
    features: List[List[Tensor]] = [[] for _ in seqs]
    attention: List[List[Tensor]] = [[] for _ in seqs]
    for layer in range(layers):
        attns = []
        for i, branch in enumerate(branches):
            current[i], attn = block_forward(current[i], branch.blocks[layer])
            attns.append(attn)
            attention[i].append(attn)

        if select is not None and layer + 1 in elim.layers:
            scores = select(
                attns[0], attns[-1], current[0].n_search, current[0].n_template
            )
            for i in range(len(current)):
                local = top_k_keep(scores[i], elim.keep_ratio)
                current[i], kept[i] = filter_and_record(current[i], local, kept[i])

        for i, seq in enumerate(current):
            features[i].append(seq.tokens)

    return [
        BranchOutput(
            features=features[i],
            kept=kept[i],
            final=current[i].with_tokens(branch.norm(current[i].tokens)),
            attention=attention[i],
        )
        for i, branch in enumerate(branches)
    ]


def forward_branch(
    seq: TokenSeq,
    branch: Branch,
    elim: Optional[EliminationConfig] = None,
) -> BranchOutput:
    """Runs a single branch, recording features after every block."""
    return forward_branches([seq], [branch], elim)[0]


class FourBranchModel(nn.Module):
    """Two teacher branches, two student branches, and three tracking heads.

    Heads are keyed by the features they read: ``rgb`` and ``tir`` for the teachers,
    ``fused`` for the concatenated students.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.branches = nn.ModuleDict({name: Branch(config) for name in BRANCHES})
        self.heads = nn.ModuleDict(
            {
                "rgb": TrackingHead(config.channels, config.head_channels),
                "tir": TrackingHead(config.channels, config.head_channels),
                "fused": TrackingHead(2 * config.channels, config.head_channels),
            }
        )

    @classmethod
    def build(cls, config: ModelConfig, seed: int = 0) -> "FourBranchModel":
        """Model initialized from its own seed, leaving the global RNG untouched."""
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            return cls(config)

    def embed(
        self, name: Text, search: Tensor, template: Tensor, mask: Optional[Tensor]
    ) -> TokenSeq:
        branch = self.branches[name]
        seq = concat_tokens(
            patch_embed(search, branch, "search"),
            patch_embed(template, branch, "template"),
        )
        return seq if mask is None else apply_mask(seq, mask, branch)


def forward_ckd(
    batch: SampleBatch,
    model: FourBranchModel,
    mode: Text = "train",
    masks: Optional[Mapping[Text, Tensor]] = None,
    elim: Optional[EliminationConfig] = None,
) -> Dict[Text, BranchOutput]:
    """Forward pass of the branches needed in a given mode.

    In "train" mode, the four branches run without elimination. ``masks`` may map
    ``student_rgb`` and ``student_tir`` to masks of their search tokens. In "infer"
    mode, only the two students run, without masks, and with elimination when
    ``elim`` is given.
    """
    if mode not in ("train", "infer"):
        raise ConfigurationError(f"Unknown forward mode {mode}")
    if mode == "infer" and masks:
        raise ContractError("Masks cannot be applied at inference")
    masks = masks or {}

    images = {"rgb": (batch.search_rgb, batch.template_rgb)}
    images["tir"] = (batch.search_tir, batch.template_tir)

    def seq(name: Text) -> TokenSeq:
        search, template = images[name.split("_")[1]]
        return model.embed(name, search, template, masks.get(name))

    outputs: Dict[Text, BranchOutput] = {}
    if mode == "train":
        for name in TEACHERS:
            outputs[name] = forward_branch(seq(name), model.branches[name])
    students = forward_branches(
        [seq(name) for name in STUDENTS],
        [model.branches[name] for name in STUDENTS],
        elim if mode == "infer" else None,
    )
    outputs.update(zip(STUDENTS, students))
    return outputs
