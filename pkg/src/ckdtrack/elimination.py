"""Candidate elimination of search tokens at inference.

At the configured layers, each search token is scored by how much the template
attends to it. Search tokens with low scores are background and are dropped for the
remaining layers. The multi-modal variant (``mce``) scores a token by the larger of
its RGB and thermal scores, so that a token kept by either modality survives in both
branches.

Elimination modes are registered functions with the signature::

    mode(attn_rgb, attn_tir, n_search, n_template) -> (scores_rgb, scores_tir)

where the attention weights are ``(B, H, N, N)`` and the scores ``(B, n_search)``.
They are stored in :py:data:`ELIMINATION_MODES`.
"""
__all__ = [
    "EliminationConfig",
    "ELIMINATION_MODES",
    "register_elimination_mode",
    "search_attention",
    "candidate_scores",
    "top_k_keep",
    "filter_and_record",
    "scatter_back",
]

from dataclasses import dataclass
from math import ceil
from typing import Callable, MutableMapping, Text, Tuple

import torch
from torch import Tensor

from ckdtrack.errors import ConfigurationError, ContractError
from ckdtrack.registration import registrator

ELIMINATION_SIGNATURE = Callable[[Tensor, Tensor, int, int], Tuple[Tensor, Tensor]]
"""Elimination mode signature."""

ELIMINATION_MODES: MutableMapping[Text, ELIMINATION_SIGNATURE] = {}
"""Dictionary of elimination modes."""


@dataclass(frozen=True)
class EliminationConfig:
    """Layers (1-based) after which tokens are eliminated, and how many are kept."""

    layers: Tuple[int, ...] = (2,)
    keep_ratio: float = 0.7
    mode: Text = "mce"

    def __post_init__(self):
        if not 0 < self.keep_ratio <= 1:
            raise ConfigurationError(
                f"keep_ratio should be in (0, 1], got {self.keep_ratio}"
            )
        object.__setattr__(self, "layers", tuple(self.layers))


@registrator(registry=ELIMINATION_MODES, loglevel=None)
def register_elimination_mode(function: ELIMINATION_SIGNATURE):
    """Decorator to register an elimination mode."""
    return function


def search_attention(attn: Tensor, n_search: int, n_template: int) -> Tensor:
    """Template-to-search attention, averaged over heads and template queries.

    The result is renormalized over the search tokens, so that it sums to one.
    """
    if attn.shape[-1] != n_search + n_template or attn.shape[-2] != attn.shape[-1]:
        raise ContractError(
            f"Attention of shape {tuple(attn.shape)} does not match the layout "
            f"{n_search} + {n_template}"
        )
    scores = attn[..., n_search:, :n_search].mean(dim=(1, 2))
    return scores / scores.sum(dim=-1, keepdim=True)


def candidate_scores(
    attn_rgb: Tensor, attn_tir: Tensor, n_search: int, n_template: int
) -> Tensor:
    """Elementwise maximum of the two modalities' search attention distributions."""
    if attn_rgb.shape != attn_tir.shape:
        raise ContractError(
            f"RGB attention {tuple(attn_rgb.shape)} and TIR attention "
            f"{tuple(attn_tir.shape)} differ"
        )
    return torch.maximum(
        search_attention(attn_rgb, n_search, n_template),
        search_attention(attn_tir, n_search, n_template),
    )


@register_elimination_mode
def mce(attn_rgb, attn_tir, n_search, n_template):
    """Both branches keep the tokens with the largest multi-modal score."""
    scores = candidate_scores(attn_rgb, attn_tir, n_search, n_template)
    return scores, scores


@register_elimination_mode
def ce(attn_rgb, attn_tir, n_search, n_template):
    """Each branch keeps the tokens its own template attends to."""
    return (
        search_attention(attn_rgb, n_search, n_template),
        search_attention(attn_tir, n_search, n_template),
    )


@register_elimination_mode
def ce_rgb_only(attn_rgb, attn_tir, n_search, n_template):
    """Both branches keep the tokens chosen from the RGB attention alone."""
    scores = search_attention(attn_rgb, n_search, n_template)
    return scores, scores


def top_k_keep(scores: Tensor, keep_ratio: float) -> Tensor:
    """Indices of the ``ceil(keep_ratio * N)`` largest scores, in ascending order.

    Ties are broken in favour of the smaller index.

    >>> import torch
    >>> from ckdtrack.elimination import top_k_keep
    >>> top_k_keep(torch.tensor([0.8, 0.7, 0.7]), 2 / 3)
    tensor([0, 1])
    """
    n = scores.shape[-1]
    k = min(n, ceil(keep_ratio * n - 1e-9))
    if k == n:
        return torch.arange(n, device=scores.device).expand_as(scores).clone()
    order = torch.sort(scores, dim=-1, descending=True, stable=True).indices
    return order[..., :k].sort(dim=-1).values


def filter_and_record(seq, kept: Tensor, global_index: Tensor):
    """Drops search tokens not in ``kept`` and composes the index bookkeeping.

    Args:
        seq: token sequence, search tokens first
        kept: ``(B, k)`` indices into the current search tokens
        global_index: ``(B, n_search)`` position in the original search grid of each
            current search token

    Returns:
        The filtered sequence and the ``(B, k)`` positions in the original grid of
        the tokens that remain.
    """
    if kept.numel() > 0 and (kept.min() < 0 or kept.max() >= seq.n_search):
        raise ContractError(
            f"Kept indices out of range for {seq.n_search} search tokens"
        )
    if global_index.shape[-1] != seq.n_search:
        raise ContractError("Global index map does not match the search tokens")

    search = seq.search.gather(
        1, kept[..., None].expand(-1, -1, seq.tokens.shape[-1])
    )
    tokens = torch.cat([search, seq.template], dim=1)
    return (
        type(seq)(tokens, kept.shape[-1], seq.n_template),
        global_index.gather(1, kept),
    )


def scatter_back(search: Tensor, global_index: Tensor, n_search: int) -> Tensor:
    """Places kept search tokens back on the full search grid, zeros elsewhere.

    >>> import torch
    >>> from ckdtrack.elimination import scatter_back
    >>> scatter_back(torch.ones(1, 2, 1), torch.tensor([[0, 2]]), 4)[0, :, 0]
    tensor([1., 0., 1., 0.])
    """
    if global_index.shape[-1] > 1:
        ordered = global_index.sort(dim=-1).values
        if (ordered[..., 1:] == ordered[..., :-1]).any():
            raise ContractError("Duplicate indices cannot be scattered back")
    if global_index.numel() > 0 and global_index.max() >= n_search:
        raise ContractError(f"Indices out of range for {n_search} search tokens")
    B, _, D = search.shape
    dense = search.new_zeros(B, n_search, D)
    return dense.scatter(1, global_index[..., None].expand(-1, -1, D), search)
