"""Ablation variants: which distillation terms and masking a run trains with.

Variants are registered functions returning a :py:class:`Variant`, and looked up by
name from ``train.variant``:

- ``baseline``: task losses only
- ``sd``: plus style distillation between the students
- ``sd+cd``: plus content distillation from the teachers
- ``sd+cd+mm``: plus random masking of the students' search tokens
- ``ckd``: the full method, same terms as ``sd+cd+mm``
- ``in``: no distillation, students track from instance-normalized features only
- ``fd``: plain feature distillation between the students, without decoupling
"""
__all__ = ["Variant", "VARIANTS", "register_variant", "get_variant"]

from dataclasses import dataclass
from typing import Callable, MutableMapping, Text

from ckdtrack.registration import registrator


@dataclass(frozen=True)
class Variant:
    """Loss terms and masking enabled in a training run."""

    name: Text
    style: bool = False
    content: bool = False
    masking: bool = False
    feature: bool = False
    content_only: bool = False


VARIANTS: MutableMapping[Text, Callable[[], Variant]] = {}
"""Dictionary of ablation variants."""


@registrator(registry=VARIANTS, logname="variant", loglevel=None)
def register_variant(function: Callable[[], Variant]):
    """Decorator to register a variant."""
    return function


def get_variant(name: Text) -> Variant:
    """Variant registered under ``name``, case-insensitive.

    >>> from ckdtrack.variants import get_variant
    >>> get_variant("SD+CD")
    Variant(name='sd+cd', style=True, content=True, masking=False, feature=False, content_only=False)
    """  # noqa: E501
    from ckdtrack.registration import lookup

    return lookup(VARIANTS, name, "variant")()


@register_variant
def baseline() -> Variant:
    return Variant("baseline")


@register_variant(name="sd")
def style_only() -> Variant:
    return Variant("sd", style=True)


@register_variant(name="sd+cd")
def style_and_content() -> Variant:
    return Variant("sd+cd", style=True, content=True)


@register_variant(name="sd+cd+mm")
def style_content_masking() -> Variant:
    return Variant("sd+cd+mm", style=True, content=True, masking=True)


@register_variant
def ckd() -> Variant:
    """Coupled distillation: style and content distillation with masked students."""
    return Variant("ckd", style=True, content=True, masking=True)


@register_variant(name="in")
def instance_norm_only() -> Variant:
    return Variant("in", content_only=True)


@register_variant(name="fd")
def feature_only() -> Variant:
    return Variant("fd", feature=True)
