"""The three contrastive training objectives over attention similarities:
squared-distance-to-target (S pushed to 100 for positive pairs, 0 for
negative pairs), hinge with margin, and InfoNCE (negated log-softmax,
computed via logsumexp).

Hinge and InfoNCE expect O(1) logits, so raw similarities are divided by a
configurable temperature (default 100) first.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .model import similarity

POSITIVE_TARGET = 100.0
NEGATIVE_TARGET = 0.0
DEFAULT_TEMPERATURE = 100.0
DEFAULT_MARGIN = 1.0


class BatchInvariantError(ValueError):
    """The contrastive batch violates its class-structure invariants."""


@dataclass
class ContrastiveBatch:
    """Anchor pair plus positive/negative audio and image embeddings.

    Audio entries are (D,) word embeddings; image entries are (N, D) pixel
    embeddings. Class metadata is carried so the training invariants
    (positives match the anchor class; negatives are familiar classes other
    than the anchor; novel classes never appear) can be enforced.
    """

    anchor_audio: ad.Tensor
    anchor_image: ad.Tensor
    pos_audio: list[ad.Tensor]
    pos_images: list[ad.Tensor]
    neg_audio: list[ad.Tensor]
    neg_images: list[ad.Tensor]
    anchor_class: str = ""
    pos_audio_classes: list[str] = field(default_factory=list)
    pos_image_classes: list[str] = field(default_factory=list)
    neg_audio_classes: list[str] = field(default_factory=list)
    neg_image_classes: list[str] = field(default_factory=list)
    novel_classes: frozenset[str] = frozenset()

    @property
    def n_pos(self) -> int:
        return len(self.pos_audio)

    @property
    def n_neg(self) -> int:
        return len(self.neg_audio)

    def validate(self) -> None:
        if len(self.pos_images) != self.n_pos or len(self.neg_images) != self.n_neg:
            raise BatchInvariantError("positive/negative list lengths disagree")
        if self.n_neg < 1:
            raise BatchInvariantError("at least one negative is required")
        if self.anchor_class:
            for cls in self.pos_audio_classes + self.pos_image_classes:
                if cls != self.anchor_class:
                    raise BatchInvariantError(
                        f"positive of class {cls!r} does not match anchor {self.anchor_class!r}")
            for cls in self.neg_audio_classes + self.neg_image_classes:
                if cls == self.anchor_class:
                    raise BatchInvariantError("negative shares the anchor class")
                if cls in self.novel_classes:
                    raise BatchInvariantError(f"novel class {cls!r} used as negative")
            if self.anchor_class in self.novel_classes:
                raise BatchInvariantError("anchor class is novel")


def _score(a_emb: ad.Tensor, v_embs: ad.Tensor) -> ad.Tensor:
    s, _ = similarity(a_emb, v_embs)
    return s


def mattnet_loss_terms(b: ContrastiveBatch) -> list[ad.Tensor]:
    """The individual squared-distance terms; 1 + 2*N_neg + 2*N_pos of them."""
    b.validate()
    terms = [ad.squared_difference(_score(b.anchor_audio, b.anchor_image), POSITIVE_TARGET)]
    for a_neg in b.neg_audio:
        terms.append(ad.squared_difference(_score(a_neg, b.anchor_image), NEGATIVE_TARGET))
    for v_neg in b.neg_images:
        terms.append(ad.squared_difference(_score(b.anchor_audio, v_neg), NEGATIVE_TARGET))
    for v_pos in b.pos_images:
        terms.append(ad.squared_difference(_score(b.anchor_audio, v_pos), POSITIVE_TARGET))
    for a_pos in b.pos_audio:
        terms.append(ad.squared_difference(_score(a_pos, b.anchor_image), POSITIVE_TARGET))
    return terms


def mattnet_loss(b: ContrastiveBatch) -> ad.Tensor:
    """Squared-distance contrastive objective: S of matched pairs pushed to
    100, mismatched pairs to 0."""
    terms = mattnet_loss_terms(b)
    stacked = ad.concat([ad.reshape(t, (1,)) for t in terms], axis=0)
    return ad.reduce_sum(stacked)


def hinge_loss(b: ContrastiveBatch, margin: float = DEFAULT_MARGIN,
               temperature: float = DEFAULT_TEMPERATURE) -> ad.Tensor:
    """Margin ranking loss over within-batch negatives, both directions."""
    if margin <= 0:
        raise ValueError("margin must be positive")
    b.validate()
    inv_t = 1.0 / temperature
    s_anchor = _score(b.anchor_audio, b.anchor_image) * inv_t
    terms = []
    for a_neg in b.neg_audio:
        terms.append(ad.relu(_score(a_neg, b.anchor_image) * inv_t - s_anchor + margin))
    for v_neg in b.neg_images:
        terms.append(ad.relu(_score(b.anchor_audio, v_neg) * inv_t - s_anchor + margin))
    stacked = ad.concat([ad.reshape(t, (1,)) for t in terms], axis=0)
    return ad.reduce_sum(stacked)


def infonce_loss(b: ContrastiveBatch, temperature: float = DEFAULT_TEMPERATURE) -> ad.Tensor:
    """Negated log-softmax of the positive pair against negatives, summed
    over the image-negative and audio-negative directions."""
    b.validate()
    inv_t = 1.0 / temperature
    s_anchor = _score(b.anchor_audio, b.anchor_image) * inv_t
    loss = None
    for negatives in (
        [_score(b.anchor_audio, v_neg) * inv_t for v_neg in b.neg_images],
        [_score(a_neg, b.anchor_image) * inv_t for a_neg in b.neg_audio],
    ):
        logits = ad.concat([ad.reshape(t, (1,)) for t in [s_anchor] + negatives], axis=0)
        direction = ad.logsumexp(logits) - s_anchor
        loss = direction if loss is None else loss + direction
    return loss


LOSS_KINDS = ("mattnet", "hinge", "infonce")


def compute_loss(kind: str, b: ContrastiveBatch, margin: float = DEFAULT_MARGIN,
                 temperature: float = DEFAULT_TEMPERATURE) -> ad.Tensor:
    if kind == "mattnet":
        return mattnet_loss(b)
    if kind == "hinge":
        return hinge_loss(b, margin=margin, temperature=temperature)
    if kind == "infonce":
        return infonce_loss(b, temperature=temperature)
    raise ValueError(f"unknown loss kind {kind!r} (expected one of {LOSS_KINDS})")
