"""Cosine-margin deep metric learning: losses, a small trainable network, evaluation."""

from .losses import (
    ClassHead,
    FeatureBatch,
    LossConfig,
    LossOutput,
    LossVariant,
    adaptive_margins,
    dlmc_term,
    hard_mask,
    joint_loss,
    lmc_term,
    normalized_softmax,
    softmax_ce,
    triplet_variant,
)

__version__ = "0.1.0"
