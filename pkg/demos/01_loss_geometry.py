"""
Loss geometry on a toy batch
============================

Walk through every loss variant on one small hand-made batch and print what
each term sees: intra-class cosines, which samples violate the margin, which
ones the softmax classifier gets wrong, and the per-class adaptive margins.
"""

import numpy as np

from admlkit import ClassHead, FeatureBatch, LossConfig, LossVariant, joint_loss
from admlkit.losses import adaptive_margins, hard_mask
from admlkit.numcore import cosine_matrix

# Three classes in 2-D, weight columns at 0, 120 and 240 degrees.
angles = np.radians([0, 120, 240])
W = np.vstack([np.cos(angles), np.sin(angles)])

# Six samples, two per class, at varying angular offsets from their class
# direction (the last one sits closer to class 0 than to its own class 2).
offsets = np.radians([5, 40, -10, 55, 20, 170])
labels = np.array([0, 0, 1, 1, 2, 2])
theta = angles[labels] + offsets
x = 3.0 * np.vstack([np.cos(theta), np.sin(theta)]).T

batch = FeatureBatch(x, labels)
head = ClassHead(W, np.full(3, 0.2), scale=4.0)

# %% Intra-class cosines and the hard-sample mask
cos = cosine_matrix(x, W)
intra = cos[np.arange(6), labels]
print("intra-class cosines:", np.round(intra, 3))
print("hard (misclassified) mask:", hard_mask(batch, head))

# %% Adaptive margins: top p of each class's cosines, summed over 1 + k
m = adaptive_margins(batch, head.copy(), alpha0=0.2, p=0.6)
print("adaptive margins (alpha0=0.2, p=0.6):", np.round(m, 3))

# %% Every variant at lambda = 1 so the metric terms are visible
print(f"\n{'variant':<11} {'loss':>8} {'violations':>10} {'hard':>5}")
for v in LossVariant:
    cfg = LossConfig(variant=v, lam=1.0, alpha=0.5, alpha0=0.2, p=0.6)
    out = joint_loss(batch, head.copy(), cfg)
    d = out.diagnostics
    print(f"{v.value:<11} {out.loss:8.4f} {d.violation_count:10d} {d.hard_count:5d}")
