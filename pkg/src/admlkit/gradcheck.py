"""Central finite-difference checks of the analytic loss gradients."""

from dataclasses import dataclass

import numpy as np

from .losses import (
    ClassHead,
    CosineCache,
    FeatureBatch,
    LossConfig,
    LossVariant,
    adaptive_margins,
    dlmc_term,
    joint_loss,
    selection_count,
    triplet_variant,
)
from .numcore import make_rng

STEP = 1e-5
KINK_TOL = 1e-3


def relative_error(analytic, numeric) -> float:
    a = np.concatenate([np.ravel(v) for v in analytic])
    n = np.concatenate([np.ravel(v) for v in numeric])
    denom = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
    return float(np.linalg.norm(a - n) / denom)


def central_difference(f, params, step=STEP):
    """Gradient of scalar ``f(*params)`` with respect to each array in ``params``.

    Arrays are perturbed in place and restored.
    """
    grads = []
    for arr in params:
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + step
            up = f(*params)
            flat[idx] = orig - step
            down = f(*params)
            flat[idx] = orig
            gflat[idx] = (up - down) / (2 * step)
        grads.append(g)
    return grads


def kink_distance(batch: FeatureBatch, head: ClassHead, cfg: LossConfig) -> float:
    """Smallest distance of the instance to a hinge kink, argmax tie or top-K tie.

    Only the non-smooth points that matter to ``cfg.variant`` are considered.
    """
    v = cfg.variant
    cache = CosineCache(batch, head)
    labels = batch.labels
    rows = np.arange(len(labels))
    intra = cache.intra(labels)
    dist = [np.inf]
    if v in (LossVariant.LMC, LossVariant.HLMC, LossVariant.NLMC):
        dist.append(np.abs(cfg.alpha - intra).min())
    if v.adaptive:
        dist.append(np.abs(head.margins[labels] - intra).min())
    if v is LossVariant.HLMC:
        logits = np.sort(batch.features @ head.weights, axis=1)
        dist.append((logits[:, -1] - logits[:, -2]).min())
    if v is LossVariant.DLMC:
        n = head.num_classes
        k = selection_count(cfg.p, n - 1)
        other = cache.cos.copy()
        other[rows, labels] = np.inf
        other = np.sort(other, axis=1)[:, ::-1][:, 1:]
        if k < n - 1:
            dist.append((other[:, k - 1] - other[:, k]).min())
        top = other[:, :k] / k
        mx = top.max(axis=1)
        lse = mx + np.log(np.exp(top - mx[:, None]).sum(axis=1))
        dist.append(np.abs(lse - intra + cfg.alpha).min())
    return float(min(dist))


def random_instance(rng, cfg: LossConfig, m=8, dim=6, classes=None):
    n = int(classes if classes is not None else rng.integers(4, 7))
    x = rng.normal(size=(m, dim))
    w = rng.normal(size=(dim, n))
    labels = rng.integers(0, n, size=m)
    head = ClassHead(w, np.full(n, cfg.alpha0), scale=float(rng.uniform(1.0, 4.0)))
    batch = FeatureBatch(x, labels)
    if cfg.variant.adaptive:
        adaptive_margins(batch, head, cfg.alpha0, cfg.p)
    return batch, head


def gradient_error(batch, head, cfg, corrupt=0.0) -> float:
    """Relative error between ``joint_loss`` gradients and finite differences.

    Adaptive margins on ``head`` are frozen. ``corrupt`` adds a deliberate
    offset to the analytic feature gradient (harness self-test).
    """
    out = joint_loss(batch, head, cfg, update_margins=False)
    x = batch.features.copy()
    w = head.weights.copy()
    s = np.array([head.scale])
    labels = batch.labels
    margins = head.margins.copy()

    def f(x_, w_, s_=s):
        h = ClassHead(w_, margins, float(s_[0]))
        return joint_loss(FeatureBatch(x_, labels), h, cfg, update_margins=False).loss

    analytic = [out.grad_features + corrupt, out.grad_weights]
    params = [x, w]
    if cfg.variant.normalized and cfg.scale_learnable:
        analytic.append(np.array([out.grad_scale]))
        params.append(s)
    numeric = central_difference(f, params)
    return relative_error(analytic, numeric)


@dataclass
class CheckResult:
    variant: LossVariant
    trials: int
    max_rel_error: float
    rejected: int
    reduction_ok: bool = True
    tolerance: float = 1e-5

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance and self.reduction_ok


def check_variant(cfg: LossConfig, trials=100, seed=0, corrupt=0.0,
                  tolerance=1e-5, max_draws=None) -> CheckResult:
    """Run ``trials`` kink-free random instances for one loss configuration.

    For DLMC with a single selected neighbour the value and gradients are also
    compared bit-for-bit with :func:`triplet_variant`.
    """
    rng = make_rng(seed)
    max_draws = max_draws or 50 * trials
    worst, done, rejected = 0.0, 0, 0
    reduction_ok = True
    while done < trials:
        if done + rejected >= max_draws:
            raise RuntimeError(f"too many rejected draws for {cfg.variant.value}")
        batch, head = random_instance(rng, cfg)
        if kink_distance(batch, head, cfg) <= KINK_TOL:
            rejected += 1
            continue
        worst = max(worst, gradient_error(batch, head, cfg, corrupt))
        if cfg.variant is LossVariant.DLMC and selection_count(cfg.p, head.num_classes - 1) == 1:
            reduction_ok &= reduction_matches(batch, head, cfg.alpha, cfg.p)
        done += 1
    return CheckResult(cfg.variant, trials, worst, rejected, reduction_ok, tolerance)


def reduction_matches(batch, head, alpha, p) -> bool:
    a = dlmc_term(batch, head, alpha, p)
    b = triplet_variant(batch, head, alpha)
    return (a.loss == b.loss
            and np.array_equal(a.grad_features, b.grad_features)
            and np.array_equal(a.grad_weights, b.grad_weights))
