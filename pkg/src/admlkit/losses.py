"""Cosine-margin losses with hand-derived gradients.

Every loss takes a :class:`FeatureBatch` (features ``x_i`` as rows, integer
labels) and a :class:`ClassHead` (class weights as columns, per-class adaptive
margins and the shared scale ``s``) and returns a :class:`LossOutput` holding
the value and gradients with respect to the features, the class weights and
the scale.

Hinges use the subgradient 0 at the kink. The hard-sample mask, the adaptive
margins and the top-K neighbour selection are treated as constants when
differentiating.
"""

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .numcore import (
    EPS,
    ShapeError,
    as_matrix,
    log_softmax_rows,
    normalize_backward,
    row_norms,
)


class LossVariant(str, enum.Enum):
    SOFTMAX = "Softmax"
    LMC = "LMC"
    HLMC = "HLMC"
    MALMC = "MALMC"
    NLMC = "NLMC"
    NLMC_MALMC = "NLMC_MALMC"
    DLMC = "DLMC"

    @classmethod
    def parse(cls, name):
        if isinstance(name, cls):
            return name
        key = str(name).strip().upper().replace("+", "_")
        for v in cls:
            if v.value.upper() == key:
                return v
        raise ValueError(f"unknown loss variant {name!r}")

    @property
    def normalized(self) -> bool:
        """True for variants whose softmax runs on ``s^2 * cos``."""
        return self in (LossVariant.NLMC, LossVariant.NLMC_MALMC, LossVariant.DLMC)

    @property
    def adaptive(self) -> bool:
        return self in (LossVariant.MALMC, LossVariant.NLMC_MALMC)


@dataclass(frozen=True)
class LossConfig:
    variant: LossVariant = LossVariant.SOFTMAX
    lam: float = 0.1
    alpha: float = 0.5
    alpha0: float = 0.2
    p: float = 0.6
    scale_init: float = 4.0
    scale_learnable: bool = True

    def __post_init__(self):
        object.__setattr__(self, "variant", LossVariant.parse(self.variant))
        if not self.lam >= 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if not 0 <= self.alpha <= 1:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        if not 0 <= self.alpha0 <= 1:
            raise ValueError(f"alpha0 must be in [0, 1], got {self.alpha0}")
        if not 0 < self.p <= 1:
            raise ValueError(f"p must be in (0, 1], got {self.p}")
        if not self.scale_init > 0:
            raise ValueError(f"scale_init must be > 0, got {self.scale_init}")


@dataclass
class FeatureBatch:
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.features = as_matrix(self.features)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.labels.shape[0] != self.features.shape[0]:
            raise ShapeError(
                f"{self.features.shape[0]} feature rows but {self.labels.shape[0]} labels")


SCALE_MIN = 1e-3


@dataclass
class ClassHead:
    weights: np.ndarray
    margins: np.ndarray
    scale: float = 4.0

    def __post_init__(self):
        self.weights = as_matrix(self.weights)
        self.margins = np.asarray(self.margins, dtype=np.float64).reshape(-1)
        if self.margins.shape[0] != self.weights.shape[1]:
            raise ShapeError("one margin per class column required")
        self.scale = max(float(self.scale), SCALE_MIN)

    @property
    def num_classes(self) -> int:
        return self.weights.shape[1]

    @property
    def dim(self) -> int:
        return self.weights.shape[0]

    @classmethod
    def init(cls, dim, num_classes, rng, alpha0=0.2, scale=4.0):
        """Glorot-uniform weights, margins at ``alpha0``."""
        limit = math.sqrt(6.0 / (dim + num_classes))
        w = rng.uniform(-limit, limit, size=(dim, num_classes))
        return cls(w, np.full(num_classes, float(alpha0)), scale)

    def copy(self) -> "ClassHead":
        return ClassHead(self.weights.copy(), self.margins.copy(), self.scale)


@dataclass
class Diagnostics:
    mean_intra_cosine: float = 0.0
    violation_count: int = 0
    hard_count: int = 0
    per_class_margins: np.ndarray = field(default_factory=lambda: np.zeros(0))


@dataclass
class LossOutput:
    loss: float
    grad_features: np.ndarray
    grad_weights: np.ndarray
    grad_scale: float = 0.0
    diagnostics: Diagnostics = field(default_factory=Diagnostics)

    def __add__(self, other: "LossOutput") -> "LossOutput":
        return LossOutput(
            self.loss + other.loss,
            self.grad_features + other.grad_features,
            self.grad_weights + other.grad_weights,
            self.grad_scale + other.grad_scale,
            self.diagnostics,
        )

    def scaled(self, factor: float) -> "LossOutput":
        return replace(
            self,
            loss=factor * self.loss,
            grad_features=factor * self.grad_features,
            grad_weights=factor * self.grad_weights,
            grad_scale=factor * self.grad_scale,
        )


def _check(batch: FeatureBatch, head: ClassHead):
    if batch.features.shape[1] != head.dim:
        raise ShapeError(
            f"feature dim {batch.features.shape[1]} != head dim {head.dim}")
    lab = batch.labels
    if lab.size and (lab.min() < 0 or lab.max() >= head.num_classes):
        raise ValueError(f"labels must lie in [0, {head.num_classes})")


class CosineCache:
    """Row-normalized features, column-normalized weights and their cosines.

    ``backward`` maps a gradient on the cosine matrix back onto the raw
    features and weights.
    """

    def __init__(self, batch: FeatureBatch, head: ClassHead):
        self.x = batch.features
        self.w = head.weights
        self.x_norm = row_norms(self.x)
        self.w_norm = row_norms(self.w.T)
        self.x_unit = self.x / np.maximum(self.x_norm, EPS)[:, None]
        self.w_unit = self.w / np.maximum(self.w_norm, EPS)[None, :]
        self.cos = np.clip(self.x_unit @ self.w_unit, -1.0, 1.0)

    def intra(self, labels) -> np.ndarray:
        return self.cos[np.arange(len(labels)), labels]

    def backward(self, grad_cos: np.ndarray):
        gx_unit = grad_cos @ self.w_unit.T
        gw_unit = self.x_unit.T @ grad_cos
        gx = normalize_backward(self.x, self.x_norm, gx_unit)
        gw = normalize_backward(self.w.T, self.w_norm, gw_unit.T).T
        return gx, np.ascontiguousarray(gw)


def round_half_up(v: float) -> int:
    return int(math.floor(v + 0.5))


def selection_count(p: float, count: int) -> int:
    """``round_half_up(p * count)`` clamped to ``[1, count]``."""
    return min(max(round_half_up(p * count), 1), count)


def _zeros_like(batch, head):
    return np.zeros_like(batch.features), np.zeros_like(head.weights)


def softmax_ce(batch: FeatureBatch, head: ClassHead) -> LossOutput:
    """Cross entropy of the softmax over raw logits ``W^T x`` (no bias)."""
    _check(batch, head)
    m = len(batch.labels)
    logits = batch.features @ head.weights
    logp = log_softmax_rows(logits)
    rows = np.arange(m)
    loss = -logp[rows, batch.labels].sum() / m
    g = np.exp(logp)
    g[rows, batch.labels] -= 1.0
    g /= m
    return LossOutput(float(loss), g @ head.weights.T, batch.features.T @ g)


def hard_mask(batch: FeatureBatch, head: ClassHead, logits=None) -> np.ndarray:
    """1 where the softmax classifier's argmax (lowest index on ties) misses the label."""
    _check(batch, head)
    if logits is None:
        logits = batch.features @ head.weights
    return (np.argmax(logits, axis=1) != batch.labels).astype(np.int64)


def _hinge_output(cache, labels, margins, weights=None):
    """Mean of ``weights_i * {margins_i - cos(W_{y_i}, x_i)}_+``."""
    m = len(labels)
    rows = np.arange(m)
    slack = margins - cache.intra(labels)
    active = slack > 0
    if weights is not None:
        active &= weights > 0
    contrib = np.where(active, slack, 0.0)
    grad_cos = np.zeros_like(cache.cos)
    grad_cos[rows, labels] = np.where(active, -1.0 / m, 0.0)
    gx, gw = cache.backward(grad_cos)
    out = LossOutput(float(contrib.sum() / m), gx, gw)
    out.diagnostics.violation_count = int(active.sum())
    return out


def lmc_term(batch: FeatureBatch, head: ClassHead, alpha, weights=None,
             cache: CosineCache = None) -> LossOutput:
    """Mean hinge ``{alpha - cos(W_{y_i}, x_i)}_+``.

    ``alpha`` is a scalar or one margin per sample; ``weights`` optionally
    masks samples (the hard-sample indicator).
    """
    _check(batch, head)
    cache = cache or CosineCache(batch, head)
    margins = np.broadcast_to(np.asarray(alpha, dtype=np.float64), batch.labels.shape)
    w = None if weights is None else np.asarray(weights)
    return _hinge_output(cache, batch.labels, margins, w)


def adaptive_margins(batch: FeatureBatch, head: ClassHead, alpha0: float, p: float,
                     cache: CosineCache = None) -> np.ndarray:
    """Recompute per-class margins from the batch and store them on ``head``.

    For every class present, its intra-class cosines are sorted descending,
    the top ``k = selection_count(p, n)`` are summed and divided by ``1 + k``,
    and the result is floored at ``alpha0``. Absent classes keep their margin.
    """
    _check(batch, head)
    if not 0 < p <= 1:
        raise ValueError(f"p must be in (0, 1], got {p}")
    cache = cache or CosineCache(batch, head)
    intra = cache.intra(batch.labels)
    margins = head.margins.copy()
    for j in np.unique(batch.labels):
        vals = np.sort(intra[batch.labels == j])[::-1]
        k = selection_count(p, len(vals))
        margins[j] = min(max(alpha0, math.fsum(vals[:k]) / (1 + k)), 1.0)
    head.margins = margins
    return margins.copy()


def normalized_softmax(batch: FeatureBatch, head: ClassHead,
                       cache: CosineCache = None) -> LossOutput:
    """Softmax cross entropy on ``s^2 * cos(W_j, x_i)``; also returns dL/ds."""
    _check(batch, head)
    cache = cache or CosineCache(batch, head)
    m = len(batch.labels)
    rows = np.arange(m)
    s = head.scale
    logp = log_softmax_rows(s * s * cache.cos)
    loss = -logp[rows, batch.labels].sum() / m
    g = np.exp(logp)
    g[rows, batch.labels] -= 1.0
    g /= m
    grad_scale = 2.0 * s * float(np.sum(g * cache.cos))
    gx, gw = cache.backward(s * s * g)
    return LossOutput(float(loss), gx, gw, grad_scale)


def _neighbour_order(cache: CosineCache, labels) -> np.ndarray:
    """Per-row class indices sorted by descending cosine, own class last."""
    masked = cache.cos.copy()
    masked[np.arange(len(labels)), labels] = -np.inf
    return np.argsort(-masked, axis=1, kind="stable")


def dlmc_term(batch: FeatureBatch, head: ClassHead, alpha: float, p: float,
              cache: CosineCache = None) -> LossOutput:
    """Mean of ``{log sum_{top K} exp(c_j / K) - c_{y_i} + alpha}_+``.

    The top ``K = selection_count(p, N - 1)`` inter-class cosines are picked
    per sample; the selection carries no gradient.
    """
    _check(batch, head)
    n = head.num_classes
    if n < 2:
        raise ValueError("dlmc_term needs at least two classes")
    cache = cache or CosineCache(batch, head)
    m = len(batch.labels)
    rows = np.arange(m)
    k = selection_count(p, n - 1)
    sel = _neighbour_order(cache, batch.labels)[:, :k]
    vals = np.take_along_axis(cache.cos, sel, axis=1) / k
    top = vals.max(axis=1, keepdims=True)
    e = np.exp(vals - top)
    total = e.sum(axis=1, keepdims=True)
    lse = top[:, 0] + np.log(total[:, 0])
    slack = lse - cache.intra(batch.labels) + alpha
    active = slack > 0
    coef = np.where(active, 1.0 / m, 0.0)
    grad_cos = np.zeros_like(cache.cos)
    np.put_along_axis(grad_cos, sel, (e / total / k) * coef[:, None], axis=1)
    grad_cos[rows, batch.labels] -= coef
    gx, gw = cache.backward(grad_cos)
    out = LossOutput(float(np.where(active, slack, 0.0).sum() / m), gx, gw)
    out.diagnostics.violation_count = int(active.sum())
    return out


def triplet_variant(batch: FeatureBatch, head: ClassHead, alpha: float,
                    cache: CosineCache = None) -> LossOutput:
    """Mean of ``{c_nearest - c_{y_i} + alpha}_+`` with the nearest other class."""
    _check(batch, head)
    if head.num_classes < 2:
        raise ValueError("triplet_variant needs at least two classes")
    cache = cache or CosineCache(batch, head)
    m = len(batch.labels)
    rows = np.arange(m)
    nearest = _neighbour_order(cache, batch.labels)[:, 0]
    slack = cache.cos[rows, nearest] - cache.intra(batch.labels) + alpha
    active = slack > 0
    coef = np.where(active, 1.0 / m, 0.0)
    grad_cos = np.zeros_like(cache.cos)
    grad_cos[rows, nearest] = coef
    grad_cos[rows, batch.labels] -= coef
    gx, gw = cache.backward(grad_cos)
    out = LossOutput(float(np.where(active, slack, 0.0).sum() / m), gx, gw)
    out.diagnostics.violation_count = int(active.sum())
    return out


def joint_loss(batch: FeatureBatch, head: ClassHead, cfg: LossConfig,
               update_margins: bool = True) -> LossOutput:
    """Total training loss for ``cfg.variant``.

    For the adaptive variants the per-class margins on ``head`` are refreshed
    from this batch first, unless ``update_margins`` is False (gradient checks
    freeze them).
    """
    _check(batch, head)
    v = cfg.variant
    labels = batch.labels
    cache = CosineCache(batch, head)
    if v.adaptive and update_margins:
        adaptive_margins(batch, head, cfg.alpha0, cfg.p, cache=cache)

    if v.normalized:
        out = normalized_softmax(batch, head, cache=cache)
        logits = cache.cos
        if not cfg.scale_learnable:
            out.grad_scale = 0.0
    else:
        out = softmax_ce(batch, head)
        logits = batch.features @ head.weights
    gamma = hard_mask(batch, head, logits=logits)

    metric = None
    if v in (LossVariant.LMC, LossVariant.NLMC):
        metric = lmc_term(batch, head, cfg.alpha, cache=cache)
    elif v is LossVariant.HLMC:
        metric = lmc_term(batch, head, cfg.alpha, weights=gamma, cache=cache)
    elif v.adaptive:
        metric = lmc_term(batch, head, head.margins[labels], cache=cache)
    elif v is LossVariant.DLMC:
        metric = dlmc_term(batch, head, cfg.alpha, cfg.p, cache=cache)

    diag = Diagnostics(
        mean_intra_cosine=float(cache.intra(labels).mean()) if len(labels) else 0.0,
        hard_count=int(gamma.sum()),
        per_class_margins=head.margins.copy(),
    )
    if metric is not None:
        diag.violation_count = metric.diagnostics.violation_count
        out = out + metric.scaled(cfg.lam)
    out.diagnostics = diag
    return out
