"""Verification and identification evaluation.

Scores are cosine similarities. Verification uses k-fold threshold selection
and ROC / TAR@FAR; identification uses CMC ranks with pessimistic tie
handling. Set-to-set scores come from frame averaging (videos) or
softmax-weighted pooling (templates).
"""

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dataio
from .netopt import NetworkState, features_of
from .numcore import as_matrix, cosine_matrix, l2_normalize_rows


@dataclass
class EvalReport:
    fold_accuracies: list = field(default_factory=list)
    mean_accuracy: float = float("nan")
    thresholds: list = field(default_factory=list)
    roc: "RocCurve" = None
    tar_at_far: dict = field(default_factory=dict)
    cmc: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def lines(self):
        out = [f"{k}: {v}" for k, v in self.extra.items()]
        if self.fold_accuracies:
            out.append("fold_accuracies: " + ",".join(repr(float(a)) for a in self.fold_accuracies))
            out.append(f"mean_accuracy: {float(self.mean_accuracy)!r}")
            out.append("thresholds: " + ",".join(repr(float(t)) for t in self.thresholds))
        for far, tar in self.tar_at_far.items():
            out.append(f"tar_at_far[{float(far)!r}]: {float(tar)!r}")
        for r, rate in enumerate(self.cmc, start=1):
            out.append(f"rank_{r}: {float(rate)!r}")
        return out

    def write(self, out_dir, prefix="report"):
        """Write ``<prefix>.txt`` and, when present, ``<prefix>_roc.csv`` / ``<prefix>_cmc.csv``."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / f"{prefix}.txt").write_text("\n".join(self.lines()) + "\n", encoding="utf-8")
        if self.roc is not None:
            with open(out_dir / f"{prefix}_roc.csv", "w", encoding="utf-8") as fh:
                fh.write("far,tar,threshold\n")
                for f, t, th in zip(self.roc.far.tolist(), self.roc.tar.tolist(),
                                    self.roc.thresholds.tolist()):
                    fh.write(f"{f!r},{t!r},{th!r}\n")
        if self.cmc:
            with open(out_dir / f"{prefix}_cmc.csv", "w", encoding="utf-8") as fh:
                fh.write("rank,rate\n")
                for r, rate in enumerate(self.cmc, start=1):
                    fh.write(f"{r},{rate!r}\n")


def extract_features(net: NetworkState, ds: dataio.Dataset, flip_merge=True) -> np.ndarray:
    """Embed every sample; with ``flip_merge`` on images, add the mirrored image's embedding."""
    f = features_of(net, ds.samples)
    if flip_merge and ds.image_shape is not None and len(ds):
        f = f + features_of(net, dataio.hflip(ds.samples, ds.image_shape))
    return f


@dataclass
class PCAModel:
    mean: np.ndarray
    basis: np.ndarray
    eigenvalues: np.ndarray

    def transform(self, features) -> np.ndarray:
        return (as_matrix(features) - self.mean) @ self.basis


def pca(features, out_dim=None):
    """Project centered features on the top ``out_dim`` principal directions.

    Directions come in descending variance order, each signed so its
    largest-magnitude component is positive. Returns ``(projected, model)``.
    """
    x = as_matrix(features)
    n, d = x.shape
    out_dim = d if out_dim is None else int(out_dim)
    if not 1 <= out_dim <= d:
        raise ValueError(f"out_dim must be in [1, {d}], got {out_dim}")
    if n < 2:
        raise ValueError("pca needs at least two samples")
    mean = x.mean(axis=0)
    _, sing, vt = np.linalg.svd(x - mean, full_matrices=True)
    basis = vt[:out_dim].T.copy()
    pivot = np.argmax(np.abs(basis), axis=0)
    basis *= np.where(basis[pivot, np.arange(out_dim)] < 0, -1.0, 1.0)
    ev = np.zeros(d)
    ev[:len(sing)] = sing ** 2 / (n - 1)
    model = PCAModel(mean, basis, ev[:out_dim])
    return model.transform(x), model


def pair_scores(features, pairs: dataio.PairList) -> np.ndarray:
    f = l2_normalize_rows(features)
    a, b = pairs.index_arrays()
    if len(pairs) and (min(a.min(), b.min()) < 0 or max(a.max(), b.max()) >= f.shape[0]):
        raise IndexError("pair index out of range")
    return np.clip(np.einsum("ij,ij->i", f[a], f[b]), -1.0, 1.0)


def _accuracy_at(scores, labels, t):
    return float(np.mean((scores >= t) == labels))


def candidate_thresholds(scores) -> np.ndarray:
    """Midpoints of consecutive distinct sorted scores plus one below and one above."""
    u = np.unique(scores)
    return np.concatenate([[u[0] - 1.0], (u[:-1] + u[1:]) / 2.0, [u[-1] + 1.0]])


def best_threshold(scores, labels) -> float:
    """Threshold maximising ``mean((score >= t) == label)``; lowest wins ties."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    cands = candidate_thresholds(scores)
    pos = np.sort(scores[labels])
    neg = np.sort(scores[~labels])
    tp = len(pos) - np.searchsorted(pos, cands, side="left")
    tn = np.searchsorted(neg, cands, side="left")
    return float(cands[np.argmax(tp + tn)])


def kfold_accuracy(scores, labels, k=10) -> EvalReport:
    """k contiguous folds; each fold's threshold is fit on the other k - 1."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    n = len(scores)
    if len(labels) != n:
        raise ValueError("scores and labels differ in length")
    if k < 2 or n < k or n % k:
        raise ValueError(f"{n} scores cannot be split into {k} equal folds")
    size = n // k
    accs, ths = [], []
    for f in range(k):
        test = np.zeros(n, dtype=bool)
        test[f * size:(f + 1) * size] = True
        t = best_threshold(scores[~test], labels[~test])
        ths.append(t)
        accs.append(_accuracy_at(scores[test], labels[test], t))
    return EvalReport(fold_accuracies=accs, mean_accuracy=float(np.mean(accs)), thresholds=ths)


@dataclass
class RocCurve:
    """Operating points for ``accept iff score >= threshold``, thresholds descending.

    The first point is ``(0, 0)`` at ``threshold = +inf``.
    """

    far: np.ndarray
    tar: np.ndarray
    thresholds: np.ndarray

    def points(self):
        return list(zip(self.far.tolist(), self.tar.tolist()))


def roc(scores, labels) -> RocCurve:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("roc needs both positive and negative pairs")
    ths = np.unique(scores)[::-1]
    pos = np.sort(scores[labels])
    neg = np.sort(scores[~labels])
    tar = (n_pos - np.searchsorted(pos, ths, side="left")) / n_pos
    far = (n_neg - np.searchsorted(neg, ths, side="left")) / n_neg
    return RocCurve(np.concatenate([[0.0], far]), np.concatenate([[0.0], tar]),
                    np.concatenate([[np.inf], ths]))


def tar_at_far(curve: RocCurve, far_level: float) -> float:
    """TAR at the lowest threshold whose FAR does not exceed ``far_level``."""
    ok = np.flatnonzero(curve.far <= far_level)
    return float(curve.tar[ok[-1]])


def cmc_from_scores(scores, gallery_ids, probe_ids, max_rank=None) -> list:
    """CMC rates from a probe x gallery score matrix.

    A probe's rank is one plus the number of other-subject gallery entries
    scoring at least as high as its best true-subject entry.
    """
    s = as_matrix(scores)
    g = np.asarray(gallery_ids)
    p = np.asarray(probe_ids)
    missing = set(p.tolist()) - set(g.tolist())
    if missing:
        raise ValueError(f"probe subjects missing from gallery: {sorted(missing)[:5]}")
    n_subjects = len(np.unique(g))
    max_rank = n_subjects if max_rank is None else int(max_rank)
    ranks = np.empty(len(p), dtype=np.int64)
    for i in range(len(p)):
        true = g == p[i]
        best = s[i, true].max()
        ranks[i] = 1 + np.count_nonzero(s[i, ~true] >= best)
    return [float(np.mean(ranks <= r)) for r in range(1, max_rank + 1)]


def cmc(gallery, gallery_ids, probes, probe_ids, max_rank=None) -> list:
    return cmc_from_scores(cosine_matrix(probes, as_matrix(gallery).T), gallery_ids, probe_ids,
                           max_rank)


def video_pair_score(frames_a, frames_b, n=100) -> float:
    """Mean cosine over frame pairs ``(i mod |A|, i mod |B|)``, ``i < min(n, |A||B|)``."""
    a = as_matrix(frames_a)
    b = as_matrix(frames_b)
    if not len(a) or not len(b):
        raise ValueError("video with no frames")
    count = min(n, len(a) * len(b))
    i = np.arange(count)
    fa = l2_normalize_rows(a)[i % len(a)]
    fb = l2_normalize_rows(b)[i % len(b)]
    return float(np.mean(np.clip(np.einsum("ij,ij->i", fa, fb), -1.0, 1.0)))


def template_pool_softmax(scores, beta=10.0) -> float:
    """Softmax-weighted mean ``sum(s * e^{beta s}) / sum(e^{beta s})`` of pairwise scores."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    if not s.size:
        raise ValueError("empty score matrix")
    if beta < 0:
        raise ValueError("beta must be >= 0")
    w = np.exp(beta * (s - s.max()))
    return float(np.sum(s * w) / np.sum(w))


def template_scores(features, templates: dataio.TemplateSet, pairs, beta=10.0) -> np.ndarray:
    """Softmax-pooled score per template pair; ``pairs`` index ``templates.ids()``."""
    ids = templates.ids()
    f = l2_normalize_rows(features)
    out = []
    for a, b, _ in pairs.entries:
        ia = templates.templates[ids[a]][1]
        ib = templates.templates[ids[b]][1]
        out.append(template_pool_softmax(np.clip(f[ia] @ f[ib].T, -1.0, 1.0), beta))
    return np.array(out)


def video_scores(features, videos: dataio.TemplateSet, pairs, n=100) -> np.ndarray:
    ids = videos.ids()
    return np.array([video_pair_score(features[videos.templates[ids[a]][1]],
                                      features[videos.templates[ids[b]][1]], n)
                     for a, b, _ in pairs.entries])


def template_score_matrix(features, probes: dataio.TemplateSet, gallery: dataio.TemplateSet,
                          beta=10.0) -> np.ndarray:
    f = l2_normalize_rows(features)
    out = np.empty((len(probes), len(gallery)))
    for i, (_, pi) in enumerate(probes.templates.values()):
        for j, (_, gi) in enumerate(gallery.templates.values()):
            out[i, j] = template_pool_softmax(np.clip(f[pi] @ f[gi].T, -1.0, 1.0), beta)
    return out


def verification_report(scores, same, folds=10, far_levels=(0.01, 0.001)) -> EvalReport:
    rep = kfold_accuracy(scores, same, folds)
    rep.roc = roc(scores, same)
    rep.tar_at_far = {lvl: tar_at_far(rep.roc, lvl) for lvl in far_levels}
    return rep


# Binary feature file: b"ADMLFEAT", u32 rows, u32 dim, rows x u32 labels,
# then rows x dim f64 values (row-major), all little-endian.
FEAT_MAGIC = b"ADMLFEAT"


def write_feature_csv(path, features, labels, dim=None):
    f = np.asarray(features, dtype=np.float64)
    d = f.shape[1] if f.ndim == 2 and f.size else int(dim or 0)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(["id", "label"] + [f"f{j}" for j in range(d)]) + "\n")
        for i, (row, lab) in enumerate(zip(f, labels)):
            fh.write(",".join([str(i), str(int(lab))] + [repr(float(v)) for v in row]) + "\n")


def read_feature_csv(path):
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        if header[:2] != ["id", "label"]:
            raise ValueError(f"{path}: bad feature header")
        rows = [line.strip().split(",") for line in fh if line.strip()]
    d = len(header) - 2
    labels = np.array([int(r[1]) for r in rows], dtype=np.int64)
    feats = np.array([[float(v) for v in r[2:]] for r in rows], dtype=np.float64).reshape(len(rows), d)
    return feats, labels


def write_feature_bin(path, features, labels):
    f = as_matrix(features)
    lab = np.asarray(labels, dtype="<u4")
    Path(path).write_bytes(struct.pack("<8sII", FEAT_MAGIC, f.shape[0], f.shape[1])
                           + lab.tobytes() + f.astype("<f8").tobytes())


def read_feature_bin(path):
    data = Path(path).read_bytes()
    magic, n, d = struct.unpack_from("<8sII", data)
    if magic != FEAT_MAGIC:
        raise ValueError(f"{path}: bad magic")
    off = 16
    labels = np.frombuffer(data, dtype="<u4", count=n, offset=off).astype(np.int64)
    off += 4 * n
    feats = np.frombuffer(data, dtype="<f8", count=n * d, offset=off).reshape(n, d).astype(np.float64)
    return feats, labels
