"""
Evaluation protocols
====================

The four evaluation protocols on features from a quickly trained LMC model:
pair verification (10-fold accuracy, TAR at fixed FAR), identification
(CMC), video-style set scoring (mean over cyclic frame pairs) and template
scoring (softmax-weighted pooling).
"""

import numpy as np

from admlkit import LossConfig, dataio, evalkit, netopt

full = dataio.synth_blobs(10, 16, 400, spread=0.45, seed=1)
train, test = dataio.split_per_class(full, 200)
net, _, _ = netopt.train(train, netopt.NetworkSpec(16, (64,), 16), LossConfig("LMC"),
                         netopt.scratch_schedule(600), seed=0)
feats = evalkit.extract_features(net, test)

# %% Pair verification
pairs = dataio.balanced_pairs(test.labels, 2000, seed=0)
rep = evalkit.verification_report(evalkit.pair_scores(feats, pairs), pairs.same)
print(f"verification: mean 10-fold accuracy {rep.mean_accuracy:.4f}")
for far, tar in rep.tar_at_far.items():
    print(f"  TAR @ FAR {far}: {tar:.4f}")

# %% Identification: the first 5 samples of each class form its gallery entry
gallery = {c: np.flatnonzero(test.labels == c)[:5] for c in range(10)}
probe_idx = np.setdiff1d(np.arange(len(test)), np.concatenate(list(gallery.values())))
g_feats = np.vstack([feats[idx].mean(axis=0) for idx in gallery.values()])
rates = evalkit.cmc(g_feats, list(gallery), feats[probe_idx], test.labels[probe_idx], 5)
print("identification CMC rank 1..5:", np.round(rates, 4))

# %% Set-to-set scores: the same template pairs scored two ways
sets = dataio.chunk_templates(test.labels, 10)
subjects = [s for s, _ in sets.templates.values()]
set_pairs = dataio.balanced_pairs(subjects, 400, seed=1)
for name, scores in [("video (frame-pair mean)", evalkit.video_scores(feats, sets, set_pairs)),
                     ("template (softmax pool, beta=10)", evalkit.template_scores(feats, sets, set_pairs))]:
    acc = evalkit.kfold_accuracy(scores, set_pairs.same).mean_accuracy
    print(f"{name}: mean 10-fold accuracy {acc:.4f}")
