"""Command-line front end.

Exit codes: 0 success, 1 configuration / input error, 2 numerical check failure.
"""

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from . import dataio, evalkit, gradcheck, netopt
from .config import ConfigError, RunConfig
from .losses import LossVariant

EXIT_OK, EXIT_CONFIG, EXIT_CHECK = 0, 1, 2


def load_datasets(cfg: RunConfig):
    """Return ``(train, test)``; ``test`` may be None for IDX data without test files."""
    if cfg["data.kind"] == "blobs":
        full = dataio.synth_blobs(cfg["data.classes"], cfg["data.dim"],
                                  cfg["data.per_class"] + cfg["data.heldout_per_class"],
                                  cfg["data.spread"], cfg["data.seed"])
        return dataio.split_per_class(full, cfg["data.per_class"])
    for key in ("data.images", "data.labels"):
        if not cfg[key]:
            raise ConfigError(f"{key}: required when data.kind = idx")
    train = dataio.load_idx(cfg["data.images"], cfg["data.labels"])
    test = None
    if cfg["data.test_images"] or cfg["data.test_labels"]:
        for key in ("data.test_images", "data.test_labels"):
            if not cfg[key]:
                raise ConfigError(f"{key}: required when the other test file is given")
        test = dataio.load_idx(cfg["data.test_images"], cfg["data.test_labels"],
                               class_count=train.class_count)
    return train, test


def _split(cfg, train, test):
    if cfg["eval.split"] == "train":
        return train
    if test is None:
        raise ConfigError("eval.split: 'test' requested but the dataset has no test split")
    return test


def _load_config(args):
    overrides = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"seed={args.seed}")
    return RunConfig.load(args.config, overrides)


def cmd_train(args):
    cfg = _load_config(args)
    train, _ = load_datasets(cfg)
    spec = cfg.network_spec(train.samples.shape[1])
    warm = None
    if cfg["train.warm_start"]:
        warm = netopt.load_checkpoint(cfg["train.warm_start"])
    elif LossVariant.parse(cfg["loss.variant"]).normalized:
        print("note: normalized variant trained from scratch (train.warm_start not set)",
              file=sys.stderr)
    net, head, log = netopt.train(train, spec, cfg.loss_config(), cfg.sgd_config(),
                                  seed=cfg["seed"], warm_start=warm, augment=cfg["data.augment"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    netopt.save_checkpoint(out / "checkpoint.ckpt", net, head)
    log.to_csv(out / "train_log.csv")
    (out / "effective.cfg").write_text(cfg.dump(), encoding="utf-8")
    acc = netopt.accuracy(net, head, train, normalized=cfg.loss_config().variant.normalized)
    print(f"trained {cfg['loss.variant']} for {len(log.iterations)} iterations; "
          f"final loss {log.loss[-1] if log.loss else float('nan'):.6f}; train accuracy {acc:.4f}")
    return EXIT_OK


def _features(cfg, args, ds):
    net, _ = netopt.load_checkpoint(args.checkpoint)
    if ds.samples.shape[1] != net.spec.input_dim:
        raise ConfigError(f"dataset rows have {ds.samples.shape[1]} values, "
                          f"checkpoint expects {net.spec.input_dim}")
    return net, evalkit.extract_features(net, ds, flip_merge=cfg["eval.flip_merge"])


def _pairs(cfg, n_items, labels, seed):
    if cfg["eval.pairs"]:
        return dataio.load_pairs(cfg["eval.pairs"], n_items)
    return dataio.balanced_pairs(labels, cfg["eval.num_pairs"], seed)


def _templates(cfg, key, labels, n_items):
    if cfg[key]:
        return dataio.load_templates(cfg[key], n_items)
    return dataio.chunk_templates(labels, cfg["eval.template_size"])


def run_eval(cfg: RunConfig, args) -> evalkit.EvalReport:
    train, test = load_datasets(cfg)
    ds = _split(cfg, train, test)
    _, feats = _features(cfg, args, ds)
    if cfg["eval.pca_dim"]:
        # Centering changes cosines, so PCA only runs when a reduction is asked for.
        feats, _ = evalkit.pca(feats, cfg["eval.pca_dim"])
    protocol = cfg["eval.protocol"]
    n = len(ds)
    seed = cfg["seed"]
    if protocol == "verify":
        pairs = _pairs(cfg, n, ds.labels, seed)
        rep = evalkit.verification_report(evalkit.pair_scores(feats, pairs), pairs.same,
                                          cfg["eval.folds"], cfg["eval.far_levels"])
    elif protocol in ("video", "template"):
        sets = _templates(cfg, "eval.templates", ds.labels, n)
        subjects = [s for s, _ in sets.templates.values()]
        pairs = _pairs(cfg, len(sets), subjects, seed)
        if protocol == "video":
            scores = evalkit.video_scores(feats, sets, pairs, cfg["eval.frames"])
        else:
            scores = evalkit.template_scores(feats, sets, pairs, cfg["eval.beta"])
        rep = evalkit.verification_report(scores, pairs.same, cfg["eval.folds"],
                                          cfg["eval.far_levels"])
    else:
        if cfg["eval.gallery"] or cfg["eval.probes"]:
            gallery = _templates(cfg, "eval.gallery", ds.labels, n)
            probes = _templates(cfg, "eval.probes", ds.labels, n)
        else:
            gallery, probes = _auto_gallery(ds.labels, cfg["eval.template_size"])
        scores = evalkit.template_score_matrix(feats, probes, gallery, cfg["eval.beta"])
        rep = evalkit.EvalReport(cmc=evalkit.cmc_from_scores(
            scores, [s for s, _ in gallery.templates.values()],
            [s for s, _ in probes.templates.values()],
            min(cfg["eval.max_rank"], len(gallery))))
    rep.extra = {"protocol": protocol, "split": cfg["eval.split"], "items": n,
                 "feature_dim": feats.shape[1]}
    return rep


def _auto_gallery(labels, size):
    """First ``size`` samples of each class form its gallery template; the rest are probes."""
    gallery, probes = {}, {}
    for c in np.unique(labels):
        idx = [int(v) for v in np.flatnonzero(labels == c)]
        gallery[f"g{c}"] = (str(c), idx[:size])
        rest = idx[size:]
        for t, start in enumerate(range(0, len(rest), size)):
            probes[f"p{c}t{t}"] = (str(c), rest[start:start + size])
    return dataio.TemplateSet(gallery), dataio.TemplateSet(probes)


def cmd_eval(args):
    overrides = list(args.set or [])
    if args.protocol:
        overrides.append(f"eval.protocol={args.protocol}")
    args.set = overrides
    cfg = _load_config(args)
    rep = run_eval(cfg, args)
    rep.write(args.out)
    for line in rep.lines():
        print(line)
    return EXIT_OK


def cmd_export_features(args):
    cfg = _load_config(args)
    train, test = load_datasets(cfg)
    ds = _split(cfg, train, test)
    net, feats = _features(cfg, args, ds)
    dim = net.spec.feature_dim
    if args.dim and len(ds):
        feats, _ = evalkit.pca(feats, args.dim)
        dim = args.dim
    export_features(args.out, feats, ds.labels, dim, args.format)
    print(f"wrote {len(ds)} x {dim} features to {args.out}")
    return EXIT_OK


def export_features(path, feats, labels, dim, fmt="csv"):
    if fmt == "bin":
        evalkit.write_feature_bin(path, np.asarray(feats).reshape(len(labels), dim), labels)
    else:
        evalkit.write_feature_csv(path, feats, labels, dim)


def margins_trace(log_path, out_path):
    """Rewrite the ``margin_j`` columns of a training log as (iteration, class, margin) rows."""
    with open(log_path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        cols = [c for c in (reader.fieldnames or []) if c.startswith("margin_")]
        if not cols:
            raise ConfigError(f"{log_path}: no margin columns (not an adaptive-margin run)")
        with open(out_path, "w", encoding="utf-8", newline="") as out:
            out.write("iteration,class,margin\n")
            for row in reader:
                for c in cols:
                    out.write(f"{row['iteration']},{c[len('margin_'):]},{row[c]}\n")


def cmd_margins_trace(args):
    margins_trace(args.log, args.out)
    print(f"wrote margin trace to {args.out}")
    return EXIT_OK


def cmd_gradcheck(args):
    cfg = _load_config(args)
    names = [v.value for v in LossVariant] if args.variant == "all" else [args.variant]
    failed = False
    for name in names:
        base = RunConfig.load(args.config, list(args.set or []) + [f"loss.variant={name}"])
        res = gradcheck.check_variant(base.loss_config(), trials=args.trials, seed=cfg["seed"],
                                      corrupt=args.corrupt_gradient)
        status = "PASS" if res.passed else "FAIL"
        extra = "" if res.reduction_ok else " (triplet reduction mismatch)"
        print(f"{res.variant.value:<11} trials={res.trials} rejected={res.rejected} "
              f"max_rel_err={res.max_rel_error:.3e} {status}{extra}")
        failed |= not res.passed
    return EXIT_CHECK if failed else EXIT_OK


def build_parser():
    ap = argparse.ArgumentParser(prog="admlkit", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="flat 'section.key = value' config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        p.add_argument("--seed", type=int)
        if out_required is not None:
            p.add_argument("--out", required=out_required)

    p = sub.add_parser("train", help="train a network and class head")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("gradcheck", help="finite-difference check of loss gradients")
    common(p, out_required=None)
    p.add_argument("--variant", default="all",
                   choices=["all"] + [v.value for v in LossVariant])
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--corrupt-gradient", type=float, default=0.0, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--protocol", choices=["verify", "identify", "video", "template"])
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-features", help="write embeddings as CSV or binary")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dim", type=int, default=0, help="PCA output dimension (0 keeps all)")
    p.add_argument("--format", choices=["csv", "bin"], default="csv")
    p.set_defaults(func=cmd_export_features)

    p = sub.add_parser("margins-trace", help="per-class margin CSV from an adaptive-margin log")
    p.add_argument("--log", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_margins_trace)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, dataio.ParseError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
