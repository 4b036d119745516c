"""Flat ``section.key = value`` run configuration.

A config file holds one ``key = value`` per line (``#`` comments). Keys not
set explicitly fall back to the preset of the chosen ``loss.variant`` and
then to the generic defaults below. ``RunConfig.dump`` writes every key, so
a dumped config reproduces a run exactly.
"""

from dataclasses import dataclass

from .losses import LossConfig, LossVariant
from .netopt import NetworkSpec, SGDConfig


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key."""


def _bool(v):
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _ints(v):
    s = str(v).strip()
    return tuple(int(p) for p in s.split(",") if p.strip()) if s else ()


def _floats(v):
    s = str(v).strip()
    return tuple(float(p) for p in s.split(",") if p.strip()) if s else ()


def _drops(v):
    out = []
    for part in str(v).split(","):
        if part.strip():
            it, div = part.split(":")
            out.append((int(it), float(div)))
    return tuple(out)


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        if v and isinstance(v[0], tuple):
            return ",".join(f"{i}:{d!r}" for i, d in v)
        return ",".join(_fmt(x) for x in v)
    return str(v)


# key -> (parser, default)
SCHEMA = {
    "seed": (int, 0),
    "loss.variant": (lambda v: LossVariant.parse(v).value, "Softmax"),
    "loss.lambda": (float, 0.1),
    "loss.alpha": (float, 0.5),
    "loss.alpha0": (float, 0.2),
    "loss.p": (float, 0.6),
    "loss.scale_init": (float, 4.0),
    "loss.scale_learnable": (_bool, True),
    "net.hidden_dims": (_ints, (64, 64)),
    "net.feature_dim": (int, 16),
    "net.activation": (str, "relu"),
    "net.init_seed": (int, 0),
    "sgd.base_lr": (float, 0.1),
    "sgd.lr_drops": (_drops, ((16000, 10.0), (24000, 10.0))),
    "sgd.momentum": (float, 0.9),
    "sgd.weight_decay": (float, 0.0005),
    "sgd.max_iter": (int, 28000),
    "sgd.batch_size": (int, 256),
    "data.kind": (str, "blobs"),
    "data.images": (str, ""),
    "data.labels": (str, ""),
    "data.test_images": (str, ""),
    "data.test_labels": (str, ""),
    "data.classes": (int, 10),
    "data.dim": (int, 16),
    "data.per_class": (int, 200),
    "data.heldout_per_class": (int, 300),
    "data.spread": (float, 0.3),
    "data.seed": (int, 0),
    "data.augment": (_bool, False),
    "train.warm_start": (str, ""),
    "eval.protocol": (str, "verify"),
    "eval.split": (str, "test"),
    "eval.pairs": (str, ""),
    "eval.num_pairs": (int, 6000),
    "eval.folds": (int, 10),
    "eval.pca_dim": (int, 0),
    "eval.flip_merge": (_bool, True),
    "eval.far_levels": (_floats, (0.01, 0.001)),
    "eval.beta": (float, 10.0),
    "eval.frames": (int, 100),
    "eval.templates": (str, ""),
    "eval.template_size": (int, 5),
    "eval.gallery": (str, ""),
    "eval.probes": (str, ""),
    "eval.max_rank": (int, 10),
}

_SCRATCH = {"sgd.base_lr": 0.1, "sgd.lr_drops": ((16000, 10.0), (24000, 10.0)),
            "sgd.max_iter": 28000}
_FINETUNE = {"sgd.base_lr": 0.001, "sgd.lr_drops": (), "sgd.max_iter": 4000}

# Per-variant hyper-parameter defaults (explicit config values take precedence).
VARIANT_PRESETS = {
    "Softmax": {**_SCRATCH},
    "LMC": {"loss.lambda": 0.1, "loss.alpha": 0.5, **_SCRATCH},
    "HLMC": {"loss.lambda": 0.005, "loss.alpha": 0.5, **_SCRATCH},
    "MALMC": {"loss.lambda": 0.1, "loss.alpha0": 0.2, "loss.p": 0.6, **_SCRATCH},
    "NLMC": {"loss.lambda": 0.001, "loss.alpha": 0.5, **_FINETUNE},
    "NLMC_MALMC": {"loss.lambda": 0.001, "loss.alpha0": 0.2, "loss.p": 0.6, **_FINETUNE},
    "DLMC": {"loss.lambda": 0.03, "loss.alpha": 0.01, "loss.p": 0.6, **_FINETUNE},
}

PROTOCOLS = ("verify", "identify", "video", "template")


def parse_lines(text, origin="<config>"):
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


@dataclass
class RunConfig:
    values: dict

    @classmethod
    def build(cls, raw: dict) -> "RunConfig":
        """Validate ``raw`` (key -> string or value) and fill in defaults."""
        unknown = sorted(set(raw) - set(SCHEMA))
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        values = {}
        for key, value in raw.items():
            parser = SCHEMA[key][0]
            try:
                values[key] = parser(value) if isinstance(value, str) else value
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"{key}: invalid value {value!r} ({exc})") from None
        variant = values.get("loss.variant", SCHEMA["loss.variant"][1])
        for key, value in VARIANT_PRESETS[variant].items():
            values.setdefault(key, value)
        for key, (_, default) in SCHEMA.items():
            values.setdefault(key, default)
        cfg = cls({k: values[k] for k in SCHEMA})
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path=None, overrides=()) -> "RunConfig":
        raw = {}
        if path:
            try:
                with open(path, encoding="utf-8") as fh:
                    raw = parse_lines(fh.read(), str(path))
            except OSError as exc:
                raise ConfigError(f"cannot read config {path}: {exc}") from None
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"--set expects key=value, got {item!r}")
            key, value = (s.strip() for s in item.split("=", 1))
            raw[key] = value
        return cls.build(raw)

    def __getitem__(self, key):
        return self.values[key]

    def dump(self) -> str:
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in self.values.items())

    def _wrap(self, key, fn):
        try:
            return fn()
        except ValueError as exc:
            raise ConfigError(f"{key}: {exc}") from None

    def loss_config(self) -> LossConfig:
        v = self.values
        return self._wrap("loss.*", lambda: LossConfig(
            variant=v["loss.variant"], lam=v["loss.lambda"], alpha=v["loss.alpha"],
            alpha0=v["loss.alpha0"], p=v["loss.p"], scale_init=v["loss.scale_init"],
            scale_learnable=v["loss.scale_learnable"]))

    def sgd_config(self) -> SGDConfig:
        v = self.values
        return self._wrap("sgd.*", lambda: SGDConfig(
            base_lr=v["sgd.base_lr"], lr_drops=v["sgd.lr_drops"], momentum=v["sgd.momentum"],
            weight_decay=v["sgd.weight_decay"], max_iter=v["sgd.max_iter"],
            batch_size=v["sgd.batch_size"]))

    def network_spec(self, input_dim) -> NetworkSpec:
        v = self.values
        return self._wrap("net.*", lambda: NetworkSpec(
            input_dim, v["net.hidden_dims"], v["net.feature_dim"], v["net.activation"],
            v["net.init_seed"]))

    def validate(self):
        self.loss_config()
        self.sgd_config()
        self.network_spec(1)
        v = self.values
        if v["data.kind"] not in ("blobs", "idx"):
            raise ConfigError("data.kind: must be 'blobs' or 'idx'")
        if v["eval.protocol"] not in PROTOCOLS:
            raise ConfigError(f"eval.protocol: must be one of {PROTOCOLS}")
        if v["eval.split"] not in ("train", "test"):
            raise ConfigError("eval.split: must be 'train' or 'test'")
        for key in ("data.classes", "data.dim", "data.per_class", "eval.folds",
                    "eval.frames", "eval.template_size", "eval.max_rank"):
            if v[key] < 1:
                raise ConfigError(f"{key}: must be >= 1")
        if v["data.spread"] <= 0:
            raise ConfigError("data.spread: must be > 0")
        if v["eval.beta"] < 0:
            raise ConfigError("eval.beta: must be >= 0")
        if v["eval.pca_dim"] < 0:
            raise ConfigError("eval.pca_dim: must be >= 0 (0 keeps every dimension)")
