"""Dense embedding network, momentum SGD with step learning-rate drops, training loop.

The network maps inputs through ``len(hidden_dims)`` dense layers with a
ReLU/PReLU nonlinearity, then a final linear layer to the ``feature_dim``
embedding that the losses consume.
"""

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dataio
from .losses import SCALE_MIN, ClassHead, FeatureBatch, LossConfig, joint_loss
from .numcore import ShapeError, as_matrix, cosine_matrix, make_rng

ACTIVATIONS = ("relu", "prelu")
PRELU_INIT = 0.25


@dataclass(frozen=True)
class NetworkSpec:
    input_dim: int
    hidden_dims: tuple = ()
    feature_dim: int = 2
    activation: str = "relu"
    init_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        dims = (self.input_dim, *self.hidden_dims, self.feature_dim)
        if min(dims) < 1:
            raise ValueError(f"all layer sizes must be >= 1, got {dims}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")

    @property
    def layer_dims(self):
        dims = (self.input_dim, *self.hidden_dims, self.feature_dim)
        return list(zip(dims[:-1], dims[1:]))


class NetworkState:
    """Parameters and momentum buffers of a :class:`NetworkSpec` network.

    ``params`` is ordered: per layer ``W{l}`` (fan_in x fan_out), ``b{l}`` and,
    for hidden PReLU layers, ``a{l}`` (one slope per unit).
    """

    def __init__(self, spec: NetworkSpec, params: dict):
        self.spec = spec
        self.params = params
        self.velocity = {k: np.zeros_like(v) for k, v in params.items()}
        self.version = 0

    @classmethod
    def init(cls, spec: NetworkSpec) -> "NetworkState":
        rng = make_rng(spec.init_seed)
        params = {}
        n_layers = len(spec.layer_dims)
        for l, (fan_in, fan_out) in enumerate(spec.layer_dims):
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            params[f"W{l}"] = rng.uniform(-limit, limit, size=(fan_in, fan_out))
            params[f"b{l}"] = np.zeros(fan_out)
            if spec.activation == "prelu" and l < n_layers - 1:
                params[f"a{l}"] = np.full(fan_out, PRELU_INIT)
        return cls(spec, params)

    def copy(self) -> "NetworkState":
        other = NetworkState(self.spec, {k: v.copy() for k, v in self.params.items()})
        other.velocity = {k: v.copy() for k, v in self.velocity.items()}
        return other


@dataclass
class ForwardCache:
    version: int
    inputs: np.ndarray
    pre: list
    post: list


def forward(net: NetworkState, inputs):
    x = as_matrix(inputs)
    if x.shape[1] != net.spec.input_dim:
        raise ShapeError(f"input dim {x.shape[1]} != {net.spec.input_dim}")
    n_layers = len(net.spec.layer_dims)
    pre, post = [], []
    a = x
    for l in range(n_layers):
        z = a @ net.params[f"W{l}"] + net.params[f"b{l}"]
        pre.append(z)
        if l < n_layers - 1:
            if net.spec.activation == "relu":
                a = np.maximum(z, 0.0)
            else:
                a = np.where(z > 0, z, net.params[f"a{l}"] * z)
        else:
            a = z
        post.append(a)
    return a, ForwardCache(net.version, x, pre, post)


def backward(net: NetworkState, cache: ForwardCache, grad_features) -> dict:
    """Gradients of every parameter given dL/d(features); no weight decay here."""
    if cache.version != net.version:
        raise ValueError("stale forward cache: parameters changed since forward")
    g = as_matrix(grad_features)
    if g.shape != cache.post[-1].shape:
        raise ShapeError(f"grad shape {g.shape} != feature shape {cache.post[-1].shape}")
    grads = {}
    n_layers = len(net.spec.layer_dims)
    for l in reversed(range(n_layers)):
        z = cache.pre[l]
        if l < n_layers - 1:
            if net.spec.activation == "relu":
                g = g * (z > 0)
            else:
                slope = net.params[f"a{l}"]
                grads[f"a{l}"] = np.sum(g * np.where(z > 0, 0.0, z), axis=0)
                g = g * np.where(z > 0, 1.0, slope)
        below = cache.inputs if l == 0 else cache.post[l - 1]
        grads[f"W{l}"] = below.T @ g
        grads[f"b{l}"] = g.sum(axis=0)
        if l > 0:
            g = g @ net.params[f"W{l}"].T
    return {k: grads[k] for k in net.params}


@dataclass(frozen=True)
class SGDConfig:
    base_lr: float = 0.1
    lr_drops: tuple = ((16000, 10.0), (24000, 10.0))
    momentum: float = 0.9
    weight_decay: float = 0.0005
    max_iter: int = 28000
    batch_size: int = 256

    def __post_init__(self):
        drops = tuple((int(i), float(d)) for i, d in self.lr_drops)
        object.__setattr__(self, "lr_drops", drops)
        its = [i for i, _ in drops]
        if any(b <= a for a, b in zip(its, its[1:])):
            raise ValueError("lr_drops iterations must be strictly increasing")
        if not self.base_lr >= 0:
            raise ValueError("base_lr must be >= 0")
        if self.batch_size < 1 or self.max_iter < 0:
            raise ValueError("batch_size must be >= 1 and max_iter >= 0")


def scratch_schedule(max_iter=28000, base_lr=0.1, **kw) -> SGDConfig:
    """The from-scratch recipe (drops by 10 at 16/28 and 24/28 of training)."""
    drops = ((round(max_iter * 16 / 28), 10.0), (round(max_iter * 24 / 28), 10.0))
    return SGDConfig(base_lr=base_lr, lr_drops=drops, max_iter=max_iter, **kw)


def finetune_schedule(max_iter=4000, base_lr=0.001, **kw) -> SGDConfig:
    return SGDConfig(base_lr=base_lr, lr_drops=(), max_iter=max_iter, **kw)


def lr_at(cfg: SGDConfig, iteration: int) -> float:
    lr = cfg.base_lr
    for it, div in cfg.lr_drops:
        if iteration >= it:
            lr /= div
    return lr


def sgd_step(params: dict, grads: dict, velocity: dict, cfg: SGDConfig, iteration: int,
             no_decay=()):
    """In-place momentum update with L2 weight decay folded into the gradient.

    ``v <- momentum * v + (grad + wd * param)``, ``param <- param - lr * v``.
    """
    lr = lr_at(cfg, iteration)
    for name, p in params.items():
        g = grads[name]
        if name not in no_decay:
            g = g + cfg.weight_decay * p
        v = velocity[name]
        v *= cfg.momentum
        v += g
        p -= lr * v


@dataclass
class TrainingLog:
    """Per-iteration records; ``margins`` holds the per-class state entering each step."""

    iterations: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    loss: list = field(default_factory=list)
    violation_count: list = field(default_factory=list)
    hard_count: list = field(default_factory=list)
    mean_intra_cosine: list = field(default_factory=list)
    scale: list = field(default_factory=list)
    margins: list = field(default_factory=list)

    def to_csv(self, path):
        cols = ["iteration", "lr", "loss", "violation_count", "hard_count",
                "mean_intra_cosine", "scale"]
        n_marg = len(self.margins[0]) if self.margins else 0
        cols += [f"margin_{j}" for j in range(n_marg)]
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(",".join(cols) + "\n")
            for r in range(len(self.iterations)):
                row = [str(self.iterations[r]), repr(self.lr[r]), repr(self.loss[r]),
                       str(self.violation_count[r]), str(self.hard_count[r]),
                       repr(self.mean_intra_cosine[r]), repr(self.scale[r])]
                if n_marg:
                    row += [repr(float(m)) for m in self.margins[r]]
                fh.write(",".join(row) + "\n")


def head_params(head: ClassHead) -> dict:
    return {"head.W": head.weights, "head.s": np.array([head.scale])}


def epoch_seed(seed: int, epoch: int):
    return [seed, epoch, 7]


def train(dataset: dataio.Dataset, spec: NetworkSpec, loss_cfg: LossConfig, sgd_cfg: SGDConfig,
          seed: int = 0, warm_start=None, augment=False, log_margins=None):
    """Train the network and class head; returns ``(net, head, log)``.

    ``warm_start`` is a ``(NetworkState, ClassHead)`` pair (e.g. from
    :func:`load_checkpoint`) to fine-tune from; its spec and class count must
    match. Margin snapshots are logged for adaptive variants unless
    ``log_margins`` says otherwise.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if warm_start is not None:
        net, head = warm_start
        if _dims(net.spec) != _dims(spec):
            raise ValueError(f"checkpoint spec {net.spec} does not match {spec}")
        if head.num_classes != dataset.class_count or head.dim != spec.feature_dim:
            raise ValueError("checkpoint head does not match dataset classes / feature dim")
        net = NetworkState(spec, {k: v.copy() for k, v in net.params.items()})
        head = ClassHead(head.weights.copy(), np.full(head.num_classes, loss_cfg.alpha0),
                         head.scale if loss_cfg.variant.normalized else loss_cfg.scale_init)
    else:
        net = NetworkState.init(spec)
        head = ClassHead.init(spec.feature_dim, dataset.class_count, make_rng([seed, 3]),
                              alpha0=loss_cfg.alpha0, scale=loss_cfg.scale_init)
    if log_margins is None:
        log_margins = loss_cfg.variant.adaptive

    hparams = head_params(head)
    hvel = {k: np.zeros_like(v) for k, v in hparams.items()}
    learn_scale = loss_cfg.variant.normalized and loss_cfg.scale_learnable
    log = TrainingLog()
    it, epoch = 0, 0
    while it < sgd_cfg.max_iter:
        for b in dataio.batches(dataset, sgd_cfg.batch_size, epoch_seed(seed, epoch), augment):
            if it >= sgd_cfg.max_iter:
                break
            feats, cache = forward(net, b.inputs)
            margins_in = head.margins.copy()
            out = joint_loss(FeatureBatch(feats, b.labels), head, loss_cfg)
            grads = backward(net, cache, out.grad_features)
            slopes = [k for k in net.params if k.startswith("a")]
            sgd_step(net.params, grads, net.velocity, sgd_cfg, it, no_decay=slopes)
            net.version += 1
            hgrads = {"head.W": out.grad_weights,
                      "head.s": np.array([out.grad_scale if learn_scale else 0.0])}
            sgd_step(hparams, hgrads, hvel, sgd_cfg, it, no_decay=("head.s",))
            head.scale = max(float(hparams["head.s"][0]), SCALE_MIN)
            hparams["head.s"][0] = head.scale

            d = out.diagnostics
            log.iterations.append(it)
            log.lr.append(lr_at(sgd_cfg, it))
            log.loss.append(out.loss)
            log.violation_count.append(d.violation_count)
            log.hard_count.append(d.hard_count)
            log.mean_intra_cosine.append(d.mean_intra_cosine)
            log.scale.append(head.scale)
            if log_margins:
                log.margins.append(margins_in)
            it += 1
        epoch += 1
    return net, head, log


def _dims(spec: NetworkSpec):
    return (spec.input_dim, spec.hidden_dims, spec.feature_dim, spec.activation)


def features_of(net: NetworkState, samples, chunk=4096) -> np.ndarray:
    samples = as_matrix(samples)
    if samples.shape[0] == 0:
        return np.zeros((0, net.spec.feature_dim))
    return np.concatenate([forward(net, samples[i:i + chunk])[0]
                           for i in range(0, samples.shape[0], chunk)])


def accuracy(net: NetworkState, head: ClassHead, ds: dataio.Dataset, normalized=False) -> float:
    """Fraction of samples whose argmax class logit matches the label."""
    f = features_of(net, ds.samples)
    if normalized:
        logits = cosine_matrix(f, head.weights)
    else:
        logits = f @ head.weights
    return float(np.mean(np.argmax(logits, axis=1) == ds.labels))


# Checkpoint layout (all little-endian):
#   8s   magic b"ADMLCKPT"
#   u32  format version (1)
#   u32  input_dim, u32 feature_dim, u32 class_count
#   u32  activation code (0 relu, 1 prelu)
#   u64  init_seed
#   u32  hidden layer count H, then H x u32 hidden sizes
#   f64  blocks in declaration order: per layer W (row-major), b, [a];
#        head weights (feature_dim x class_count, row-major), head margins, head scale
CKPT_MAGIC = b"ADMLCKPT"
CKPT_VERSION = 1


def save_checkpoint(path, net: NetworkState, head: ClassHead):
    spec = net.spec
    hdr = struct.pack("<8sIIIIIQI", CKPT_MAGIC, CKPT_VERSION, spec.input_dim, spec.feature_dim,
                      head.num_classes, ACTIVATIONS.index(spec.activation), spec.init_seed,
                      len(spec.hidden_dims))
    hdr += struct.pack(f"<{len(spec.hidden_dims)}I", *spec.hidden_dims)
    blocks = [net.params[k] for k in net.params]
    blocks += [head.weights, head.margins, np.array([head.scale])]
    body = b"".join(np.ascontiguousarray(b, dtype="<f8").tobytes() for b in blocks)
    Path(path).write_bytes(hdr + body)


def load_checkpoint(path):
    """Return ``(NetworkState, ClassHead)`` read from ``path``."""
    data = Path(path).read_bytes()
    fixed = struct.calcsize("<8sIIIIIQI")
    if len(data) < fixed or data[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    (_, version, input_dim, feature_dim, n_classes, act, init_seed,
     n_hidden) = struct.unpack_from("<8sIIIIIQI", data)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = fixed
    hidden = struct.unpack_from(f"<{n_hidden}I", data, off)
    off += 4 * n_hidden
    spec = NetworkSpec(input_dim, hidden, feature_dim, ACTIVATIONS[act], init_seed)
    template = NetworkState.init(spec)
    shapes = [(k, v.shape) for k, v in template.params.items()]
    shapes += [("head.W", (feature_dim, n_classes)), ("head.m", (n_classes,)), ("head.s", (1,))]
    total = sum(int(np.prod(s)) for _, s in shapes)
    if len(data) != off + 8 * total:
        raise ValueError(f"{path}: expected {off + 8 * total} bytes, found {len(data)}")
    flat = np.frombuffer(data, dtype="<f8", offset=off).astype(np.float64)
    arrays, pos = {}, 0
    for k, s in shapes:
        size = int(np.prod(s))
        arrays[k] = flat[pos:pos + size].reshape(s).copy()
        pos += size
    params = {k: arrays[k] for k, _ in shapes[:-3]}
    head = ClassHead(arrays["head.W"], arrays["head.m"], float(arrays["head.s"][0]))
    return NetworkState(spec, params), head
