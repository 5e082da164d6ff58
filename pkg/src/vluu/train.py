"""Training strategies over one shared network, optimizer and step budget.

Every strategy uses the same architecture, Adam settings, seed-derived
initialization and step count; only the construction of inputs and targets
differs:

``vluu``    vicinal batches (concatenated inputs, Dirichlet-fused soft labels)
``mbg``     unannotated pixels treated as background
``imbp``    softmax and loss restricted to {background, annotated class}
``kt``      shared encoder, one binary head per class, round-robin updates
``oracle``  the same training images with complete labels

Single-image strategies replicate the image into all K input blocks so that
all strategies share one input shape.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from vluu import nn
from vluu.data import FullDataset, check_ordered
from vluu.errors import ConfigError, DivergenceError
from vluu.vicinal import make_vicinal_batch

log = logging.getLogger(__name__)

STRATEGIES = ("vluu", "vluu-adv", "mbg", "imbp", "kt", "oracle")

# independent rng streams per run, keyed by (seed, stream id)
INIT_STREAM, DATA_STREAM, DISC_STREAM, HELDOUT_STREAM = 0, 1, 2, 3


@dataclass
class TrainConfig:
    strategy: str = "vluu"
    batch_size: int = 8
    learning_rate: float = 1e-3
    alpha: float = 0.1
    epsilon: float = 1e-3
    total_steps: int = 2000
    seed: int = 0
    lam: float = 0.001
    disc_lr: float = 1e-3
    checkpoint_every: int = 200

    # JSON spells the adversarial weight "lambda"
    _RENAMES = {"lambda": "lam"}

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}; choose from {STRATEGIES}")
        for name in ("batch_size", "total_steps", "checkpoint_every"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("learning_rate", "alpha", "epsilon", "disc_lr"):
            if not float(getattr(self, name)) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.lam < 0:
            raise ConfigError("lambda must be >= 0")

    @classmethod
    def from_dict(cls, d):
        d = {cls._RENAMES.get(k, k): v for k, v in d.items()}
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path):
        try:
            with open(path) as fh:
                d = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read train config {path}: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigError("train config must be a JSON object")
        return cls.from_dict(d)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["lambda"] = d.pop("lam")
        return d


@dataclass
class TrainHistory:
    losses: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)  # (step, held-out loss)
    disc_losses: list = field(default_factory=list)
    disc_score_range: list = field(default_factory=lambda: [1.0, 0.0])  # [min, max]

    def to_text(self):
        return losses_text(self.losses)


def losses_text(losses):
    """One ``step<TAB>loss`` line per entry."""
    return "".join(f"{i}\t{loss:.9g}\n" for i, loss in enumerate(losses))


@dataclass
class TrainResult:
    model: object
    history: TrainHistory
    disc: object = None


def stream(seed, stream_id):
    return np.random.default_rng([seed, stream_id])


def architecture(datasets):
    """Network geometry implied by K class-ordered datasets of (C, H, W) images."""
    c, h, w = datasets[0].shape
    k = len(datasets)
    return nn.ArchConfig(in_channels=k * c, num_classes=k, height=h, width=w)


# ---------------------------------------------------------------------------
# losses on NHWC tensors


def ce_and_grad(logits, target):
    """Soft cross-entropy of softmax(logits) and its gradient w.r.t. logits."""
    p = nn.softmax(logits)
    loss = nn.soft_cross_entropy(p, target, axis=-1)
    return loss, nn.softmax_backward(p, nn.soft_cross_entropy_grad(p, target, axis=-1)), p


def masked_ce_and_grad(logits, target, allowed):
    """Cross-entropy with the softmax restricted to ``allowed`` channels per image.

    Excluded channels get probability zero and exactly zero gradient.
    """
    p = nn.masked_softmax(logits, allowed)
    loss = nn.soft_cross_entropy(p, target, axis=-1)
    dp = np.where(allowed, nn.soft_cross_entropy_grad(p, target, axis=-1), 0)
    return loss, np.where(allowed, nn.softmax_backward(p, dp), 0).astype(logits.dtype, copy=False)


def kt_loss_and_grad(logits, y):
    """Mean pixel-wise binary cross-entropy of sigmoid(logits) against masks ``y``."""
    s = nn.sigmoid(logits)
    loss = float(nn.binary_cross_entropy(s, y).mean())
    d = nn.binary_cross_entropy_grad(s, y) * s * (1 - s) / s.size
    return loss, d.astype(logits.dtype, copy=False)


def one_hot(labels, k):
    """(N, H, W) ids -> (N, H, W, K+1) one-hot, float32."""
    out = np.zeros(labels.shape + (k + 1,), dtype=np.float32)
    np.put_along_axis(out, labels[..., None].astype(np.intp), 1.0, axis=-1)
    return out


def replicate_nhwc(images, k):
    """(N, C, H, W) images -> (N, H, W, K*C) with the image in every block."""
    x = images.transpose(0, 2, 3, 1)
    return np.ascontiguousarray(np.concatenate([x] * k, axis=-1), dtype=np.float32)


def vicinal_arrays(examples):
    x = np.stack([e.input for e in examples]).transpose(0, 2, 3, 1)
    t = np.stack([e.target for e in examples]).transpose(0, 2, 3, 1)
    return (np.ascontiguousarray(x, dtype=np.float32),
            np.ascontiguousarray(t, dtype=np.float32))


# ---------------------------------------------------------------------------
# loop


def _check_finite(loss, strategy, step, who="segmenter"):
    if not np.isfinite(loss):
        raise DivergenceError(f"{strategy}: {who} loss became non-finite ({loss}) at step {step}")


def _run(config, model, step_fn, heldout_fn, on_checkpoint):
    history = TrainHistory()
    history.snapshots.append((0, heldout_fn()))
    for step in range(config.total_steps):
        loss = step_fn(step)
        _check_finite(loss, config.strategy, step)
        history.losses.append(loss)
        done = step + 1
        if done % config.checkpoint_every == 0 or done == config.total_steps:
            history.snapshots.append((done, heldout_fn()))
            if on_checkpoint is not None:
                on_checkpoint(done, model, history)
    return history


def train_vluu(datasets, config, on_checkpoint=None):
    """VLUU: every step trains on a fresh batch of vicinal examples."""
    check_ordered(datasets)
    arch = architecture(datasets)
    net = nn.SegNet(arch).init(stream(config.seed, INIT_STREAM))
    opt = nn.AdamState(lr=config.learning_rate)
    rng = stream(config.seed, DATA_STREAM)
    hx, ht = vicinal_arrays(make_vicinal_batch(
        datasets, config.batch_size, config.alpha, config.epsilon, stream(config.seed, HELDOUT_STREAM)))

    def step_fn(step):
        x, t = vicinal_arrays(make_vicinal_batch(
            datasets, config.batch_size, config.alpha, config.epsilon, rng))
        loss, dlogits, _ = ce_and_grad(net.logits(x), t)
        net.backward(dlogits)
        nn.adam_step(net.params, net.grads, opt)
        return loss

    def heldout():
        return ce_and_grad(net.logits(hx), ht)[0]

    history = _run(config, net, step_fn, heldout, on_checkpoint)
    return TrainResult(net, history)


def _pooled_partial(datasets):
    """Stack partial datasets into (images, id labels, annotated class per image)."""
    images = np.concatenate([d.images for d in datasets])
    labels = np.concatenate([d.masks * np.uint8(d.class_index) for d in datasets])
    classes = np.concatenate([np.full(len(d), d.class_index) for d in datasets])
    return images, labels, classes


def _supervised(images, labels, k, config, allowed=None, on_checkpoint=None):
    """Shared loop for MBG / IMBP / Oracle: hard one-hot targets on replicated inputs."""
    c, h, w = images.shape[1:]
    arch = nn.ArchConfig(in_channels=k * c, num_classes=k, height=h, width=w)
    net = nn.SegNet(arch).init(stream(config.seed, INIT_STREAM))
    opt = nn.AdamState(lr=config.learning_rate)
    rng = stream(config.seed, DATA_STREAM)
    n = len(images)

    def batch(idx):
        x = replicate_nhwc(images[idx], k)
        t = one_hot(labels[idx], k)
        return x, t, None if allowed is None else allowed[idx][:, None, None, :]

    def loss_grad(x, t, a):
        logits = net.logits(x)
        if a is None:
            loss, d, _ = ce_and_grad(logits, t)
        else:
            loss, d = masked_ce_and_grad(logits, t, a)
        return loss, d

    held = batch(stream(config.seed, HELDOUT_STREAM).integers(n, size=config.batch_size))

    def step_fn(step):
        loss, d = loss_grad(*batch(rng.integers(n, size=config.batch_size)))
        net.backward(d)
        nn.adam_step(net.params, net.grads, opt)
        return loss

    history = _run(config, net, step_fn, lambda: loss_grad(*held)[0], on_checkpoint)
    return TrainResult(net, history)


def train_mbg(datasets, config, on_checkpoint=None):
    """Unannotated pixels become background; given full labels this is the oracle."""
    if isinstance(datasets, FullDataset):
        return train_oracle(datasets, config, on_checkpoint)
    check_ordered(datasets)
    images, labels, _ = _pooled_partial(datasets)
    return _supervised(images, labels, len(datasets), config, on_checkpoint=on_checkpoint)


def imbp_allowed(classes, k):
    """(N, K+1) channel masks: background plus the image's annotated class."""
    allowed = np.zeros((len(classes), k + 1), dtype=bool)
    allowed[:, 0] = True
    allowed[np.arange(len(classes)), classes] = True
    return allowed


def train_imbp(datasets, config, on_checkpoint=None):
    """Missing classes are dropped from the softmax and the loss of each image."""
    check_ordered(datasets)
    k = len(datasets)
    images, labels, classes = _pooled_partial(datasets)
    return _supervised(images, labels, k, config, allowed=imbp_allowed(classes, k),
                       on_checkpoint=on_checkpoint)


def train_oracle(dataset, config, on_checkpoint=None):
    """Standard supervised training on fully labeled images."""
    return _supervised(dataset.images, dataset.labels, dataset.num_classes, config,
                       on_checkpoint=on_checkpoint)


def train_kt(datasets, config, on_checkpoint=None):
    """Shared encoder, K sigmoid heads; step ``s`` trains head ``s mod K`` on dataset ``s mod K``."""
    check_ordered(datasets)
    k = len(datasets)
    arch = architecture(datasets)
    net = nn.KTNet(arch).init(stream(config.seed, INIT_STREAM))
    enc_opt = nn.AdamState(lr=config.learning_rate)
    head_opts = [nn.AdamState(lr=config.learning_rate) for _ in range(k)]
    rng = stream(config.seed, DATA_STREAM)
    hrng = stream(config.seed, HELDOUT_STREAM)
    held = []
    for d in datasets:
        idx = hrng.integers(len(d), size=config.batch_size)
        held.append((replicate_nhwc(d.images[idx], k), d.masks[idx].astype(np.float32)))

    def step_fn(step):
        head = step % k
        d = datasets[head]
        idx = rng.integers(len(d), size=config.batch_size)
        x = replicate_nhwc(d.images[idx], k)
        y = d.masks[idx].astype(np.float32)
        loss, dz = kt_loss_and_grad(net.head_logits(x, head), y)
        net.backward(dz, head)
        grads = net.grads_for(head)
        params = net.params
        nn.adam_step(params, {n: g for n, g in grads.items() if n.startswith("encoder.")}, enc_opt)
        nn.adam_step(params, {n: g for n, g in grads.items() if not n.startswith("encoder.")},
                     head_opts[head])
        return loss

    def heldout():
        return float(np.mean([kt_loss_and_grad(net.head_logits(x, h), y)[0]
                              for h, (x, y) in enumerate(held)]))

    history = _run(config, net, step_fn, heldout, on_checkpoint)
    return TrainResult(net, history)


def kt_fuse(head_probs, threshold=0.5):
    """Per pixel: background if every head is below ``threshold``, else argmax head + 1."""
    head_probs = np.asarray(head_probs)
    labels = head_probs.argmax(axis=-1) + 1
    return np.where((head_probs < threshold).all(axis=-1), 0, labels).astype(np.uint8)


def train(strategy_data, config, on_checkpoint=None):
    """Dispatch on ``config.strategy``.

    ``strategy_data`` is the list of K partial datasets, or a FullDataset for
    the oracle.
    """
    s = config.strategy
    if s == "oracle":
        if not isinstance(strategy_data, FullDataset):
            raise ConfigError("the oracle strategy needs a fully labeled dataset")
        return train_oracle(strategy_data, config, on_checkpoint)
    if isinstance(strategy_data, FullDataset):
        if s == "mbg":
            return train_mbg(strategy_data, config, on_checkpoint)
        raise ConfigError(f"strategy {s} needs partially labeled datasets")
    if s == "vluu":
        return train_vluu(strategy_data, config, on_checkpoint)
    if s == "vluu-adv":
        from vluu.adversarial import train_vluu_adv
        return train_vluu_adv(strategy_data, config, on_checkpoint)
    if s == "mbg":
        return train_mbg(strategy_data, config, on_checkpoint)
    if s == "imbp":
        return train_imbp(strategy_data, config, on_checkpoint)
    if s == "kt":
        return train_kt(strategy_data, config, on_checkpoint)
    raise ConfigError(f"unknown strategy {s!r}")
