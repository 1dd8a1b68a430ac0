"""SGD training loop, evaluation, and magnitude pruning of rings."""

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    """Raised when the training loss stops being finite."""

    def __init__(self, message, records):
        super().__init__(message)
        self.records = records


@dataclass
class TrainConfig:
    batch_size: int = 128
    epochs: int = 200
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_gamma: float = 0.1
    lr_milestones: list = field(default_factory=lambda: [60, 120, 160])
    seed: int = 0
    precision: int = 32

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        ms = list(self.lr_milestones)
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ValueError("lr milestones must be strictly increasing")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size >= 1 and epochs >= 0 required")
        if self.precision not in (32, 64):
            raise ValueError("precision is 32 or 64")

    @property
    def dtype(self):
        return np.float32 if self.precision == 32 else np.float64


@dataclass
class TrainRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_acc: float
    lr: float
    backbone_params: int
    total_params: int

    def as_row(self):
        return asdict(self)


RECORD_FIELDS = ["epoch", "train_loss", "train_acc", "val_acc", "lr",
                 "backbone_params", "total_params"]


def lr_at(epoch, cfg):
    """Step schedule: ``lr0 * gamma ** (#milestones <= epoch)``."""
    passed = sum(1 for m in cfg.lr_milestones if m <= epoch)
    return cfg.lr * cfg.lr_gamma ** passed


def sgd_step(params, state, lr, momentum=0.0, weight_decay=0.0):
    """One SGD update with momentum and coupled weight decay, in place.

    ``v <- m * v + g + wd * p`` then ``p <- p - lr * v``.  Decay applies only
    to params flagged ``decay``; a ring is a single param, so each ring element
    decays once per step however many layers read it.
    """
    for p in params:
        if p.grad is None:
            continue
        d = p.grad
        if weight_decay and p.decay:
            d = d + weight_decay * p.data
        if momentum:
            v = state.get(p.name)
            if v is None:
                v = state[p.name] = np.zeros_like(p.data)
            v *= momentum
            v += d
            d = v
        p.data -= lr * d


def prune_ring(ring, fraction):
    """Zero the ``floor(fraction * N)`` smallest-magnitude ring elements.

    Ties go to the lower index.  Returns the boolean mask of pruned
    positions; the caller keeps it applied after every optimizer step.
    """
    if not 0 <= fraction < 1:
        raise ValueError("prune fraction must lie in [0, 1)")
    k = int(math.floor(fraction * ring.size))
    mask = np.zeros(ring.size, dtype=bool)
    if k:
        order = np.argsort(np.abs(ring.values), kind="stable")
        mask[order[:k]] = True
        ring.values[mask] = 0
    return mask


def prune_model(model, fraction):
    """Prune every ring of ``model`` and register the masks with its generator."""
    gen = model.generator
    if gen is None:
        raise ValueError("model has no rings to prune")
    for ring in gen.rings:
        mask = prune_ring(ring, fraction)
        prev = gen.masks.get(ring.id)
        gen.masks[ring.id] = mask if prev is None else (prev | mask)
    gen.apply_masks()


def random_crop_flip(images, rng, pad=4):
    """Pad-and-crop plus horizontal flip, one draw per image from ``rng``."""
    n, c, h, w = images.shape
    padded = np.pad(images, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    dy = rng.integers(0, 2 * pad + 1, n)
    dx = rng.integers(0, 2 * pad + 1, n)
    flip = rng.random(n) < 0.5
    out = np.empty_like(images)
    for i in range(n):
        crop = padded[i, :, dy[i]:dy[i] + h, dx[i]:dx[i] + w]
        out[i] = crop[:, :, ::-1] if flip[i] else crop
    return out


def evaluate(model, dataset, batch_size=256):
    if dataset is None or len(dataset) == 0:
        return float("nan")
    preds = model.predict(dataset.images, batch_size)
    return float((preds == dataset.labels).mean())


def train_model(model, train_set, cfg, val_set=None, augment=None,
                count_bn=False, on_epoch=None):
    """Train ``model`` in place and return one :class:`TrainRecord` per epoch.

    Batch order and augmentation for epoch ``e`` come from
    ``numpy.random.default_rng([seed, e])``, so a fixed seed reproduces the
    whole run.  ``augment`` defaults to crop+flip for CIFAR-10 only.
    """
    if augment is None:
        augment = getattr(train_set, "name", "") == "cifar10"
    params = model.parameters()
    state = {}
    records = []
    backbone, total = model.param_counts(count_bn)
    n = len(train_set)
    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(n)
        loss_sum = 0.0
        correct = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            x = train_set.images[idx]
            if augment:
                x = random_crop_flip(x, rng)
            y = train_set.labels[idx]
            loss, logits = model.loss_and_grad(x, y)
            if not math.isfinite(loss):
                bad = TrainRecord(epoch, float("nan"), float("nan"),
                                  float("nan"), lr, backbone, total)
                raise DivergenceError(
                    f"loss became {loss} at epoch {epoch}, batch {start // cfg.batch_size}",
                    records + [bad])
            sgd_step(params, state, lr, cfg.momentum, cfg.weight_decay)
            model.after_step()
            loss_sum += loss * len(idx)
            correct += int((logits.argmax(axis=1) == y).sum())
        rec = TrainRecord(epoch, loss_sum / n, correct / n,
                          evaluate(model, val_set), lr, backbone, total)
        log.info("epoch %d loss %.4f train_acc %.4f val_acc %.4f", epoch,
                 rec.train_loss, rec.train_acc, rec.val_acc)
        records.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
    return records
