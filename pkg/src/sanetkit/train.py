"""Cross-entropy loss, AdamW with decoupled weight decay, and the early-stopped training loop."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import augment_flip
from .errors import ConfigError, DataError, NumericError
from .metrics import ConfusionMatrix, Scores, macro_scores
from .model import SaNet, save_checkpoint
from .tensor import Parameter, Tensor, backward, make_op, no_grad

log = logging.getLogger(__name__)

Sample = tuple[np.ndarray, np.ndarray]  # (H, W, 3) uint8 image, (H, W) label map


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 0.01
    batch_size: int = 2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    patience: int = 5
    max_epochs: int = 50
    seed: int = 0
    augment: bool = True

    def __post_init__(self):
        if not self.lr > 0 or not self.weight_decay > 0:
            raise ConfigError("lr and weight_decay must be > 0")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigError("batch_size and max_epochs must be >= 1")


def cross_entropy_loss(logits: Tensor, truth: np.ndarray) -> Tensor:
    """Mean over pixels of -log softmax(logits)[truth]; logits are (n, classes, H, W)."""
    n, k, h, w = logits.shape
    truth = np.asarray(truth)
    if truth.shape != (n, h, w):
        raise DataError(f"label shape {truth.shape} does not match logits {logits.shape}")
    if truth.min() < 0 or truth.max() >= k:
        bad = np.argwhere((truth < 0) | (truth >= k))[0]
        raise DataError(f"label {truth[tuple(bad)]} at {tuple(int(i) for i in bad)} outside [0, {k - 1}]")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    shifted = z - zmax
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    t = truth.astype(np.intp)[:, None]
    picked = np.take_along_axis(logp, t, axis=1)
    count = n * h * w
    loss = np.asarray(-picked.sum() / count, dtype=logits.dtype).reshape(1, 1, 1, 1)

    def backward_fn(g):
        grad = np.exp(logp)
        np.put_along_axis(grad, t, np.take_along_axis(grad, t, axis=1) - 1.0, axis=1)
        return (grad * (g.reshape(()) / count),)

    return make_op(loss, (logits,), backward_fn)


class AdamW:
    """Adam moments with weight decay applied directly to the weights.

    theta <- theta*(1 - lr*wd) - lr * m_hat / (sqrt(v_hat) + eps); exempt
    parameters skip the decay factor.
    """

    def __init__(self, params: Sequence[Parameter], lr=1e-4, weight_decay=0.01,
                 betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    @classmethod
    def from_config(cls, params, cfg: TrainConfig) -> "AdamW":
        return cls(params, lr=cfg.lr, weight_decay=cfg.weight_decay, betas=(cfg.beta1, cfg.beta2), eps=cfg.eps)

    def step(self, grads: dict | Sequence[np.ndarray]) -> None:
        if isinstance(grads, dict):
            grads = [grads[p] for p in self.params]
        for p, g in zip(self.params, grads):
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for {p.name or 'parameter'}; step aborted")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if not p.decay_exempt and self.weight_decay:
                p.data *= 1.0 - self.lr * self.weight_decay
            p.data -= self.lr * update

    def state(self) -> dict:
        return {"t": self.t, "m": [a.copy() for a in self.m], "v": [a.copy() for a in self.v]}


def adamw_step(params, grads, state, cfg: TrainConfig, t: int):
    """Functional single step; ``state`` is ``{"m": [...], "v": [...]}`` updated in place."""
    if t < 1:
        raise ValueError("step counter t must be >= 1")
    opt = AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay, betas=(cfg.beta1, cfg.beta2), eps=cfg.eps)
    opt.m, opt.v, opt.t = state["m"], state["v"], t - 1
    opt.step(grads)
    return params, state


class EarlyStopping:
    """Stop once the monitored score has not improved for ``patience`` epochs."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = -np.inf
        self.best_epoch = 0
        self.bad_epochs = 0

    def update(self, epoch: int, score: float) -> bool:
        """Record ``score``; return True if training should stop."""
        if score > self.best:
            self.best, self.best_epoch, self.bad_epochs = score, epoch, 0
        else:
            self.bad_epochs += 1
        return self.bad_epochs >= self.patience


def to_batch(samples: Sequence[Sample], dtype) -> tuple[Tensor, np.ndarray]:
    images = np.stack([s[0] for s in samples]).astype(dtype).transpose(0, 3, 1, 2) / dtype(255.0)
    labels = np.stack([s[1] for s in samples]).astype(np.int64)
    return Tensor(np.ascontiguousarray(images), dtype=dtype), labels


def predict(model: SaNet, images: Tensor) -> np.ndarray:
    with no_grad():
        return model(images).data.argmax(axis=1)


def evaluate(model: SaNet, samples: Sequence[Sample], batch_size: int = 8) -> Scores:
    return macro_scores(confusion(model, samples, batch_size))


def confusion(model: SaNet, samples: Sequence[Sample], batch_size: int = 8) -> ConfusionMatrix:
    cm = ConfusionMatrix(model.cfg.num_classes)
    for i in range(0, len(samples), batch_size):
        images, labels = to_batch(samples[i:i + batch_size], model.dtype.type)
        cm.accumulate(labels, predict(model, images))
    return cm


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_mean_f1: float
    val_oa: float


@dataclass
class FitResult:
    best_epoch: int
    best_state: dict[str, np.ndarray]
    history: list[EpochRecord] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)
    stopped_early: bool = False


LOG_HEADER = ("epoch", "train_loss", "val_mean_f1", "val_oa")


def train_step(model: SaNet, opt: AdamW, batch: Sequence[Sample]) -> float:
    images, labels = to_batch(batch, model.dtype.type)
    loss = cross_entropy_loss(model(images), labels)
    value = loss.item()
    if not np.isfinite(value):
        raise NumericError(f"training loss is {value}")
    grads = backward(loss, opt.params)
    opt.step(grads)
    return value


def fit(model: SaNet, train_set: Sequence[Sample], val_set: Sequence[Sample], cfg: TrainConfig = TrainConfig(),
        out_dir: str | Path | None = None,
        evaluate_fn: Callable[[SaNet, Sequence[Sample]], Scores] | None = None) -> FitResult:
    """Train with seeded shuffling and flips; early-stop on validation mean per-class F1.

    With ``out_dir`` set, appends rows to ``train_log.csv`` and keeps
    ``last.ckpt`` and ``best.ckpt`` current. On a non-finite loss the run
    aborts with :class:`NumericError`; the best checkpoint already on disk
    (and ``model``'s best state, restored in place) is kept.
    """
    if not train_set or not val_set:
        raise DataError("training and validation sets must be non-empty")
    evaluate_fn = evaluate_fn or evaluate
    rng = np.random.default_rng(cfg.seed)
    opt = AdamW.from_config(model.parameters(), cfg)
    stopper = EarlyStopping(cfg.patience)
    result = FitResult(best_epoch=0, best_state=model.state_dict())
    log_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "train_log.csv"
        with open(log_path, "w", newline="") as fh:
            csv.writer(fh).writerow(LOG_HEADER)

    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(train_set))
        losses = []
        try:
            for i in range(0, len(order), cfg.batch_size):
                batch = [train_set[j] for j in order[i:i + cfg.batch_size]]
                if cfg.augment:
                    batch = [augment_flip(img, lab, rng) for img, lab in batch]
                losses.append(train_step(model, opt, batch))
        except NumericError:
            model.load_state_dict(result.best_state)
            log.error("epoch %d: non-finite values, aborting; best epoch %d retained", epoch, result.best_epoch)
            raise
        result.step_losses.extend(losses)
        scores = evaluate_fn(model, val_set)
        rec = EpochRecord(epoch, float(np.mean(losses)), scores.mean_f1, scores.oa)
        result.history.append(rec)
        log.info("epoch %d loss %.6f val_mean_f1 %.4f val_oa %.4f", epoch, rec.train_loss, rec.val_mean_f1, rec.val_oa)
        if log_path is not None:
            with open(log_path, "a", newline="") as fh:
                csv.writer(fh).writerow([epoch, repr(rec.train_loss), repr(rec.val_mean_f1), repr(rec.val_oa)])
        stop = stopper.update(epoch, scores.mean_f1)
        if stopper.best_epoch == epoch:
            result.best_epoch = epoch
            result.best_state = model.state_dict()
            if out_dir is not None:
                save_checkpoint(model, out_dir / "best.ckpt")
        if out_dir is not None:
            save_checkpoint(model, out_dir / "last.ckpt")
        if stop:
            result.stopped_early = True
            break

    model.load_state_dict(result.best_state)
    return result
