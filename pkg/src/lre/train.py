"""Optimizer, schedules, losses, metrics, and the toy training loop."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import Dataset
from .encoder import Model, classify, decay_mask, save_model
from .tensor import (GRAPH, ConfigError, NumericError, Tensor, backward,
                     no_grad, zero_grads)


@dataclass(frozen=True)
class TrainConfig:
    lr_peak: float = 1e-3
    warmup_epochs: int = 3
    total_epochs: int = 30
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.05
    batch_size: int = 32
    label_smoothing: float = 0.0
    loss_kind: str = "ce"         # ce | wbce
    bce_alpha: float = 0.5
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if not (0 <= self.label_smoothing < 1):
            raise ConfigError("label_smoothing must be in [0, 1)")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigError("betas must be in (0, 1)")
        if self.warmup_epochs >= self.total_epochs:
            raise ConfigError("warmup_epochs must be < total_epochs")
        if self.loss_kind not in ("ce", "wbce"):
            raise ConfigError(f"unknown loss kind {self.loss_kind!r}")


@dataclass
class Metrics:
    top1: float = 0.0
    ebf: float = 0.0
    mif: float = 0.0


class AdamW:
    """Decoupled weight decay (applied before the moment update), bias-corrected
    moments. Norm affines and embeddings are excluded from decay."""

    def __init__(self, params: dict[str, Tensor], cfg: TrainConfig,
                 decay: dict[str, bool] | None = None):
        self.params = params
        self.cfg = cfg
        self.decay = decay if decay is not None else {nm: True for nm in params}
        self.m = {nm: np.zeros_like(p.data) for nm, p in params.items()}
        self.v = {nm: np.zeros_like(p.data) for nm, p in params.items()}
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        cfg = self.cfg
        bc1 = 1.0 - cfg.beta1 ** self.t
        bc2 = 1.0 - cfg.beta2 ** self.t
        for nm, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if not np.isfinite(g).all():
                raise NumericError(f"non-finite gradient for parameter {nm!r}")
            if self.decay.get(nm, True) and cfg.weight_decay:
                p.data *= 1.0 - lr * cfg.weight_decay
            m = self.m[nm]
            v = self.v[nm]
            m *= cfg.beta1
            m += (1 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1 - cfg.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + cfg.adam_eps)
            p.data -= (lr * update).astype(p.dtype)


def adamw_step(opt: AdamW, lr: float) -> None:
    opt.step(lr)


def cosine_warmup_lr(epoch_frac: float, cfg: TrainConfig) -> float:
    """Linear ramp to lr_peak over the warmup span, then cosine decay to 0."""
    if not (0 <= epoch_frac <= 1):
        raise ConfigError("epoch_frac must be in [0, 1]")
    w = cfg.warmup_epochs / cfg.total_epochs
    if epoch_frac < w:
        return cfg.lr_peak * epoch_frac / w
    progress = (epoch_frac - w) / (1 - w)
    return cfg.lr_peak * 0.5 * (1 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# losses

def cross_entropy_ls(logits: Tensor, target, smoothing: float = 0.0) -> Tensor:
    """CE against the smoothed target distribution (1-s on target, s/(C-1) off)."""
    c = logits.shape[-1]
    target = np.atleast_1d(np.asarray(target, dtype=np.int64))
    squeeze = logits.data.ndim == 1
    if squeeze:
        logits = T.reshape(logits, (1, c))
    q = np.full((len(target), c), smoothing / (c - 1), dtype=np.float64)
    q[np.arange(len(target)), target] = 1.0 - smoothing
    logp = T.log_softmax(logits)
    return T.scale(T.tsum(T.mul(logp, Tensor(q.astype(logits.dtype)))),
                   -1.0 / len(target))


def weighted_bce(logits: Tensor, targets, alpha: float = 0.5) -> Tensor:
    """alpha * mean of per-example BCE means + (1-alpha) * mean of per-label means.

    Stable logit-space form: bce(x, t) = softplus(x) - x*t.
    """
    targets = Tensor(np.asarray(targets, dtype=logits.dtype))
    per = T.sub(T.softplus(logits), T.mul(logits, targets))
    by_example = T.tmean(T.tmean(per, axis=1), axis=0)
    by_label = T.tmean(T.tmean(per, axis=0), axis=0)
    return T.add(T.scale(by_example, alpha), T.scale(by_label, 1.0 - alpha))


# ---------------------------------------------------------------------------
# metrics

def _f1(tp: float, fp: float, fn: float) -> float:
    if tp == 0 and fp == 0 and fn == 0:
        return 1.0  # both prediction and target empty
    if 2 * tp + fp + fn == 0:
        return 0.0
    return 2 * tp / (2 * tp + fp + fn)


def metrics_multilabel(pred: np.ndarray, targets: np.ndarray) -> tuple[float, float]:
    """(example-mean F1, label-axis micro F1) from binarized predictions."""
    pred = np.asarray(pred).astype(bool)
    targets = np.asarray(targets).astype(bool)
    if pred.shape != targets.shape:
        raise ConfigError(f"prediction shape {pred.shape} vs targets {targets.shape}")
    tp = (pred & targets).sum(axis=1).astype(float)
    fp = (pred & ~targets).sum(axis=1).astype(float)
    fn = (~pred & targets).sum(axis=1).astype(float)
    ebf = float(np.mean([_f1(a, b, c) for a, b, c in zip(tp, fp, fn)]))
    mif = _f1(tp.sum(), fp.sum(), fn.sum())
    return ebf, mif


def top1_accuracy(logits: np.ndarray, targets: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits, axis=-1) == targets))


# ---------------------------------------------------------------------------
# loops

def _batches(n: int, batch_size: int, rng: np.random.Generator | None):
    order = np.arange(n) if rng is None else rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def evaluate(model: Model, ds: Dataset, multilabel: bool | None = None,
             batch_size: int = 64) -> Metrics:
    if multilabel is None:
        multilabel = ds.spec.multilabel
    outs = []
    with no_grad():
        for idx in _batches(len(ds), batch_size, None):
            cls, _ = model.forward(Tensor(ds.x[idx]))
            outs.append(classify(cls, model).data)
    logits = np.concatenate(outs, axis=0)
    if multilabel:
        pred = 1.0 / (1.0 + np.exp(-logits)) >= 0.5
        ebf, mif = metrics_multilabel(pred, ds.y)
        return Metrics(top1=0.0, ebf=ebf, mif=mif)
    return Metrics(top1=top1_accuracy(logits, ds.y))


def train(model: Model, train_ds: Dataset, cfg: TrainConfig,
          val_ds: Dataset | None = None, out_dir: str | None = None,
          log=None) -> list[dict]:
    """Full training loop; deterministic given cfg.seed. Returns per-epoch history."""
    opt = AdamW(model.params, cfg, decay_mask(model.params))
    rng = np.random.default_rng(cfg.seed)
    n = len(train_ds)
    steps_per_epoch = max(1, math.ceil(n / cfg.batch_size))
    total_steps = cfg.total_epochs * steps_per_epoch
    history: list[dict] = []
    step = 0
    for epoch in range(cfg.total_epochs):
        epoch_loss = 0.0
        for idx in _batches(n, cfg.batch_size, rng):
            GRAPH.clear()
            zero_grads(model.params.values())
            cls, _ = model.forward(Tensor(train_ds.x[idx]))
            logits = classify(cls, model)
            if cfg.loss_kind == "wbce":
                loss = weighted_bce(logits, train_ds.y[idx], cfg.bce_alpha)
            else:
                loss = cross_entropy_ls(logits, train_ds.y[idx], cfg.label_smoothing)
            lval = float(loss.data)
            if not np.isfinite(lval):
                if out_dir:
                    save_model(os.path.join(out_dir, "last_good"), model)
                raise NumericError(f"non-finite loss at epoch {epoch}, step {step}")
            backward(loss)
            lr = cosine_warmup_lr(step / total_steps, cfg)
            opt.step(lr)
            epoch_loss += lval * len(idx)
            step += 1
        GRAPH.clear()
        entry = {"epoch": epoch, "loss": epoch_loss / n}
        if val_ds is not None:
            m = evaluate(model, val_ds)
            entry.update(top1=m.top1, ebf=m.ebf, mif=m.mif)
        history.append(entry)
        if log:
            log(entry)
    if out_dir:
        save_model(os.path.join(out_dir, "checkpoint"), model)
    return history
