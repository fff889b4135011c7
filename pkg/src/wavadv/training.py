"""Adam training with plateau learning-rate decay and a log-scale learning-rate search."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from .audio import DatasetManifest
from .autograd import NonFiniteError
from .nets import Model

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, message: str, history: "TrainHistory"):
        super().__init__(message)
        self.history = history


@dataclass
class TrainConfig:
    lr: Optional[float] = None  # None: run lr_search first
    lr_range: Tuple[float, float] = (1e-5, 1e-2)
    max_epochs: int = 200
    batch_size: int = 100
    lr_decay: float = 0.1
    patience: int = 10
    min_lr: float = 1e-7
    search_budget: int = 5
    probe_epochs: int = 2
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.lr_range
        if not 0 < lo < hi:
            raise ValueError(f"lr_range must satisfy 0 < low < high, got {self.lr_range}")
        if self.batch_size < 1 or self.search_budget < 1 or self.max_epochs < 0:
            raise ValueError("batch_size and search_budget must be >= 1, max_epochs >= 0")


@dataclass
class TrainHistory:
    """Per-epoch curves; entry 0 describes the untrained model."""

    train_loss: List[float] = field(default_factory=list)
    val_loss: List[float] = field(default_factory=list)
    val_accuracy: List[float] = field(default_factory=list)
    lr: List[float] = field(default_factory=list)
    chosen_lr: float = float("nan")
    best_epoch: int = 0
    stop_epoch: int = 0

    @property
    def best_val_loss(self) -> float:
        return self.val_loss[self.best_epoch]


class Adam:
    def __init__(self, params: Dict[str, np.ndarray], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]) -> None:
        """Update ``params`` in place."""
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for k in sorted(params):
            g = grads[k]
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params[k] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _loss_and_accuracy(model: Model, X: np.ndarray, y: np.ndarray) -> Tuple[float, float]:
    probs = model.predict_proba(X)
    loss = float(-np.mean(np.log(np.maximum(probs[np.arange(y.size), y], 1e-300))))
    acc = float(np.mean(probs.argmax(axis=1) == y))
    return loss, acc


def _check_compatible(model: Model, manifest: DatasetManifest) -> None:
    if manifest.n_samples != model.input_length or manifest.sample_rate != model.config.sample_rate:
        raise ValueError(
            f"model expects {model.input_length} samples at {model.config.sample_rate} Hz; "
            f"data is {manifest.n_samples} samples at {manifest.sample_rate} Hz"
        )
    if list(manifest.class_labels) != list(model.class_labels):
        raise ValueError(f"label mismatch: model {model.class_labels} vs data {manifest.class_labels}")


def train(
    model: Model,
    manifest: DatasetManifest,
    cfg: TrainConfig,
    log_path=None,
) -> Tuple[Model, TrainHistory]:
    """Train a copy of ``model`` on the manifest's train split.

    Returns the snapshot with the lowest validation loss (epoch 0, the
    untrained model, is a candidate).  Only the ``train`` and ``val`` splits
    are read.
    """
    _check_compatible(model, manifest)
    lr = cfg.lr
    if lr is None:
        lr = lr_search(lambda: model, manifest, cfg)
    X, y = manifest.load("train")
    Xv, yv = manifest.load("val")
    return _fit(model, X, y, Xv, yv, cfg, lr, cfg.max_epochs, log_path)


def _fit(model, X, y, Xv, yv, cfg: TrainConfig, lr: float, epochs: int, log_path=None):
    params = {k: v.copy() for k, v in model.params.items()}
    opt = Adam(params, lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    rng = np.random.default_rng([cfg.seed, 17])
    history = TrainHistory(chosen_lr=lr)
    logf = open(log_path, "a", encoding="utf-8") if log_path else None

    def record(epoch, train_loss, current):
        vl, va = _loss_and_accuracy(current, Xv, yv)
        history.train_loss.append(train_loss)
        history.val_loss.append(vl)
        history.val_accuracy.append(va)
        history.lr.append(opt.lr)
        line = f"epoch={epoch} train_loss={train_loss:.6f} val_loss={vl:.6f} val_acc={va:.4f} lr={opt.lr:.3g}"
        log.info(line)
        if logf:
            logf.write(line + "\n")
            logf.flush()
        return vl

    try:
        tl0, _ = _loss_and_accuracy(model, X, y)
        best_loss = record(0, tl0, model)
        best = {k: v.copy() for k, v in params.items()}
        since_best = 0
        for epoch in range(1, epochs + 1):
            order = rng.permutation(y.size)
            total = 0.0
            for lo in range(0, y.size, cfg.batch_size):
                idx = order[lo : lo + cfg.batch_size]
                try:
                    loss, grads = model.with_params(params).loss_and_param_grad(X[idx], y[idx])
                except NonFiniteError as exc:
                    raise DivergenceError(f"epoch {epoch}: {exc}", history) from exc
                if not math.isfinite(loss):
                    raise DivergenceError(f"epoch {epoch}: loss is {loss}", history)
                total += loss * idx.size
                opt.step(params, grads)
            current = model.with_params(params)
            vl = record(epoch, total / y.size, current)
            if not math.isfinite(vl):
                raise DivergenceError(f"epoch {epoch}: validation loss is {vl}", history)
            history.stop_epoch = epoch
            if vl < best_loss:
                best_loss, since_best = vl, 0
                best = {k: v.copy() for k, v in params.items()}
                history.best_epoch = epoch
            else:
                since_best += 1
                if since_best >= cfg.patience:
                    opt.lr *= cfg.lr_decay
                    since_best = 0
                    if opt.lr < cfg.min_lr:
                        break
    finally:
        if logf:
            logf.close()
    return model.with_params(best), history


def lr_search(
    model_builder: Callable[[], Model],
    manifest: DatasetManifest,
    cfg: TrainConfig,
    probe_log: Optional[Dict[float, float]] = None,
) -> float:
    """Binary search for the initial learning rate on a log scale.

    Both ends of ``cfg.lr_range`` and its geometric midpoint are probed with a
    short training run; the interval is then halved toward the end with the
    lower validation loss and the new midpoint probed, until
    ``cfg.search_budget`` probes are spent.  The probed rate with the lowest
    validation loss is returned.  With fewer than three probes available the
    midpoint is returned unprobed.
    """
    lo, hi = (math.log10(v) for v in cfg.lr_range)
    if cfg.search_budget < 3:
        return 10 ** ((lo + hi) / 2)
    X, y = manifest.load("train")
    Xv, yv = manifest.load("val")
    losses: Dict[float, float] = {} if probe_log is None else probe_log

    def probe(log_lr):
        lr = 10**log_lr
        if lr not in losses:
            try:
                _, hist = _fit(model_builder(), X, y, Xv, yv, cfg, lr, cfg.probe_epochs)
                losses[lr] = hist.val_loss[-1]
            except DivergenceError:
                losses[lr] = math.inf
            log.info("lr probe %.3g -> val loss %.6f", lr, losses[lr])
        return losses[lr]

    budget = cfg.search_budget
    a, b = lo, hi
    la, lb = probe(a), probe(b)
    probe((a + b) / 2)
    budget -= 3
    while budget > 0:
        mid = (a + b) / 2
        if la <= lb:
            b, lb = mid, losses[10**mid]
        else:
            a, la = mid, losses[10**mid]
        probe((a + b) / 2)
        budget -= 1
    finite = {k: v for k, v in losses.items() if math.isfinite(v)}
    if not finite:
        raise DivergenceError(f"every learning-rate probe diverged: {losses}", TrainHistory())
    return min(sorted(finite), key=lambda k: finite[k])


def evaluate_accuracy(model: Model, manifest: DatasetManifest, split: str) -> float:
    """Fraction of argmax-correct predictions on one split."""
    if not manifest.splits.get(split):
        raise ValueError(f"split {split!r} is empty")
    X, y = manifest.load(split)
    return float(np.mean(model.predict_proba(X).argmax(axis=1) == y))
