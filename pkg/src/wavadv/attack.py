"""Untargeted fast-gradient-sign attacks on raw waveforms."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .audio import Waveform


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float
    steps: int = 1
    clip_min: float = 0.0
    clip_max: float = 1.0
    ball: Optional[float] = None  # total L-inf budget, default steps * epsilon

    def __post_init__(self):
        if not self.epsilon >= 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not self.clip_min < self.clip_max:
            raise ValueError("clip_min must be below clip_max")
        if self.ball is not None and self.ball < self.epsilon:
            raise ValueError("ball must be at least epsilon")

    @property
    def radius(self) -> float:
        return self.steps * self.epsilon if self.ball is None else self.ball


@dataclass
class AdversarialResult:
    original: Waveform
    eta: np.ndarray
    adversarial: Waveform
    pred_before: np.ndarray
    pred_after: np.ndarray
    loss_before: float
    loss_after: float
    null_gradient: bool = False

    @property
    def linf(self) -> float:
        return float(np.max(np.abs(self.eta))) if self.eta.size else 0.0

    @property
    def l2(self) -> float:
        return float(np.linalg.norm(self.eta))

    @property
    def label_before(self) -> int:
        return int(np.argmax(self.pred_before))

    @property
    def label_after(self) -> int:
        return int(np.argmax(self.pred_after))


@dataclass
class BatchAttack:
    """Arrays for a batch of attacked examples (one row per example)."""

    original: np.ndarray
    eta: np.ndarray
    adversarial: np.ndarray
    labels: np.ndarray
    probs_before: np.ndarray
    probs_after: np.ndarray
    loss_before: np.ndarray
    loss_after: np.ndarray
    null_gradient: np.ndarray


def _probs_and_losses(model, X, y):
    logp = model.log_proba(X)
    return np.exp(logp), -logp[np.arange(len(y)), y]


def _project(X, eta, cfg: AttackConfig):
    """``clip(X + eta)``, keeping the measured ``|adv - X|`` inside the ball.

    Rounding in ``X + eta`` can land one ulp outside the ball; for such
    samples ``eta`` is shrunk toward zero an ulp at a time, so
    ``adv == clip(X + eta)`` holds exactly and ``|eta|`` never grows.
    """
    eta = np.array(eta, dtype=np.float64)
    adv = np.clip(X + eta, cfg.clip_min, cfg.clip_max)
    over = np.abs(adv - X) > cfg.radius
    while over.any():
        eta[over] = np.nextafter(eta[over], 0.0)
        adv[over] = np.clip(X[over] + eta[over], cfg.clip_min, cfg.clip_max)
        over = np.abs(adv - X) > cfg.radius
    return adv, eta


def attack_batch(model, X, y, cfg: AttackConfig) -> BatchAttack:
    """Iterative FGSM on every row of ``X``; ``steps == 1`` is plain FGSM.

    Each step takes the loss gradient at the current adversarial point, adds
    ``epsilon * sign(gradient)`` (sign(0) = 0), then projects onto the L-inf
    ball of radius ``cfg.radius`` around the original and onto
    ``[clip_min, clip_max]``.  Only the ground-truth label ``y`` is used.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.array([model.label_index(v) for v in np.atleast_1d(y)], dtype=np.intp)
    probs_before = model.predict_proba(X)
    adv = X
    eta = np.zeros_like(X)
    loss_before = null = None
    for step in range(cfg.steps):
        loss, g = model.loss_and_input_grad_batch(adv, y)
        if step == 0:
            loss_before = loss
            null = ~np.any(g != 0, axis=1)
        # adv - X is exactly zero on the first step, so one step is plain FGSM
        eta = np.clip((adv - X) + cfg.epsilon * np.sign(g), -cfg.radius, cfg.radius)
        adv, eta = _project(X, eta, cfg)
    probs_after, loss_after = _probs_and_losses(model, adv, y)
    return BatchAttack(X, eta, adv, y, probs_before, probs_after, loss_before, loss_after, null)


def _as_samples(model, x):
    if isinstance(x, Waveform):
        return x
    return Waveform(np.asarray(x, dtype=np.float64), model_rate(model))


def model_rate(model) -> int:
    config = getattr(model, "config", None)
    return getattr(config, "sample_rate", 1)


def _single(model, x, y, cfg: AttackConfig) -> AdversarialResult:
    w = _as_samples(model, x)
    b = attack_batch(model, w.samples[None, :], [y], cfg)
    return AdversarialResult(
        original=w,
        eta=b.eta[0],
        adversarial=Waveform(b.adversarial[0], w.sample_rate, w.source_id),
        pred_before=b.probs_before[0],
        pred_after=b.probs_after[0],
        loss_before=float(b.loss_before[0]),
        loss_after=float(b.loss_after[0]),
        null_gradient=bool(b.null_gradient[0]),
    )


def fgsm(model, x: Union[Waveform, np.ndarray], y, cfg: AttackConfig) -> AdversarialResult:
    """One step: ``eta = epsilon * sign(dJ/dx)``, adversarial clipped to range."""
    if cfg.steps != 1:
        raise ValueError("fgsm takes steps == 1; use iterative_fgsm for more")
    return _single(model, x, y, cfg)


def iterative_fgsm(model, x: Union[Waveform, np.ndarray], y, cfg: AttackConfig) -> AdversarialResult:
    return _single(model, x, y, cfg)


@dataclass(frozen=True)
class AccumulationReport:
    delta_activation: float
    m: float
    n: int
    epsilon: float

    @property
    def predicted(self) -> float:
        return self.epsilon * self.m * self.n

    @property
    def consistent(self) -> bool:
        return math.isclose(self.delta_activation, self.predicted, rel_tol=1e-12, abs_tol=1e-300)


def accumulation_effect(w, epsilon: float) -> AccumulationReport:
    """Activation change of a linear unit under ``eta = epsilon * sign(w)``.

    The inner product is summed with :func:`math.fsum`, so it is the
    correctly rounded value of ``epsilon * sum|w_i|``.
    """
    w = np.asarray(w, dtype=np.float64).reshape(-1)
    n = w.size
    total = math.fsum(w * np.sign(w))
    m = total / n if n else 0.0
    return AccumulationReport(epsilon * total, m, n, epsilon)
