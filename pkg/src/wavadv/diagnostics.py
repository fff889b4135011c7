"""Input-gradient profiles and the vanishing-gradient contrast between
recurrent and convolutional back-ends.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict

import numpy as np

from . import autograd as ag
from .audio import _atomic_write
from .autograd import Graph


class UndefinedRatioError(ValueError):
    pass


@dataclass
class GradientProfile:
    """Per-sample magnitudes |dJ/dx_i| of one loss evaluation."""

    magnitudes: np.ndarray
    sample_rate: float
    model_kind: str
    meta: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        self.magnitudes = np.asarray(self.magnitudes, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(self.magnitudes)) or np.any(self.magnitudes < 0):
            raise ValueError("gradient magnitudes must be finite and non-negative")

    def __len__(self) -> int:
        return self.magnitudes.size


def input_gradient_profile(model, x, y) -> GradientProfile:
    """Unsmoothed |dJ/dx| for one waveform."""
    samples = getattr(x, "samples", x)
    _, g = model.loss_and_input_grad_batch(np.asarray(samples, dtype=np.float64)[None, :], [y])
    config = getattr(model, "config", None)
    return GradientProfile(np.abs(g[0]), getattr(config, "sample_rate", 1), getattr(model, "kind", "model"))


def _window(n: int, frac: float) -> int:
    return max(1, int(round(frac * n)))


def vanishing_ratio(profile: GradientProfile, head_frac: float = 0.1, tail_frac: float = 0.1) -> float:
    """mean(head magnitudes) / mean(tail magnitudes); small means vanishing."""
    if not (head_frac > 0 and tail_frac > 0):
        raise ValueError("head_frac and tail_frac must be positive")
    m = profile.magnitudes
    n = m.size
    h, t = _window(n, head_frac), _window(n, tail_frac)
    if h + t > n:
        raise ValueError(f"head ({h}) and tail ({t}) windows overlap in a profile of length {n}")
    tail = float(np.mean(m[n - t :]))
    if tail == 0.0:
        raise UndefinedRatioError("tail mean is zero; ratio undefined")
    return float(np.mean(m[:h])) / tail


def contraction_rnn_demo(
    n_steps: int,
    spectral_norm: float,
    seed: int = 0,
    hidden: int = 16,
    input_scale: float = 0.5,
) -> GradientProfile:
    """Gradient profile of a one-layer tanh RNN with a contracting recurrence.

    ``s_t = tanh(U x_t + W s_{t-1})`` with scalar inputs, ``W`` rescaled to the
    given spectral norm and the loss ``J = v . s_n``.  Since tanh' <= 1,
    ``|dJ/dx_i| <= |v| |U| s**(n-i)``; that constant is stored in
    ``meta["bound_constant"]``.
    """
    if n_steps < 2:
        raise ValueError("need at least two steps")
    if spectral_norm < 0:
        raise ValueError("spectral_norm must be non-negative")
    rng = np.random.default_rng(seed)
    W = rng.standard_normal((hidden, hidden))
    W *= spectral_norm / np.linalg.norm(W, 2)
    U = rng.standard_normal((1, hidden))
    v = rng.standard_normal((hidden, 1))
    x = rng.uniform(-input_scale, input_scale, size=n_steps)

    def fn(x, U, WT, v):
        s = None
        for t in range(n_steps):
            pre = ag.take(x, t, axis=0) * U
            if s is not None:
                pre = pre + ag.matmul(s, WT)
            s = ag.tanh(pre)
        return ag.matmul(s, v)

    g = Graph(fn, grad_inputs=["x"])
    g.forward({"x": x, "U": U, "WT": W.T, "v": v})
    grad = g.backward()["x"]
    K = float(np.linalg.norm(U) * np.linalg.norm(v))
    return GradientProfile(
        np.abs(grad),
        1.0,
        "tanh-RNN",
        meta={"bound_constant": K, "spectral_norm": float(spectral_norm)},
    )


def contraction_bound(profile: GradientProfile) -> np.ndarray:
    """Per-step upper bound ``K * s**(n-i)`` for a :func:`contraction_rnn_demo` profile."""
    n = len(profile)
    s = profile.meta["spectral_norm"]
    return profile.meta["bound_constant"] * s ** (n - 1 - np.arange(n))


def save_profile(profile: GradientProfile, path) -> None:
    """Two-column text: sample index, magnitude."""
    lines = [f"# model_kind={profile.model_kind} sample_rate={profile.sample_rate}"]
    lines += [f"{i}\t{m:.17g}" for i, m in enumerate(profile.magnitudes)]
    data = ("\n".join(lines) + "\n").encode("utf-8")
    _atomic_write(path, lambda fh: fh.write(data))


def load_profile(path) -> GradientProfile:
    text = Path(path).read_text(encoding="utf-8").splitlines()
    meta = dict(kv.split("=", 1) for kv in text[0].lstrip("# ").split())
    values = np.loadtxt(text[1:], ndmin=2)
    return GradientProfile(values[:, 1], float(meta["sample_rate"]), meta["model_kind"])
