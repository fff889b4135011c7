"""Epsilon sweeps with white-box and transfer error rates, perturbation
norms and spectrograms.
"""

from __future__ import annotations

import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.signal import get_window

from .attack import AttackConfig, attack_batch
from .audio import SILENCE, Waveform, _atomic_write

DEFAULT_EPS = (0.0, 0.002, 0.005, 0.01, 0.02, 0.032, 0.05, 0.08)
SNR_CAP_DB = 160.0
REPORT_FORMAT = "wavadv-eval-report"
REPORT_VERSION = 1


@dataclass(frozen=True)
class PerturbationMetrics:
    linf: float
    l2: float
    snr_db: float


def _samples(x) -> np.ndarray:
    return np.asarray(x.samples if isinstance(x, Waveform) else x, dtype=np.float64)


def perturbation_metrics(x, x_adv) -> PerturbationMetrics:
    """Norms of ``x_adv - x`` and the signal-to-perturbation ratio in dB.

    The signal power is measured around the 0.5 silence level.  The ratio is
    capped at +/-160 dB (the cap is hit exactly when the perturbation is zero).
    """
    a, b = _samples(x), _samples(x_adv)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    eta = b - a
    linf = float(np.max(np.abs(eta))) if eta.size else 0.0
    l2 = float(np.linalg.norm(eta))
    noise = float(np.sum(eta * eta))
    sig = float(np.sum((a - SILENCE) ** 2))
    if noise == 0.0:
        snr = SNR_CAP_DB
    elif sig == 0.0:
        snr = -SNR_CAP_DB
    else:
        snr = float(np.clip(10.0 * math.log10(sig / noise), -SNR_CAP_DB, SNR_CAP_DB))
    return PerturbationMetrics(linf, l2, snr)


def spectrogram(w, window_len: int = 512, hop: int = 128) -> np.ndarray:
    """STFT magnitudes with a periodic Hann window, shape (window_len//2 + 1, frames).

    The 0.5 silence offset is removed first so that silence maps to zero.
    """
    x = _samples(w) - SILENCE
    if window_len < 2 or window_len > x.size:
        raise ValueError(f"window_len must be in [2, {x.size}], got {window_len}")
    if hop < 1:
        raise ValueError(f"hop must be >= 1, got {hop}")
    n_frames = 1 + (x.size - window_len) // hop
    idx = np.arange(window_len)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = x[idx] * get_window("hann", window_len)
    return np.abs(np.fft.rfft(frames, axis=1)).T


def save_matrix(matrix: np.ndarray, path) -> None:
    buf = io.BytesIO()
    np.savetxt(buf, matrix, fmt="%.10g", delimiter="\t")
    _atomic_write(path, lambda fh: fh.write(buf.getvalue()))


def save_heatmap(matrix: np.ndarray, path, title: str = "") -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 3.5))
    im = ax.imshow(matrix, origin="lower", aspect="auto", cmap="magma")
    ax.set_xlabel("frame")
    ax.set_ylabel("frequency bin")
    if title:
        ax.set_title(title)
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


@dataclass
class EvalReport:
    """Error rates of several models on adversarial sets crafted on a surrogate.

    ``predictions[model_id][i][j]`` is the predicted class of test example
    ``j`` at ``eps_list[i]``; every error rate can be recomputed from it and
    ``labels``.
    """

    task: str
    eps_list: List[float]
    steps: int
    surrogate_id: str
    target_ids: List[str]
    class_labels: List[str]
    labels: List[int]
    clean_error: Dict[str, float]
    error: Dict[str, List[float]]
    predictions: Dict[str, List[List[int]]]
    mean_linf: List[float]
    mean_l2: List[float]
    mean_snr_db: List[float]
    seed: int = 0
    chance_error: float = field(init=False)

    def __post_init__(self):
        self.chance_error = 1.0 - 1.0 / len(self.class_labels)

    def recomputed_error(self, model_id: str) -> List[float]:
        y = np.asarray(self.labels)
        return [float(np.mean(np.asarray(p) != y)) for p in self.predictions[model_id]]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["format"] = REPORT_FORMAT
        d["version"] = REPORT_VERSION
        return d

    def write(self, path) -> None:
        data = json.dumps(self.to_dict(), indent=1, sort_keys=True).encode("utf-8")
        _atomic_write(path, lambda fh: fh.write(data))

    @classmethod
    def read(cls, path) -> "EvalReport":
        d = json.loads(Path(path).read_text(encoding="utf-8"))
        if d.pop("format", None) != REPORT_FORMAT:
            raise ValueError(f"{path} is not an evaluation report")
        d.pop("version", None)
        d.pop("chance_error", None)
        return cls(**d)


def _model_ids(models) -> List[str]:
    ids, seen = [], {}
    for m in models:
        base = getattr(m, "kind", "model")
        seen[base] = seen.get(base, 0) + 1
        ids.append(base if seen[base] == 1 else f"{base}-{seen[base]}")
    return ids


def epsilon_sweep(
    surrogate,
    targets: Sequence,
    X: np.ndarray,
    y: np.ndarray,
    eps_list: Sequence[float] = DEFAULT_EPS,
    steps: int = 2,
    task: str = "",
    model_ids: Optional[Sequence[str]] = None,
    jobs: int = 1,
    seed: int = 0,
) -> EvalReport:
    """Craft adversarial sets on ``surrogate`` and score every model on them.

    The surrogate is always scored (white-box); ``targets`` measure transfer.
    ``model_ids`` names the surrogate followed by the targets.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.intp)
    if X.shape[0] == 0 or X.shape[0] != y.size:
        raise ValueError("test set must be non-empty with one label per example")
    models = [surrogate, *targets]
    for m in targets:
        if list(m.class_labels) != list(surrogate.class_labels):
            raise ValueError(f"label-space mismatch: {m.class_labels} vs {surrogate.class_labels}")
    ids = list(model_ids) if model_ids is not None else _model_ids(models)
    if len(ids) != len(models) or len(set(ids)) != len(ids):
        raise ValueError("need one distinct id per model (surrogate first)")

    clean = {mid: float(np.mean(m.predict_proba(X).argmax(axis=1) != y)) for mid, m in zip(ids, models)}

    def run(eps):
        b = attack_batch(surrogate, X, y, AttackConfig(epsilon=eps, steps=steps))
        preds = {ids[0]: b.probs_after.argmax(axis=1)}
        for mid, m in zip(ids[1:], targets):
            preds[mid] = m.predict_proba(b.adversarial).argmax(axis=1)
        metrics = [perturbation_metrics(a, o) for a, o in zip(b.original, b.adversarial)]
        return preds, metrics

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run, eps_list))
    else:
        results = [run(e) for e in eps_list]

    predictions = {mid: [r[0][mid].tolist() for r in results] for mid in ids}
    report = EvalReport(
        task=task,
        eps_list=[float(e) for e in eps_list],
        steps=steps,
        surrogate_id=ids[0],
        target_ids=ids[1:],
        class_labels=list(surrogate.class_labels),
        labels=y.tolist(),
        clean_error=clean,
        error={},
        predictions=predictions,
        mean_linf=[float(np.mean([m.linf for m in r[1]])) for r in results],
        mean_l2=[float(np.mean([m.l2 for m in r[1]])) for r in results],
        mean_snr_db=[float(np.mean([m.snr_db for m in r[1]])) for r in results],
        seed=seed,
    )
    report.error = {mid: report.recomputed_error(mid) for mid in ids}
    return report


def plot_report(report: EvalReport, path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for mid, errs in report.error.items():
        style = "-o" if mid == report.surrogate_id else "--s"
        ax.plot(report.eps_list, errs, style, label=mid)
    ax.axhline(report.chance_error, color="grey", lw=0.8, ls=":", label="random guess")
    ax.set_xlabel("perturbation factor (per step)")
    ax.set_ylabel("error rate")
    ax.set_ylim(0, 1)
    ax.set_title(report.task)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
