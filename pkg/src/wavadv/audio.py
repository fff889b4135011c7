"""Waveform container, 16-bit WAV I/O, clip preprocessing and synthetic proxy datasets.

Audio lives in the [0, 1] range through a fixed mapping of signed 16-bit PCM:
``v -> (v + 32768) / 65535``.  Digital silence therefore sits at 32768/65535,
which is 0.5 to within 1e-5; padding and the synthetic generators use 0.5.
"""

from __future__ import annotations

import itertools
import os
import tempfile
import wave
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import signal
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import maximum_flow

SILENCE = 0.5
PCM_SCALE = 65535.0
PCM_OFFSET = 32768.0

TASKS: Dict[str, List[str]] = {
    "gender_proxy": ["low", "high"],
    "emotion_proxy": ["slow", "fast"],
    "speaker_proxy": ["spk0", "spk1", "spk2", "spk3"],
}
_TASK_IDS = {name: i for i, name in enumerate(TASKS)}

# Defining bands of the synthetic tasks (Hz).
GENDER_F0 = {"low": (90.0, 150.0), "high": (190.0, 260.0)}
EMOTION_RATE = {"slow": (2.0, 4.0), "fast": (8.0, 12.0)}
BURST_SECONDS = 0.05
SPEAKER_FORMANTS = {
    "spk0": (350.0, 1800.0),
    "spk1": (700.0, 2300.0),
    "spk2": (1050.0, 2800.0),
    "spk3": (1400.0, 3300.0),
}
SNR_DB = 20.0

SPLITS = ("train", "val", "test")
MANIFEST_MAGIC = "# wavadv-manifest 1"


class UnsupportedFormatError(ValueError):
    """WAV file is not mono 16-bit PCM."""

    def __init__(self, field_name: str, value):
        super().__init__(f"unsupported WAV {field_name}: {value!r} (need mono 16-bit PCM)")
        self.field = field_name


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int
    source_id: str = ""

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if self.samples.size and (self.samples.min() < 0.0 or self.samples.max() > 1.0):
            raise ValueError("waveform samples must lie in [0, 1]")

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


def _atomic_write(path, write) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            write(fh)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def pcm_to_unit(values: np.ndarray) -> np.ndarray:
    return (np.asarray(values, dtype=np.float64) + PCM_OFFSET) / PCM_SCALE


def unit_to_pcm(samples: np.ndarray) -> np.ndarray:
    v = np.rint(np.asarray(samples, dtype=np.float64) * PCM_SCALE - PCM_OFFSET)
    return np.clip(v, -32768, 32767).astype("<i2")


def load_wav(path) -> Waveform:
    try:
        with wave.open(str(path), "rb") as wf:
            if wf.getcomptype() != "NONE":
                raise UnsupportedFormatError("compression", wf.getcomptype())
            if wf.getnchannels() != 1:
                raise UnsupportedFormatError("channels", wf.getnchannels())
            if wf.getsampwidth() != 2:
                raise UnsupportedFormatError("sample width", wf.getsampwidth() * 8)
            rate = wf.getframerate()
            raw = wf.readframes(wf.getnframes())
    except wave.Error as exc:
        raise UnsupportedFormatError("format", str(exc)) from None
    values = np.frombuffer(raw, dtype="<i2")
    return Waveform(pcm_to_unit(values), rate, source_id=str(path))


def save_wav(w: Waveform, path) -> None:
    pcm = unit_to_pcm(w.samples)

    def write(fh):
        with wave.open(fh, "wb") as wf:
            wf.setnchannels(1)
            wf.setsampwidth(2)
            wf.setframerate(int(w.sample_rate))
            wf.writeframes(pcm.tobytes())

    _atomic_write(path, write)


def clip_length(clip_seconds: float, sample_rate: int) -> int:
    n = clip_seconds * sample_rate
    if abs(n - round(n)) > 1e-6:
        raise ValueError(f"{clip_seconds} s at {sample_rate} Hz is not a whole number of samples")
    return int(round(n))


def preprocess(w: Waveform, clip_seconds: float, target_rate: int) -> Waveform:
    """Pad with silence at the end, or keep the first ``clip_seconds``."""
    if w.sample_rate != target_rate:
        raise ValueError(
            f"sample rate {w.sample_rate} Hz != {target_rate} Hz; resample before preprocessing"
        )
    n = clip_length(clip_seconds, target_rate)
    if w.samples.size >= n:
        out = w.samples[:n].copy()
    else:
        out = np.full(n, SILENCE)
        out[: w.samples.size] = w.samples
    return Waveform(out, target_rate, w.source_id)


# ---------------------------------------------------------------------------
# synthetic proxy tasks


def _harmonic_tone(t, f0, sample_rate, rng, rolloff=1.0, fmax=2500.0):
    nyq = 0.45 * sample_rate
    out = np.zeros_like(t)
    h = 1
    while h * f0 < min(nyq, fmax):
        out += np.sin(2 * np.pi * h * f0 * t + rng.uniform(0, 2 * np.pi)) / h**rolloff
        h += 1
    return out


def _burst_envelope(t, rate, offset, burst, ramp=0.005):
    """1 during the first ``burst`` seconds of each 1/rate cycle, else 0, with linear ramps."""
    pos = ((rate * t + offset) % 1.0) / rate
    up = np.clip(pos / ramp, 0.0, 1.0)
    down = np.clip((burst - pos) / ramp, 0.0, 1.0)
    return np.minimum(up, down)


def _resonator(x, freq, bandwidth, sample_rate):
    r = np.exp(-np.pi * bandwidth / sample_rate)
    theta = 2 * np.pi * freq / sample_rate
    a = [1.0, -2 * r * np.cos(theta), r * r]
    return signal.lfilter([1.0 - r], a, x)


def synth_waveform(task: str, label: str, seed: int, index: int, sample_rate: int, n: int) -> np.ndarray:
    """One deterministic example of ``task`` with class ``label``.

    The generator stream depends only on (seed, task, index), so any entry of
    a synthetic manifest can be regenerated on its own.
    """
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}; expected one of {sorted(TASKS)}")
    if label not in TASKS[task]:
        raise ValueError(f"label {label!r} not in {TASKS[task]}")
    rng = np.random.default_rng([seed, _TASK_IDS[task], index])
    t = np.arange(n) / sample_rate

    if task == "gender_proxy":
        lo, hi = GENDER_F0[label]
        s = _harmonic_tone(t, rng.uniform(lo, hi), sample_rate, rng)
    elif task == "emotion_proxy":
        lo, hi = EMOTION_RATE[label]
        carrier = _harmonic_tone(t, rng.uniform(150.0, 200.0), sample_rate, rng, rolloff=1.5)
        # fixed-length syllable bursts repeating at the class rate
        env = _burst_envelope(t, rng.uniform(lo, hi), rng.uniform(), BURST_SECONDS)
        s = carrier * env
    else:
        # flat harmonic excitation shared by all speakers, coloured by two resonances
        excitation = _harmonic_tone(t, rng.uniform(100.0, 180.0), sample_rate, rng, rolloff=0.0, fmax=np.inf)
        f1, f2 = SPEAKER_FORMANTS[label]
        jitter = rng.uniform(0.97, 1.03, size=2)
        s = _resonator(excitation, f1 * jitter[0], 80.0, sample_rate)
        s = s + _resonator(excitation, f2 * jitter[1], 120.0, sample_rate)

    peak = np.max(np.abs(s))
    # a clip shorter than the gap between bursts can be silent
    s = s / peak * rng.uniform(0.15, 0.3) if peak > 0 else s
    rms = np.sqrt(np.mean(s * s))
    noise = rng.standard_normal(n) * rms / 10 ** (SNR_DB / 20)
    return np.clip(SILENCE + s + noise, 0.0, 1.0)


@dataclass
class ManifestEntry:
    source: str
    label: str


@dataclass
class DatasetManifest:
    """Labelled examples plus their train/val/test assignment.

    ``source`` is either a WAV path (relative to ``root``) or a
    ``synth:<task>:<seed>:<index>`` generator spec.
    """

    task: str
    entries: List[ManifestEntry]
    seed: int
    sample_rate: int
    clip_seconds: float
    class_labels: List[str]
    splits: Dict[str, List[int]] = field(default_factory=dict)
    root: Optional[Path] = None
    _cache: Dict[int, np.ndarray] = field(default_factory=dict, repr=False, compare=False)

    @property
    def n_samples(self) -> int:
        return clip_length(self.clip_seconds, self.sample_rate)

    def label_index(self, label: str) -> int:
        return self.class_labels.index(label)

    def waveform(self, i: int) -> Waveform:
        entry = self.entries[i]
        if i not in self._cache:
            if entry.source.startswith("synth:"):
                _, task, seed, index = entry.source.split(":")
                x = synth_waveform(task, entry.label, int(seed), int(index), self.sample_rate, self.n_samples)
            else:
                path = Path(entry.source)
                if not path.is_absolute() and self.root is not None:
                    path = self.root / path
                x = preprocess(load_wav(path), self.clip_seconds, self.sample_rate).samples
            self._cache[i] = x
        return Waveform(self._cache[i], self.sample_rate, entry.source)

    def load(self, split: str) -> Tuple[np.ndarray, np.ndarray]:
        """Stacked samples ``(N, n)`` and integer labels ``(N,)`` of one split."""
        ids = self.splits.get(split)
        if not ids:
            raise ValueError(f"split {split!r} is empty or missing")
        X = np.stack([self.waveform(i).samples for i in ids])
        y = np.array([self.label_index(self.entries[i].label) for i in ids], dtype=np.intp)
        return X, y

    def write(self, path) -> None:
        split_of = {i: s for s, ids in self.splits.items() for i in ids}
        lines = [
            MANIFEST_MAGIC,
            f"# task={self.task}",
            f"# seed={self.seed}",
            f"# sample_rate={self.sample_rate}",
            f"# clip_seconds={self.clip_seconds!r}",
            f"# labels={','.join(self.class_labels)}",
            "source\tlabel\tsplit",
        ]
        for i, e in enumerate(self.entries):
            lines.append(f"{e.source}\t{e.label}\t{split_of.get(i, '-')}")
        data = ("\n".join(lines) + "\n").encode("utf-8")
        _atomic_write(path, lambda fh: fh.write(data))

    @classmethod
    def read(cls, path) -> "DatasetManifest":
        path = Path(path)
        text = path.read_text(encoding="utf-8").splitlines()
        if not text or text[0].strip() != MANIFEST_MAGIC:
            raise ValueError(f"{path} is not a wavadv manifest")
        meta = {}
        body = []
        for line in text[1:]:
            if line.startswith("#"):
                key, _, value = line[1:].strip().partition("=")
                meta[key] = value
            elif line and line != "source\tlabel\tsplit":
                body.append(line.split("\t"))
        entries, splits = [], {s: [] for s in SPLITS}
        for i, (source, label, split_name) in enumerate(body):
            entries.append(ManifestEntry(source, label))
            if split_name in splits:
                splits[split_name].append(i)
        return cls(
            task=meta["task"],
            entries=entries,
            seed=int(meta["seed"]),
            sample_rate=int(meta["sample_rate"]),
            clip_seconds=float(meta["clip_seconds"]),
            class_labels=meta["labels"].split(","),
            splits={k: v for k, v in splits.items() if v},
            root=path.parent,
        )


def synth_dataset(
    task: str,
    n_per_class: int,
    seed: int,
    sample_rate: int = 8000,
    clip_seconds: float = 1.2,
) -> DatasetManifest:
    """Class-balanced synthetic manifest (unsplit); waveforms are generated lazily."""
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}; expected one of {sorted(TASKS)}")
    if n_per_class < 1:
        raise ValueError("n_per_class must be at least 1")
    labels = TASKS[task]
    entries = []
    for c, label in enumerate(labels):
        for j in range(n_per_class):
            index = c * n_per_class + j
            entries.append(ManifestEntry(f"synth:{task}:{seed}:{index}", label))
    return DatasetManifest(task, entries, seed, sample_rate, clip_seconds, list(labels))


def _controlled_rounding(sizes: Sequence[int], fractions: Sequence[float]) -> np.ndarray:
    """Integer class-by-split counts with every cell and every column total
    equal to the floor or ceiling of its proportional share, rows summing to
    the class sizes.

    Solved as a max flow: each class distributes the units left after
    flooring, at most one per split, into splits with a fixed target total.
    """
    share = np.outer(sizes, fractions)
    floors = np.floor(share + 1e-9).astype(int)
    has_frac = share - floors > 1e-9
    n, k, m = int(np.sum(sizes)), len(sizes), len(fractions)
    totals = share.sum(axis=0)
    lo, hi = np.floor(totals + 1e-9).astype(int), np.ceil(totals - 1e-9).astype(int)
    candidates = [t for t in itertools.product(*[sorted({a, b}) for a, b in zip(lo, hi)]) if sum(t) == n]
    candidates.sort(key=lambda t: float(np.sum(np.abs(np.array(t) - totals))))

    source, sink = 0, k + m + 1
    left = np.asarray(sizes) - floors.sum(axis=1)
    for target in candidates:
        col_cap = np.array(target) - floors.sum(axis=0)
        if np.any(col_cap < 0):
            continue
        cap = np.zeros((sink + 1, sink + 1), dtype=np.int32)
        cap[source, 1 : k + 1] = left
        cap[1 : k + 1, k + 1 : k + m + 1] = has_frac
        cap[k + 1 : k + m + 1, sink] = col_cap
        flow = maximum_flow(csr_matrix(cap), source, sink)
        if flow.flow_value == left.sum():
            extra = flow.flow.toarray()[1 : k + 1, k + 1 : k + m + 1]
            return floors + np.maximum(extra, 0)
    raise RuntimeError("no controlled rounding found")  # unreachable for valid fractions


def split(
    manifest: DatasetManifest,
    fractions: Sequence[float] = (0.75, 0.05, 0.20),
    seed: int = 0,
) -> DatasetManifest:
    """Stratified hold-out split.

    Per-class split sizes come from a controlled rounding of the
    class-by-split share table, so every class lands within one example of
    its proportional share in each split and every split total is within one
    of its global share.  Members are assigned after a seeded shuffle.
    """
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ValueError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    by_class: Dict[str, List[int]] = {}
    for i, e in enumerate(manifest.entries):
        by_class.setdefault(e.label, []).append(i)
    for label, ids in by_class.items():
        if len(ids) < 3:
            raise ValueError(f"class {label!r} has {len(ids)} examples; need at least 3 to split")

    labels = sorted(by_class, key=manifest.class_labels.index)
    counts = _controlled_rounding([len(by_class[c]) for c in labels], fractions)
    rng = np.random.default_rng(seed)
    splits: Dict[str, List[int]] = {"train": [], "val": [], "test": []}
    for label, row in zip(labels, counts):
        ids = np.array(by_class[label])
        ids = ids[rng.permutation(ids.size)]
        cuts = np.cumsum(row)
        for name, a, b in zip(splits, np.r_[0, cuts[:-1]], cuts):
            splits[name].extend(int(i) for i in ids[a:b])
    splits = {name: sorted(v) for name, v in splits.items()}
    return DatasetManifest(
        manifest.task,
        list(manifest.entries),
        manifest.seed,
        manifest.sample_rate,
        manifest.clip_seconds,
        list(manifest.class_labels),
        splits,
        manifest.root,
    )
