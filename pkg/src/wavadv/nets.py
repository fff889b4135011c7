"""WaveCNN and WaveRNN: a shared frame-wise convolutional front-end with a
convolutional or LSTM back-end, built on :mod:`wavadv.autograd`.
"""

from __future__ import annotations

import io
import json
import math
import zipfile
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import autograd as ag
from .audio import Waveform, _atomic_write
from .autograd import Graph, Tensor

CHECKPOINT_FORMAT = "wavadv-checkpoint"
CHECKPOINT_VERSION = 1

# Examples per graph when a batch is pushed through a model in pieces.
EVAL_CHUNK = 16


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    sample_rate: int = 8000
    clip_seconds: float = 1.2
    frame_ms: float = 40.0
    frontend_blocks: int = 4
    backend_blocks: int = 3
    conv_features: int = 16
    kernel_len: int = 20
    pool: int = 2
    rnn_units: int = 64
    fc_units: int = 64
    num_classes: int = 2
    activation: str = "tanh"

    @classmethod
    def full_size(cls, num_classes: int = 2) -> "ModelConfig":
        """Full-size network: 16 kHz, 6 s clips, 8 + 6 blocks of 32 features, 40-tap kernels."""
        return cls(
            sample_rate=16000,
            clip_seconds=6.0,
            frontend_blocks=8,
            backend_blocks=6,
            conv_features=32,
            kernel_len=40,
            num_classes=num_classes,
        )

    @property
    def n_samples(self) -> int:
        n = self.clip_seconds * self.sample_rate
        if abs(n - round(n)) > 1e-6:
            raise ConfigError(f"clip of {self.clip_seconds} s is not a whole number of samples")
        return int(round(n))

    @property
    def frame_len(self) -> int:
        f = self.frame_ms * self.sample_rate / 1000.0
        if abs(f - round(f)) > 1e-6:
            raise ConfigError(f"{self.frame_ms} ms frames are not a whole number of samples")
        return int(round(f))

    @property
    def n_frames(self) -> int:
        if self.n_samples % self.frame_len:
            raise ConfigError(
                f"clip length {self.n_samples} is not divisible by frame length {self.frame_len}"
            )
        return self.n_samples // self.frame_len

    def frontend_lengths(self) -> List[int]:
        """Per-frame feature length after each front-end block."""
        lengths, n = [], self.frame_len
        for i in range(self.frontend_blocks):
            n //= self.pool
            if n < 1:
                raise ConfigError(f"front-end block {i} reduces the frame to zero length")
            lengths.append(n)
        return lengths

    def backend_lengths(self) -> List[int]:
        fe = self.frontend_lengths()
        n = self.n_frames * (fe[-1] if fe else self.frame_len)
        lengths = []
        for i in range(self.backend_blocks):
            n //= self.pool
            if n < 1:
                raise ConfigError(f"back-end block {i} reduces the sequence to zero length")
            lengths.append(n)
        return lengths

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ConfigError("need at least two classes")
        if self.activation not in _ACTIVATIONS:
            raise ConfigError(f"activation must be one of {sorted(_ACTIVATIONS)}")
        self.n_frames
        self.backend_lengths()


_ACTIVATIONS = {"tanh": ag.tanh, "relu": ag.relu}


def frame(x: Union[Waveform, np.ndarray], frame_len: int) -> np.ndarray:
    """Split a waveform into consecutive non-overlapping frames."""
    samples = x.samples if isinstance(x, Waveform) else np.asarray(x, dtype=np.float64)
    if samples.ndim != 1:
        raise ValueError("frame expects a 1-D waveform")
    if samples.size % frame_len:
        raise ValueError(
            f"length {samples.size} is not a multiple of the frame length {frame_len}; "
            "preprocess the clip first"
        )
    return samples.reshape(-1, frame_len)


def _glorot(rng, shape, fan_in, fan_out):
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


def _conv_params(rng, prefix, n_blocks, c_in, features, k):
    params = {}
    for i in range(n_blocks):
        params[f"{prefix}.{i}.W"] = _glorot(rng, (features, c_in, k), c_in * k, features * k)
        params[f"{prefix}.{i}.b"] = np.zeros(features)
        c_in = features
    return params


class Model:
    """A WaveCNN or WaveRNN with fixed parameters.

    Parameters are plain float64 arrays; :meth:`with_params` returns a new
    model instead of mutating this one.
    """

    KINDS = ("WaveCNN", "WaveRNN")

    def __init__(self, config: ModelConfig, kind: str, params: Dict[str, np.ndarray], class_labels: Sequence[str]):
        if kind not in self.KINDS:
            raise ConfigError(f"unknown model kind {kind!r}")
        if len(class_labels) != config.num_classes:
            raise ConfigError(f"{len(class_labels)} labels for {config.num_classes} classes")
        self.config = config
        self.kind = kind
        self.params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
        self.class_labels = list(class_labels)

    def __repr__(self) -> str:
        return f"Model({self.kind}, {self.n_parameters} parameters, labels={self.class_labels})"

    @property
    def n_parameters(self) -> int:
        return sum(v.size for v in self.params.values())

    @property
    def input_length(self) -> int:
        return self.config.n_samples

    def with_params(self, params: Dict[str, np.ndarray]) -> "Model":
        return Model(self.config, self.kind, params, self.class_labels)

    def label_index(self, label) -> int:
        if isinstance(label, (int, np.integer)):
            if not 0 <= label < len(self.class_labels):
                raise ValueError(f"label index {label} out of range")
            return int(label)
        try:
            return self.class_labels.index(label)
        except ValueError:
            raise ValueError(f"unknown label {label!r}; model labels are {self.class_labels}") from None

    # -- graph construction -------------------------------------------------

    def logits(self, x: Tensor, p: Dict[str, Tensor]) -> Tensor:
        """Logits ``(N, k)`` for a batch ``x`` of shape ``(N, n_samples)``."""
        cfg = self.config
        act = _ACTIVATIONS[cfg.activation]
        n = x.shape[0]
        if x.values.ndim != 2 or x.shape[1] != cfg.n_samples:
            raise ag.ShapeError("input", f"expected (N, {cfg.n_samples}), got {x.shape}")
        F = cfg.n_frames
        h = ag.reshape(x, (n * F, 1, cfg.frame_len))
        for i in range(cfg.frontend_blocks):
            h = ag.maxpool1d(act(ag.conv1d(h, p[f"frontend.{i}.W"], p[f"frontend.{i}.b"])), cfg.pool)
        c, lf = h.shape[1], h.shape[2]

        if self.kind == "WaveCNN":
            # concatenate frame outputs along time: (N*F, C, Lf) -> (N, C, F*Lf)
            h = ag.reshape(h, (n, F, c, lf))
            h = ag.reshape(ag.transpose(h, (0, 2, 1, 3)), (n, c, F * lf))
            for i in range(cfg.backend_blocks):
                h = ag.maxpool1d(act(ag.conv1d(h, p[f"backend.{i}.W"], p[f"backend.{i}.b"])), cfg.pool)
            h = ag.reshape(h, (n, h.shape[1] * h.shape[2]))
            h = act(ag.dense(h, p["fc.W"], p["fc.b"]))
        else:
            seq = ag.reshape(h, (n, F, c * lf))
            h = lstm_last_state(seq, p["lstm.Wx"], p["lstm.Wh"], p["lstm.b"])
        return ag.dense(h, p["out.W"], p["out.b"])

    def _graph(self, labels: np.ndarray, reduction: str, grad_inputs):
        def fn(x, **p):
            return ag.softmax_cross_entropy(self.logits(x, p), labels, reduction=reduction)

        return Graph(fn, grad_inputs=grad_inputs)

    def _check_batch(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None, :]
        if X.ndim != 2 or X.shape[1] != self.input_length:
            raise ValueError(
                f"expected input of length {self.input_length}, got shape {X.shape}; preprocess first"
            )
        return X

    # -- batched numeric interface ----------------------------------------

    def log_proba(self, X) -> np.ndarray:
        X = self._check_batch(X)
        p = {k: Tensor(v) for k, v in self.params.items()}
        out = []
        for lo in range(0, X.shape[0], EVAL_CHUNK):
            xb = Tensor(X[lo : lo + EVAL_CHUNK])
            out.append(ag.log_softmax_values(self.logits(xb, p).values))
        return np.concatenate(out)

    def predict_proba(self, X) -> np.ndarray:
        return np.exp(self.log_proba(X))

    def loss_and_input_grad_batch(self, X, y) -> Tuple[np.ndarray, np.ndarray]:
        """Per-example cross-entropy and its gradient w.r.t. each example.

        Examples do not interact inside the network, so the gradient of the
        summed loss w.r.t. row i is exactly the gradient of row i's loss.
        """
        X = self._check_batch(X)
        y = np.array([self.label_index(v) for v in np.atleast_1d(y)], dtype=np.intp)
        if y.size != X.shape[0]:
            raise ValueError(f"{y.size} labels for {X.shape[0]} inputs")
        losses = np.empty(X.shape[0])
        grads = np.empty_like(X)
        for lo in range(0, X.shape[0], EVAL_CHUNK):
            sl = slice(lo, lo + EVAL_CHUNK)
            captured = {}

            def fn(x, yb=y[sl], **p):
                per = ag.softmax_cross_entropy(self.logits(x, p), yb, reduction="none")
                captured["per"] = per
                return ag.tensor_sum(per)

            g = Graph(fn, grad_inputs=["x"])
            g.forward({"x": X[sl], **self.params})
            grads[sl] = g.backward()["x"]
            losses[sl] = captured["per"].values
        return losses, grads

    def loss_and_param_grad(self, X, y) -> Tuple[float, Dict[str, np.ndarray]]:
        """Mean cross-entropy over the batch and its parameter gradients."""
        X = self._check_batch(X)
        y = np.asarray(y, dtype=np.intp)
        g = self._graph(y, "mean", grad_inputs=list(self.params))
        loss = g.forward({"x": X, **self.params})
        grads = g.backward()
        return float(loss.values[0]), grads


def lstm_last_state(seq: Tensor, Wx: Tensor, Wh: Tensor, b: Tensor) -> Tensor:
    """Final hidden state of an LSTM over ``seq`` of shape ``(N, T, D)``.

    Gate blocks are ordered input, forget, cell, output; zero initial state.
    """
    n, T, d = seq.shape
    units = Wh.shape[0]
    if Wx.shape != (d, 4 * units) or Wh.shape != (units, 4 * units) or b.shape != (4 * units,):
        raise ag.ShapeError("lstm", f"weights {Wx.shape}, {Wh.shape}, {b.shape} do not fit input dim {d}")
    xproj = ag.reshape(ag.matmul(ag.reshape(seq, (n * T, d)), Wx), (n, T, 4 * units))
    h = c = None
    for t in range(T):
        z = ag.take(xproj, t, axis=1) + b
        if h is not None:
            z = z + ag.matmul(h, Wh)
        zi, zf, zg, zo = ag.split_last(z, 4)
        i, g, o = ag.sigmoid(zi), ag.tanh(zg), ag.sigmoid(zo)
        c = i * g if c is None else ag.sigmoid(zf) * c + i * g
        h = o * ag.tanh(c)
    return h


def _head(rng, fan_in, k):
    return {"out.W": _glorot(rng, (fan_in, k), fan_in, k), "out.b": np.zeros(k)}


def _frontend(config: ModelConfig, seed: int) -> Dict[str, np.ndarray]:
    rng = np.random.default_rng([seed, 0])
    return _conv_params(rng, "frontend", config.frontend_blocks, 1, config.conv_features, config.kernel_len)


def _labels(config, class_labels):
    return list(class_labels) if class_labels is not None else [str(i) for i in range(config.num_classes)]


def build_wavecnn(config: ModelConfig, seed: int = 0, class_labels: Optional[Sequence[str]] = None) -> Model:
    config.validate()
    params = _frontend(config, seed)
    rng = np.random.default_rng([seed, 1])
    feats = config.conv_features
    params.update(_conv_params(rng, "backend", config.backend_blocks, feats, feats, config.kernel_len))
    flat = feats * config.backend_lengths()[-1] if config.backend_blocks else feats * config.n_frames * config.frontend_lengths()[-1]
    params["fc.W"] = _glorot(rng, (flat, config.fc_units), flat, config.fc_units)
    params["fc.b"] = np.zeros(config.fc_units)
    params.update(_head(rng, config.fc_units, config.num_classes))
    return Model(config, "WaveCNN", params, _labels(config, class_labels))


def build_wavernn(config: ModelConfig, seed: int = 0, class_labels: Optional[Sequence[str]] = None) -> Model:
    config.validate()
    params = _frontend(config, seed)
    rng = np.random.default_rng([seed, 2])
    fe = config.frontend_lengths()
    d = config.conv_features * (fe[-1] if fe else config.frame_len)
    u = config.rnn_units
    a = math.sqrt(6.0 / (d + u))
    params["lstm.Wx"] = rng.uniform(-a, a, size=(d, 4 * u))
    a = math.sqrt(6.0 / (2 * u))
    params["lstm.Wh"] = rng.uniform(-a, a, size=(u, 4 * u))
    bias = np.zeros(4 * u)
    bias[u : 2 * u] = 1.0  # forget gate
    params["lstm.b"] = bias
    params.update(_head(rng, u, config.num_classes))
    return Model(config, "WaveRNN", params, _labels(config, class_labels))


def build_model(kind: str, config: ModelConfig, seed: int = 0, class_labels=None) -> Model:
    builders = {"WaveCNN": build_wavecnn, "WaveRNN": build_wavernn}
    aliases = {"cnn": "WaveCNN", "rnn": "WaveRNN"}
    kind = aliases.get(kind.lower(), kind) if isinstance(kind, str) else kind
    if kind not in builders:
        raise ConfigError(f"unknown model kind {kind!r}")
    return builders[kind](config, seed, class_labels)


def _samples(model: Model, x) -> np.ndarray:
    samples = x.samples if isinstance(x, Waveform) else np.asarray(x, dtype=np.float64)
    if samples.ndim != 1 or samples.size != model.input_length:
        raise ValueError(
            f"expected a waveform of {model.input_length} samples, got shape {samples.shape}; preprocess first"
        )
    return samples


def predict(model: Model, x) -> np.ndarray:
    """Class probabilities for one waveform."""
    return model.predict_proba(_samples(model, x))[0]


def loss_and_input_grad(model: Model, x, y) -> Tuple[float, np.ndarray]:
    """Cross-entropy J(x, y) and dJ/dx for one waveform."""
    losses, grads = model.loss_and_input_grad_batch(_samples(model, x), [y])
    return float(losses[0]), grads[0]


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: Model, path) -> None:
    """Write ``model`` as an npz container with little-endian float32 arrays."""
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "kind": model.kind,
        "config": asdict(model.config),
        "class_labels": model.class_labels,
        "params": {k: list(v.shape) for k, v in model.params.items()},
    }
    arrays = {f"param/{k}": v.astype("<f4") for k, v in sorted(model.params.items())}
    arrays["header"] = np.frombuffer(json.dumps(header, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    buf = io.BytesIO()
    # fixed member timestamps keep the bytes reproducible
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, arr in arrays.items():
            member = io.BytesIO()
            np.lib.format.write_array(member, np.ascontiguousarray(arr), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0)), member.getvalue())
    _atomic_write(path, lambda fh: fh.write(buf.getvalue()))


def load_checkpoint(path) -> Model:
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(bytes(data["header"]).decode("utf-8"))
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path} is not a wavadv checkpoint")
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('version')}")
        params = {}
        for name, shape in header["params"].items():
            arr = data[f"param/{name}"]
            if list(arr.shape) != shape:
                raise ValueError(f"parameter {name} has shape {arr.shape}, header says {shape}")
            params[name] = arr.astype(np.float64)
    config = ModelConfig(**header["config"])
    return Model(config, header["kind"], params, header["class_labels"])


def quantized(model: Model) -> Model:
    """The model as it would come back from a checkpoint."""
    return model.with_params({k: v.astype("<f4").astype(np.float64) for k, v in model.params.items()})


__all__ = [
    "ConfigError",
    "Model",
    "ModelConfig",
    "build_model",
    "build_wavecnn",
    "build_wavernn",
    "frame",
    "load_checkpoint",
    "loss_and_input_grad",
    "lstm_last_state",
    "predict",
    "quantized",
    "save_checkpoint",
]
