"""Command-line entry point: ``wavadv <subcommand> ...``.

Every subcommand accepts ``--config FILE`` (``key = value`` lines) and
repeated ``--set key=value`` overrides; the effective configuration is
written next to the primary output as ``<out>.config.json``.  Relative output
paths are resolved under ``$WAVADV_OUT`` when that variable is set.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import audio, diagnostics, evaluation, nets, training
from .attack import AttackConfig, fgsm, iterative_fgsm
from .audio import DatasetManifest, Waveform, _atomic_write

log = logging.getLogger("wavadv")

OUT_ROOT_ENV = "WAVADV_OUT"


class UsageError(Exception):
    pass


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _read_config_file(path) -> Dict[str, object]:
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = _parse_value(value)
    return out


def _effective(args, defaults: Dict[str, object]) -> Dict[str, object]:
    """Defaults, then config file, then --set overrides; unknown keys rejected."""
    cfg = dict(defaults)
    layers = []
    if args.config:
        layers.append(_read_config_file(args.config))
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = _parse_value(value.strip())
    layers.append(overrides)
    for layer in layers:
        unknown = sorted(set(layer) - set(cfg))
        if unknown:
            raise UsageError(f"unknown config keys {unknown}; known: {sorted(cfg)}")
        cfg.update(layer)
    return cfg


def _out_path(path: str) -> Path:
    p = Path(path)
    root = os.environ.get(OUT_ROOT_ENV)
    if root and not p.is_absolute():
        p = Path(root) / p
    return p


def _write_json(obj, path: Path) -> None:
    data = (json.dumps(obj, indent=1, sort_keys=True) + "\n").encode("utf-8")
    _atomic_write(path, lambda fh: fh.write(data))


def _echo_config(out: Path, subcommand: str, cfg: Dict[str, object]) -> None:
    target = out / "effective_config.json" if out.is_dir() else out.with_name(out.name + ".config.json")
    _write_json({"subcommand": subcommand, **cfg}, target)


def _input_waveform(model: nets.Model, path) -> Waveform:
    w = audio.load_wav(path)
    return audio.preprocess(w, model.config.clip_seconds, model.config.sample_rate)


def _quantize_within(original: np.ndarray, adversarial: np.ndarray) -> np.ndarray:
    """Snap to the 16-bit grid, rounding the perturbation toward zero.

    ``original`` must already lie on the grid, so the stored perturbation
    never exceeds the one computed in floating point.
    """
    base = np.rint(original * audio.PCM_SCALE)
    steps = np.trunc((adversarial - original) * audio.PCM_SCALE)
    return np.clip(base + steps, 0, audio.PCM_SCALE) / audio.PCM_SCALE


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth_data(args) -> int:
    cfg = _effective(
        args,
        {"task": args.task, "n": args.n, "seed": args.seed, "sample_rate": 8000, "clip_seconds": 1.2},
    )
    out = _out_path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    synth = audio.synth_dataset(cfg["task"], int(cfg["n"]), int(cfg["seed"]), int(cfg["sample_rate"]), float(cfg["clip_seconds"]))
    entries = []
    for i, entry in enumerate(synth.entries):
        rel = Path("wav") / f"{i:05d}_{entry.label}.wav"
        audio.save_wav(synth.waveform(i), out / rel)
        entries.append(audio.ManifestEntry(rel.as_posix(), entry.label))
    files = DatasetManifest(
        synth.task, entries, synth.seed, synth.sample_rate, synth.clip_seconds, synth.class_labels, root=out
    )
    files = audio.split(files, seed=int(cfg["seed"]))
    files.write(out / "manifest.txt")
    _echo_config(out, "synth-data", cfg)
    sizes = {k: len(v) for k, v in files.splits.items()}
    print(f"wrote {len(entries)} examples to {out} (splits {sizes})")
    return 0


def _model_defaults() -> Dict[str, object]:
    return {f.name: f.default for f in fields(nets.ModelConfig)}


def _train_defaults() -> Dict[str, object]:
    d = {f.name: f.default for f in fields(training.TrainConfig)}
    d["lr_range"] = list(d["lr_range"])
    return d


def cmd_train(args) -> int:
    manifest = DatasetManifest.read(args.manifest)
    defaults = {"kind": args.kind, "model_seed": args.seed}
    defaults.update(_model_defaults())
    defaults.update(_train_defaults())
    defaults.update(
        sample_rate=manifest.sample_rate,
        clip_seconds=manifest.clip_seconds,
        num_classes=len(manifest.class_labels),
        kernel_len=20,
        batch_size=16,
        max_epochs=20,
        seed=args.seed,
    )
    cfg = _effective(args, defaults)
    model_cfg = nets.ModelConfig(**{f.name: cfg[f.name] for f in fields(nets.ModelConfig)})
    train_kwargs = {f.name: cfg[f.name] for f in fields(training.TrainConfig)}
    train_kwargs["lr_range"] = tuple(train_kwargs["lr_range"])
    train_cfg = training.TrainConfig(**train_kwargs)

    out = _out_path(args.out)
    model = nets.build_model(cfg["kind"], model_cfg, int(cfg["model_seed"]), manifest.class_labels)
    log_path = out.with_name(out.name + ".log")
    out.parent.mkdir(parents=True, exist_ok=True)
    if log_path.exists():
        log_path.unlink()
    trained, history = training.train(model, manifest, train_cfg, log_path=log_path)
    nets.save_checkpoint(trained, out)
    _echo_config(out, "train", cfg)
    test_acc = training.evaluate_accuracy(trained, manifest, "test") if manifest.splits.get("test") else float("nan")
    print(
        f"{trained.kind}: lr={history.chosen_lr:.3g} best_epoch={history.best_epoch} "
        f"val_acc={history.val_accuracy[history.best_epoch]:.4f} test_acc={test_acc:.4f}"
    )
    return 0


def cmd_attack(args) -> int:
    cfg = _effective(args, {"eps": args.eps, "steps": args.steps, "clip_min": 0.0, "clip_max": 1.0})
    model = nets.load_checkpoint(args.model)
    x = _input_waveform(model, args.input)
    acfg = AttackConfig(epsilon=float(cfg["eps"]), steps=int(cfg["steps"]), clip_min=cfg["clip_min"], clip_max=cfg["clip_max"])
    result = (fgsm if acfg.steps == 1 else iterative_fgsm)(model, x, args.label, acfg)
    stored = _quantize_within(x.samples, result.adversarial.samples)
    out = _out_path(args.out)
    audio.save_wav(Waveform(stored, x.sample_rate, str(out)), out)
    written = audio.load_wav(out).samples
    m = evaluation.perturbation_metrics(x.samples, written)
    pred_written = nets.predict(model, written)
    metrics_path = _out_path(args.metrics) if args.metrics else out.with_name(out.name + ".metrics.json")
    _write_json(
        {
            "label": args.label,
            "epsilon": acfg.epsilon,
            "steps": acfg.steps,
            "ball": acfg.radius,
            "linf": m.linf,
            "l2": m.l2,
            "snr_db": m.snr_db,
            "loss_before": result.loss_before,
            "loss_after": result.loss_after,
            "pred_before": model.class_labels[result.label_before],
            "pred_after": model.class_labels[int(np.argmax(pred_written))],
            "null_gradient": result.null_gradient,
        },
        metrics_path,
    )
    _echo_config(out, "attack", cfg)
    print(
        f"{model.class_labels[result.label_before]} -> {model.class_labels[int(np.argmax(pred_written))]} "
        f"linf={m.linf:.5f} snr={m.snr_db:.1f} dB"
    )
    return 0


def cmd_sweep(args) -> int:
    eps_default = ",".join(str(e) for e in evaluation.DEFAULT_EPS)
    cfg = _effective(args, {"eps": args.eps or eps_default, "steps": args.steps, "split": args.split, "jobs": args.jobs})
    manifest = DatasetManifest.read(args.manifest)
    surrogate = nets.load_checkpoint(args.surrogate)
    targets = [nets.load_checkpoint(p) for p in args.targets or []]
    eps_list = [float(e) for e in str(cfg["eps"]).split(",") if e.strip()]
    X, y = manifest.load(cfg["split"])
    ids = [Path(args.surrogate).stem] + [Path(p).stem for p in args.targets or []]
    if len(set(ids)) != len(ids):
        ids = None
    report = evaluation.epsilon_sweep(
        surrogate, targets, X, y, eps_list, steps=int(cfg["steps"]), task=manifest.task,
        model_ids=ids, jobs=int(cfg["jobs"]), seed=manifest.seed,
    )
    out = _out_path(args.out)
    report.write(out)
    if args.png:
        evaluation.plot_report(report, _out_path(args.png))
    _echo_config(out, "sweep", cfg)
    for mid, errs in report.error.items():
        print(f"{mid}: " + " ".join(f"{e:.3f}" for e in errs))
    return 0


def cmd_diagnose(args) -> int:
    cfg = _effective(args, {"head_frac": 0.1, "tail_frac": 0.1})
    model = nets.load_checkpoint(args.model)
    x = _input_waveform(model, args.input)
    profile = diagnostics.input_gradient_profile(model, x, args.label)
    out = _out_path(args.out)
    diagnostics.save_profile(profile, out)
    _echo_config(out, "diagnose", cfg)
    try:
        ratio = diagnostics.vanishing_ratio(profile, cfg["head_frac"], cfg["tail_frac"])
        print(f"vanishing ratio (head/tail) = {ratio:.3e}")
    except diagnostics.UndefinedRatioError as exc:
        print(f"vanishing ratio undefined: {exc}")
    return 0


def cmd_spectrogram(args) -> int:
    cfg = _effective(args, {"window_len": 512, "hop": 128})
    w = audio.load_wav(args.input)
    spec = evaluation.spectrogram(w, int(cfg["window_len"]), int(cfg["hop"]))
    if args.ref:
        ref = audio.load_wav(args.ref)
        if len(ref) != len(w):
            ref = audio.preprocess(ref, len(w) / w.sample_rate, w.sample_rate)
        spec = spec - evaluation.spectrogram(ref, int(cfg["window_len"]), int(cfg["hop"]))
    out = _out_path(args.out)
    evaluation.save_matrix(spec, out)
    if args.png:
        title = "spectrogram difference" if args.ref else "spectrogram"
        evaluation.save_heatmap(spec, _out_path(args.png), title)
    _echo_config(out, "spectrogram", cfg)
    print(f"wrote {spec.shape[0]}x{spec.shape[1]} matrix to {out}")
    return 0


def cmd_metrics(args) -> int:
    cfg = _effective(args, {})
    a, b = audio.load_wav(args.orig), audio.load_wav(args.adv)
    m = evaluation.perturbation_metrics(a, b)
    out = _out_path(args.out)
    _write_json(asdict(m), out)
    _echo_config(out, "metrics", cfg)
    print(f"linf={m.linf:.6f} l2={m.l2:.6f} snr={m.snr_db:.2f} dB")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wavadv", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="text file of 'key = value' lines")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        p.set_defaults(func=func)
        return p

    p = add("synth-data", cmd_synth_data, "generate a synthetic proxy dataset as WAV files + manifest")
    p.add_argument("--task", required=True, choices=sorted(audio.TASKS))
    p.add_argument("--n", type=int, required=True, help="examples per class")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = add("train", cmd_train, "train a WaveCNN or WaveRNN on a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--kind", default="cnn", choices=["cnn", "rnn", "WaveCNN", "WaveRNN"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = add("attack", cmd_attack, "craft an adversarial WAV with (iterative) FGSM")
    p.add_argument("--model", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--label", required=True, help="ground-truth label of the input")
    p.add_argument("--eps", type=float, required=True)
    p.add_argument("--steps", type=int, default=1)
    p.add_argument("--out", required=True)
    p.add_argument("--metrics", help="metrics JSON path (default <out>.metrics.json)")

    p = add("sweep", cmd_sweep, "error rate versus epsilon, white-box and transfer")
    p.add_argument("--manifest", required=True)
    p.add_argument("--surrogate", required=True)
    p.add_argument("--targets", nargs="*")
    p.add_argument("--eps", help="comma-separated list")
    p.add_argument("--steps", type=int, default=2)
    p.add_argument("--split", default="test")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True)
    p.add_argument("--png")

    p = add("diagnose", cmd_diagnose, "export the per-sample input-gradient profile")
    p.add_argument("--model", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--label", required=True)
    p.add_argument("--out", required=True)

    p = add("spectrogram", cmd_spectrogram, "STFT magnitude (or difference against --ref)")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--ref")
    p.add_argument("--out", required=True)
    p.add_argument("--png")

    p = add("metrics", cmd_metrics, "L-inf / L2 / SNR between two WAV files")
    p.add_argument("--orig", required=True)
    p.add_argument("--adv", required=True)
    p.add_argument("--out", required=True)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"wavadv {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        log.debug("failure", exc_info=True)
        print(f"wavadv {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


run = main

if __name__ == "__main__":
    sys.exit(main())
