"""End-to-end attack on a synthetic pitch task.

Generates the ``gender_proxy`` dataset (low versus high fundamental
frequency), trains a WaveCNN and a WaveRNN, then sweeps epsilon with
two-step FGSM crafted on the WaveCNN.  The WaveCNN column is the white-box
error; the WaveRNN column shows how well the same adversarial waveforms
transfer.  Also saves the spectrogram difference of one attacked example.
A few minutes on one CPU core.

    python3 demos/attack_walkthrough.py [out_dir]
"""

import sys
from pathlib import Path

import numpy as np

from wavadv import AttackConfig, ModelConfig, TrainConfig, build_model, epsilon_sweep, iterative_fgsm, split, synth_dataset, train
from wavadv.audio import Waveform
from wavadv.evaluation import DEFAULT_EPS, perturbation_metrics, plot_report, save_heatmap, spectrogram


def main(out_dir="."):
    out = Path(out_dir)
    manifest = split(synth_dataset("gender_proxy", 40, seed=7), seed=7)
    cfg = TrainConfig(lr=1e-3, max_epochs=12, batch_size=16, patience=4, seed=0)
    models = {}
    for kind in ("WaveCNN", "WaveRNN"):
        model = build_model(kind, ModelConfig(), seed=0, class_labels=manifest.class_labels)
        models[kind], hist = train(model, manifest, cfg)
        print(f"{kind}: best epoch {hist.best_epoch}, val acc {hist.val_accuracy[hist.best_epoch]:.2f}")

    X, y = manifest.load("test")
    rep = epsilon_sweep(models["WaveCNN"], [models["WaveRNN"]], X, y, DEFAULT_EPS, steps=2, task=manifest.task)
    print("\n   eps   WaveCNN  WaveRNN   SNR dB")
    for i, eps in enumerate(rep.eps_list):
        print(f"{eps:6.3f}   {rep.error['WaveCNN'][i]:.3f}    {rep.error['WaveRNN'][i]:.3f}  {rep.mean_snr_db[i]:7.1f}")
    rep.write(out / "sweep.json")
    plot_report(rep, out / "sweep.png")

    x = Waveform(X[0], manifest.sample_rate)
    adv = iterative_fgsm(models["WaveCNN"], x, int(y[0]), AttackConfig(epsilon=0.02, steps=2))
    m = perturbation_metrics(x, adv.adversarial)
    print(f"\none example at eps 0.02: linf {m.linf:.4f}, SNR {m.snr_db:.1f} dB, "
          f"loss {adv.loss_before:.3f} -> {adv.loss_after:.3f}")
    diff = spectrogram(adv.adversarial, 256, 64) - spectrogram(x, 256, 64)
    save_heatmap(diff, out / "spectrogram_difference.png", "adversarial minus original")
    print(f"saved sweep.json, sweep.png and spectrogram_difference.png in {out.resolve()}")
    return rep


if __name__ == "__main__":
    main(*sys.argv[1:])
