import json

import numpy as np
import pytest

from conftest import LinearSoftmax
from wavadv.attack import AttackConfig, fgsm
from wavadv.audio import Waveform
from wavadv.evaluation import (
    DEFAULT_EPS,
    EvalReport,
    epsilon_sweep,
    perturbation_metrics,
    plot_report,
    save_heatmap,
    save_matrix,
    spectrogram,
)
from wavadv.nets import ModelConfig, build_wavecnn, build_wavernn


def test_metrics_examples():
    x = np.random.default_rng(0).uniform(0.2, 0.8, 400)
    same = perturbation_metrics(x, x)
    assert same.linf == 0 and same.l2 == 0 and same.snr_db == 160.0
    pattern = np.sign(np.random.default_rng(1).standard_normal(400))
    m = perturbation_metrics(x, x + 0.01 * pattern)
    assert m.linf == pytest.approx(0.01, abs=1e-16)
    assert m.l2 == pytest.approx(0.01 * np.sqrt(400), rel=1e-12)
    assert m.linf <= m.l2 <= np.sqrt(400) * m.linf * (1 + 1e-12)
    with pytest.raises(ValueError):
        perturbation_metrics(x, x[:-1])


def test_snr_formula():
    x = np.array([0.5, 1.0, 0.0, 0.5])  # signal power 0.5 about silence
    eta = np.array([0.0, -0.1, 0.1, 0.0])
    m = perturbation_metrics(x, x + eta)
    assert m.snr_db == pytest.approx(10 * np.log10(0.5 / 0.02), rel=1e-12)
    assert perturbation_metrics(np.full(3, 0.5), np.full(3, 0.6)).snr_db == -160.0


def test_fgsm_output_linf_bound():
    rng = np.random.default_rng(2)
    m = LinearSoftmax(rng.standard_normal(500))
    x = rng.uniform(0, 1, 500)
    r = fgsm(m, x, 0, AttackConfig(epsilon=0.02))
    assert perturbation_metrics(x, r.adversarial).linf <= 0.02


def test_sine_peak_bin():
    # 1 kHz at 16 kHz with a 512 window: 1000 * 512 / 16000 = 32 exactly
    sr = 16000
    t = np.arange(sr) / sr
    w = Waveform(0.5 + 0.4 * np.sin(2 * np.pi * 1000 * t), sr)
    S = spectrogram(w, 512, 128)
    assert S.shape == (257, 1 + (sr - 512) // 128)
    assert np.all(S.argmax(axis=0) == 32)


def test_silence_near_zero():
    S = spectrogram(Waveform(np.full(4000, 0.5), 8000))
    assert np.max(S) == 0.0


def test_spectrogram_errors():
    with pytest.raises(ValueError):
        spectrogram(np.full(100, 0.5), 512)
    with pytest.raises(ValueError):
        spectrogram(np.full(1000, 0.5), 512, hop=0)


def test_matrix_and_heatmap_export(tmp_path):
    S = spectrogram(np.random.default_rng(0).uniform(0, 1, 2000), 256, 64)
    save_matrix(S, tmp_path / "s.txt")
    np.testing.assert_allclose(np.loadtxt(tmp_path / "s.txt"), S, rtol=1e-9)
    save_heatmap(S, tmp_path / "s.png", "x")
    assert (tmp_path / "s.png").read_bytes()[:4] == b"\x89PNG"


CFG = ModelConfig(clip_seconds=0.2, frontend_blocks=2, backend_blocks=2, conv_features=4, kernel_len=8,
                  rnn_units=6, fc_units=8)


@pytest.fixture(scope="module")
def sweep_setup():
    rng = np.random.default_rng(4)
    X = rng.uniform(0.1, 0.9, (6, CFG.n_samples))
    y = np.array([0, 1, 0, 1, 0, 1])
    return build_wavecnn(CFG, seed=1), build_wavernn(CFG, seed=1), X, y


def test_sweep_structure(sweep_setup, tmp_path):
    cnn, rnn, X, y = sweep_setup
    rep = epsilon_sweep(cnn, [rnn], X, y, [0.0, 0.01, 0.05], steps=2, task="gender_proxy", seed=3)
    assert rep.surrogate_id == "WaveCNN" and rep.target_ids == ["WaveRNN"]
    for mid in ("WaveCNN", "WaveRNN"):
        assert rep.error[mid][0] == rep.clean_error[mid]
        assert rep.error[mid] == rep.recomputed_error(mid)
        assert all(0 <= e <= 1 for e in rep.error[mid])
    assert rep.chance_error == 0.5
    assert rep.mean_linf[0] == 0 and rep.mean_snr_db[0] == 160.0
    assert all(l <= 2 * e for l, e in zip(rep.mean_linf, rep.eps_list))
    rep.write(tmp_path / "r.json")
    d = json.loads((tmp_path / "r.json").read_text())
    assert d["format"] == "wavadv-eval-report" and d["chance_error"] == 0.5
    back = EvalReport.read(tmp_path / "r.json")
    assert back.error == rep.error and back.predictions == rep.predictions
    plot_report(rep, tmp_path / "r.png")
    assert (tmp_path / "r.png").exists()


def test_sweep_parallel_matches_serial(sweep_setup):
    cnn, rnn, X, y = sweep_setup
    a = epsilon_sweep(cnn, [rnn], X, y, [0.0, 0.02, 0.08], jobs=1)
    b = epsilon_sweep(cnn, [rnn], X, y, [0.0, 0.02, 0.08], jobs=3)
    assert a.predictions == b.predictions and a.mean_l2 == b.mean_l2


def test_sweep_errors(sweep_setup):
    cnn, rnn, X, y = sweep_setup
    other = build_wavernn(CFG, seed=1, class_labels=["a", "b"])
    with pytest.raises(ValueError, match="label"):
        epsilon_sweep(cnn, [other], X, y, [0.0])
    with pytest.raises(ValueError):
        epsilon_sweep(cnn, [], X[:0], y[:0], [0.0])
    with pytest.raises(ValueError):
        epsilon_sweep(cnn, [rnn], X, y, [0.0], model_ids=["a", "a"])


def test_default_sweep_values():
    assert DEFAULT_EPS == (0.0, 0.002, 0.005, 0.01, 0.02, 0.032, 0.05, 0.08)
