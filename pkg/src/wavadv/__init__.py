"""Raw-waveform adversarial examples for paralinguistic classifiers.

A small float64 reverse-mode autodiff engine, WaveCNN / WaveRNN models built
on it, (iterative) fast-gradient-sign attacks, gradient diagnostics,
synthetic proxy datasets and an epsilon-sweep evaluation harness.
"""

from .attack import AccumulationReport, AdversarialResult, AttackConfig, accumulation_effect, fgsm, iterative_fgsm
from .audio import DatasetManifest, Waveform, load_wav, preprocess, save_wav, split, synth_dataset
from .autograd import Graph, Tensor, finite_diff_grad
from .diagnostics import GradientProfile, contraction_rnn_demo, input_gradient_profile, vanishing_ratio
from .evaluation import EvalReport, epsilon_sweep, perturbation_metrics, spectrogram
from .nets import Model, ModelConfig, build_model, load_checkpoint, loss_and_input_grad, predict, save_checkpoint
from .training import TrainConfig, TrainHistory, lr_search, train

__version__ = "0.1.0"
