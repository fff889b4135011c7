import numpy as np
import pytest


class LinearSoftmax:
    """Two-class model with logits [0, w.x + c].

    For label 0 the loss is log(1 + exp(w.x + c)), whose input gradient is
    sigmoid(w.x + c) * w: its sign pattern is exactly sign(w).
    """

    kind = "linear"

    def __init__(self, w, c=0.0, class_labels=("neg", "pos")):
        self.w = np.asarray(w, dtype=np.float64)
        self.c = c
        self.class_labels = list(class_labels)

        class _Cfg:
            sample_rate = 8000

        self.config = _Cfg()

    @property
    def input_length(self):
        return self.w.size

    def label_index(self, label):
        return int(label) if isinstance(label, (int, np.integer)) else self.class_labels.index(label)

    def _logits(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        z = X @ self.w + self.c
        return np.stack([np.zeros_like(z), z], axis=1)

    def log_proba(self, X):
        z = self._logits(X)
        return z - np.logaddexp(z[:, :1], z[:, 1:])

    def predict_proba(self, X):
        return np.exp(self.log_proba(X))

    def loss_and_input_grad_batch(self, X, y):
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        y = np.array([self.label_index(v) for v in np.atleast_1d(y)])
        logp = self.log_proba(X)
        p1 = np.exp(logp[:, 1])
        # d(-log p_y)/dz = p1 - [y == 1]
        coef = p1 - (y == 1)
        return -logp[np.arange(len(y)), y], coef[:, None] * self.w[None, :]


@pytest.fixture
def linear_model():
    return LinearSoftmax


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES = {}


def record_criterion(number, ok, detail):
    ACCEPTANCE_LINES[number] = f"criterion {number}: {'PASS' if ok else 'FAIL'} ({detail})"
    print(ACCEPTANCE_LINES[number])


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
