import numpy as np
import pytest

from spectrobust import diffcore as F

# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


class LinearSoftmax:
    """Affine classifier on flattened pixels; small enough for closed-form oracles."""

    def __init__(self, input_shape, n_classes, seed=0, scale=1.0):
        r = np.random.default_rng(seed)
        self.input_shape_ = tuple(input_shape)
        self.n_classes_ = n_classes
        self.dim = int(np.prod(input_shape))
        self.W = r.normal(0, scale / np.sqrt(self.dim), (n_classes, self.dim))
        self.b = r.normal(0, 0.1, n_classes)

    def forward_tensor(self, x):
        return F.linear(F.reshape(x, (x.shape[0], self.dim)), self.W, self.b)

    def features_tensor(self, x):
        return self.forward_tensor(x)

    def decision_function(self, X):
        X = np.asarray(X, dtype=np.float64)
        return X.reshape(len(X), -1) @ self.W.T + self.b

    def predict(self, X):
        return self.decision_function(X).argmax(axis=1)


@pytest.fixture
def linear_model():
    return LinearSoftmax((3, 8, 8), 4, seed=0, scale=8.0)


@pytest.fixture
def images8():
    return np.random.default_rng(11).uniform(0.2, 0.8, (4, 3, 8, 8))
