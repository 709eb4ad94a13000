"""ReLU MLP classifier and its overfit-friendly training loop."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import autodiff as ad
from ..autodiff import Tensor
from ..data import ClsDataset
from ..optim import Sgd
from ..rng import Rng
from .base import Module, TrainReport, TrainingDivergedError


@dataclass
class ClassifierHyper:
    hidden: tuple[int, ...] = (64, 64)
    epochs: int = 3000
    lr: float = 0.15
    momentum: float = 0.9


class MlpClassifier(Module):
    """Fully connected ReLU network; widths [d_in, *hidden, K].

    An empty ``hidden`` gives a plain linear-softmax model, which the theory
    probes use as the exactly-decomposable case.
    """

    def __init__(self, widths, rng: Rng):
        super().__init__()
        widths = [int(w) for w in widths]
        if len(widths) < 2:
            raise ValueError("need at least input and output widths")
        self.widths = widths
        self.num_classes = widths[-1]
        self.input_dim = widths[0]
        for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            scale = np.sqrt(2.0 / fan_in)
            self._param(f"w{i}", scale * rng.standard_normal((fan_in, fan_out)))
            self._param(f"b{i}", np.zeros(fan_out))
        self.n_layers = len(widths) - 1

    def logits(self, x) -> Tensor:
        """Class logits for a (N, d) batch (or a single (d,) point)."""
        t = ad.as_tensor(x)
        if t.ndim == 1:
            t = ad.reshape(t, (1, t.shape[0]))
        if t.shape[-1] != self.input_dim:
            raise ad.ShapeError(f"classifier expects dim {self.input_dim}, got {t.shape}")
        h = t
        for i in range(self.n_layers):
            w, b = self._params[f"w{i}"], self._params[f"b{i}"]
            h = ad.add_tail(ad.matmul(h, w), b)
            if i < self.n_layers - 1:
                h = ad.relu(h)
        return h

    def log_probs(self, x) -> Tensor:
        return ad.log_softmax(self.logits(x))

    def loss(self, x, y) -> Tensor:
        """Mean cross-entropy over the batch."""
        return ad.cross_entropy(self.logits(x), np.asarray(y))

    def accuracy(self, x, y) -> float:
        pred = self.logits(x).data.argmax(axis=-1)
        return float((pred == np.asarray(y)).mean())


def train_classifier(data: ClsDataset, train_ids, test_ids, hyper: ClassifierHyper,
                     rng: Rng) -> tuple[MlpClassifier, TrainReport]:
    """Train a fresh classifier on ``train_ids``, freeze it, report overfit.

    Full-batch SGD with momentum; the default hyper is an overfit recipe
    (train accuracy is expected to reach 100% on the synthetic mixture).
    Divergence (non-finite loss) raises with the epoch index.
    """
    train_ids = np.asarray(list(train_ids), dtype=np.int64)
    test_ids = np.asarray(list(test_ids), dtype=np.int64)
    x_train, y_train = data.points[train_ids], data.labels[train_ids]
    x_test, y_test = data.points[test_ids], data.labels[test_ids]

    model = MlpClassifier([data.points.shape[1], *hyper.hidden, data.num_classes], rng)
    opt = Sgd(model.parameters(), lr=hyper.lr, momentum=hyper.momentum)
    for epoch in range(hyper.epochs):
        opt.zero_grad()
        loss = model.loss(x_train, y_train)
        if not np.isfinite(loss.data):
            raise TrainingDivergedError(f"classifier training diverged at epoch {epoch}")
        ad.backward(loss)
        opt.step()

    train_loss = float(model.loss(x_train, y_train).data)
    test_loss = float(model.loss(x_test, y_test).data)
    rho = test_loss / max(train_loss, 1e-300)
    report = TrainReport(train_loss=train_loss, test_loss=test_loss, rho=rho,
                         epochs=hyper.epochs, seed=rng.seed)
    model.freeze()
    return model, report
