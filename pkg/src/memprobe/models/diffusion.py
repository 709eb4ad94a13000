"""Pointwise denoising model: noise-prediction MLP over a linear schedule."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import autodiff as ad
from ..autodiff import Tensor
from ..data import DiffDataset
from ..optim import Adam
from ..rng import Rng
from .base import Module, TrainReport, TrainingDivergedError


class DiffusionSchedule:
    """Linear beta schedule with the alpha-bar(0) = 1 convention.

    beta[t] for t = 1..T interpolates beta_start..beta_end; alpha_bar[t] is
    the running product of (1 - beta_s) and is strictly decreasing.
    """

    def __init__(self, timesteps: int = 100, beta_start: float = 1e-4,
                 beta_end: float = 0.02):
        if timesteps < 1:
            raise ValueError("timesteps must be >= 1")
        if not (0.0 < beta_start <= beta_end < 1.0):
            raise ValueError("need 0 < beta_start <= beta_end < 1")
        self.timesteps = int(timesteps)
        self.beta = np.zeros(timesteps + 1)
        self.beta[1:] = np.linspace(beta_start, beta_end, timesteps)
        self.alpha_bar = np.cumprod(1.0 - self.beta)
        if not np.all(np.diff(self.alpha_bar) < 0):
            raise ValueError("alpha_bar must be strictly decreasing")
        assert self.alpha_bar[0] == 1.0

    def check_t(self, t: int) -> int:
        t = int(t)
        if not 1 <= t <= self.timesteps:
            raise ValueError(f"timestep {t} outside [1, {self.timesteps}]")
        return t


def sinusoidal_embedding(t: int, dim: int = 16) -> np.ndarray:
    """Fixed sin/cos features of an integer timestep."""
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    angles = float(t) * freqs
    return np.concatenate([np.sin(angles), np.cos(angles)])


@dataclass
class DiffusionHyper:
    hidden: tuple[int, ...] = (64, 64)
    steps: int = 4000
    batch_size: int = 64
    lr: float = 1e-3
    timesteps: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.02


class EpsMlpDiffusion(Module):
    """MLP predicting the injected noise from (x_t, timestep embedding)."""

    TEMB_DIM = 16

    def __init__(self, dim: int, schedule: DiffusionSchedule, rng: Rng,
                 hidden: tuple[int, ...] = (64, 64)):
        super().__init__()
        self.dim = int(dim)
        self.schedule = schedule
        widths = [self.dim + self.TEMB_DIM, *hidden, self.dim]
        self.n_layers = len(widths) - 1
        for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            scale = np.sqrt(2.0 / fan_in)
            self._param(f"w{i}", scale * rng.standard_normal((fan_in, fan_out)))
            self._param(f"b{i}", np.zeros(fan_out))

    def predict_eps(self, x, t: int) -> Tensor:
        """Noise estimate for a (B, d) batch at integer timestep t (0..T)."""
        xt = ad.as_tensor(x)
        if xt.ndim == 1:
            xt = ad.reshape(xt, (1, xt.shape[0]))
        if xt.shape[-1] != self.dim:
            raise ad.ShapeError(f"diffusion model expects dim {self.dim}, got {xt.shape}")
        temb = sinusoidal_embedding(t, self.TEMB_DIM)
        temb_rows = ad.tile_first(ad.constant(temb), xt.shape[0])
        h = ad.concat([xt, temb_rows], axis=1)
        for i in range(self.n_layers):
            w, b = self._params[f"w{i}"], self._params[f"b{i}"]
            h = ad.add_tail(ad.matmul(h, w), b)
            if i < self.n_layers - 1:
                h = ad.relu(h)
        return h

    def noised(self, x0: np.ndarray, t: int, eps: np.ndarray) -> np.ndarray:
        """Closed-form forward diffusion: sqrt(ab_t) x0 + sqrt(1-ab_t) eps."""
        ab = self.schedule.alpha_bar[self.schedule.check_t(t)]
        return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps

    def simple_loss(self, x0_batch: np.ndarray, ts: np.ndarray,
                    eps_batch: np.ndarray) -> Tensor:
        """Mean over the batch of the squared noise-prediction error."""
        losses = []
        for t in np.unique(ts):
            sel = np.where(ts == t)[0]
            xt = self.noised(x0_batch[sel], int(t), eps_batch[sel])
            pred = self.predict_eps(xt, int(t))
            diff = ad.sub(pred, ad.constant(eps_batch[sel]))
            losses.append(ad.tsum(ad.square(diff)))
        total = losses[0]
        for piece in losses[1:]:
            total = ad.add(total, piece)
        # normalize by batch count so the loss is comparable across splits
        return ad.mul_scalar(total, 1.0 / x0_batch.shape[0])


def ddim_one_step_forward(model: EpsMlpDiffusion, x_tilde, t: int) -> Tensor:
    """Deterministic jump to x_t using the model's own t=0 noise estimate.

    x_t = sqrt(alpha_bar_t) x~ + sqrt(1 - alpha_bar_t) eps(x~, 0); no
    sampling is involved, so the probe state is reproducible.
    """
    t = model.schedule.check_t(t)
    ab = float(model.schedule.alpha_bar[t])
    xt = ad.as_tensor(x_tilde)
    if xt.ndim == 1:
        xt = ad.reshape(xt, (1, xt.shape[0]))
    eps0 = model.predict_eps(xt, 0)
    return ad.add(ad.mul_scalar(xt, np.sqrt(ab)), ad.mul_scalar(eps0, np.sqrt(1.0 - ab)))


def _mean_simple_loss(model: EpsMlpDiffusion, x0: np.ndarray, ts: np.ndarray,
                      eps_draws: np.ndarray) -> float:
    """Average reconstruction loss over fixed (t, eps) evaluation pairs."""
    vals = []
    for t, eps in zip(ts, eps_draws):
        xt = model.noised(x0, int(t), np.broadcast_to(eps, x0.shape))
        pred = model.predict_eps(xt, int(t)).data
        vals.append(float(((pred - eps) ** 2).sum(axis=1).mean()))
    return float(np.mean(vals))


def train_diffusion(data: DiffDataset, member_ids, test_ids, hyper: DiffusionHyper,
                    rng: Rng) -> tuple[EpsMlpDiffusion, TrainReport]:
    """Fit the noise predictor on member points, freeze, report overfit.

    rho compares the simple loss on held-out vs training points using a
    shared set of (t, eps) evaluation pairs so the comparison is paired.
    """
    member_ids = np.asarray(list(member_ids), dtype=np.int64)
    test_ids = np.asarray(list(test_ids), dtype=np.int64)
    x_train = data.points[member_ids]
    x_test = data.points[test_ids]
    dim = data.points.shape[1]

    schedule = DiffusionSchedule(hyper.timesteps, hyper.beta_start, hyper.beta_end)
    model = EpsMlpDiffusion(dim, schedule, rng, hidden=hyper.hidden)
    opt = Adam(model.parameters(), lr=hyper.lr)
    n = x_train.shape[0]
    for step in range(hyper.steps):
        idx = rng.integers(0, n, size=min(hyper.batch_size, n))
        ts = rng.integers(1, hyper.timesteps + 1, size=idx.size)
        eps = rng.standard_normal((idx.size, dim))
        opt.zero_grad()
        loss = model.simple_loss(x_train[idx], ts, eps)
        if not np.isfinite(loss.data):
            raise TrainingDivergedError(f"diffusion training diverged at step {step}")
        ad.backward(loss)
        opt.step()

    eval_rng = rng.split("loss-eval")
    eval_ts = eval_rng.integers(1, hyper.timesteps + 1, size=32)
    eval_eps = eval_rng.standard_normal((32, dim))
    train_loss = _mean_simple_loss(model, x_train, eval_ts, eval_eps)
    test_loss = _mean_simple_loss(model, x_test, eval_ts, eval_eps)
    report = TrainReport(train_loss=train_loss, test_loss=test_loss,
                         rho=test_loss / max(train_loss, 1e-300),
                         epochs=hyper.steps, seed=rng.seed)
    model.freeze()
    return model, report
