"""Membership score functions for all three model families.

Sign convention is unified: higher score = more member-like, for every
function here, so the evaluation engine consumes one orientation.

Everything is computed through the autodiff graph so the same code path
serves both plain evaluation (floats out) and pattern optimization
(gradients with respect to the injected perturbation or soft prompt).  With
a zero pattern each probe score reduces *bitwise* to its baseline:

* ``lm_score`` with no (equivalently, an empty) soft prompt is the
  standardized min-k token score baseline;
* ``diffusion_error`` with ``delta=None`` is the proximal-initialization
  baseline (normalized or raw, per config);
* ``cls_scores`` with ``delta=None`` is the calibrated-confidence baseline.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .models.diffusion import EpsMlpDiffusion
from .models.lm import TinyCausalLm
from .rng import Rng


@dataclass
class LmScoreConfig:
    """Top-k fraction for the standardized token score; k in (0, 1]."""
    min_k_ratio: float = 0.2

    def __post_init__(self):
        if not 0.0 < self.min_k_ratio <= 1.0:
            raise ValueError("min_k_ratio must be in (0, 1]")


@dataclass
class DiffScoreConfig:
    t_probe: int = 15
    p_norm: float = 2.0
    normalize_eps: bool = True
    n_mc: int = 8          # draws for the stochastic naive score


@dataclass
class ClsScoreConfig:
    use_reference: bool = True
    ni_mode: str = "constant_one"      # or "neighbor_mean"
    ni_radius: float = 0.1
    ni_neighbors: int = 8

    def __post_init__(self):
        if self.ni_mode not in ("constant_one", "neighbor_mean"):
            raise ValueError(f"unknown ni_mode '{self.ni_mode}'")


def _bottom_k_count(n: int, ratio: float) -> int:
    count = int(ratio * n)
    if count < 1:
        raise ValueError(
            f"top-k selection is empty: ratio {ratio} over {n} positions "
            f"(need length >= {int(np.ceil(1.0 / ratio))})")
    return count


# ---------------------------------------------------------------------------
# Language-model scores
# ---------------------------------------------------------------------------

def lm_score_batch(model: TinyCausalLm, tokens: np.ndarray,
                   soft_prompt=None, cfg: LmScoreConfig | None = None) -> Tensor:
    """Standardized min-k score per sequence, differentiable: (B,).

    Per position, z = (log p(t_i) - vocab mean) / vocab std; the score is the
    mean z over the k-fraction of positions with the lowest z.
    """
    cfg = cfg or LmScoreConfig()
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    logp, mu, sigma = model.token_stat_tensors(tokens, soft_prompt)
    z = ad.div(ad.sub(logp, mu), sigma)
    k = _bottom_k_count(tokens.shape[1], cfg.min_k_ratio)
    order = np.argsort(z.data, axis=1, kind="stable")[:, :k]
    return ad.mean_last(ad.gather_last(z, order))


def lm_score(model: TinyCausalLm, tokens, soft_prompt=None,
             cfg: LmScoreConfig | None = None) -> float:
    """Standardized min-k membership score for one sequence (higher = member)."""
    return float(lm_score_batch(model, tokens, soft_prompt, cfg).data[0])


def lm_loss_scores(model: TinyCausalLm, tokens: np.ndarray) -> np.ndarray:
    """Negated mean next-token cross-entropy per sequence: (B,)."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    if tokens.shape[1] < 2:
        raise ValueError("loss score needs sequence length >= 2")
    return -model.sequence_loss(tokens).data.copy()


def lm_loss_score(model: TinyCausalLm, tokens) -> float:
    return float(lm_loss_scores(model, tokens)[0])


def lm_mink_scores(model: TinyCausalLm, tokens: np.ndarray, k_ratio: float) -> np.ndarray:
    """Mean of the k-fraction lowest token log-likelihoods per sequence."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    logp, _, _ = model.token_stat_tensors(tokens)
    k = _bottom_k_count(tokens.shape[1], k_ratio)
    ordered = np.sort(logp.data, axis=1)[:, :k]
    return ordered.mean(axis=1)


def lm_mink_score(model: TinyCausalLm, tokens, k_ratio: float) -> float:
    return float(lm_mink_scores(model, tokens, k_ratio)[0])


def lm_ref_scores(target: TinyCausalLm, reference: TinyCausalLm,
                  tokens: np.ndarray) -> np.ndarray:
    """Reference-calibrated loss score: loss score under target minus reference."""
    return lm_loss_scores(target, tokens) - lm_loss_scores(reference, tokens)


def lm_ref_score(target: TinyCausalLm, reference: TinyCausalLm, tokens) -> float:
    return float(lm_ref_scores(target, reference, tokens)[0])


# ---------------------------------------------------------------------------
# Diffusion scores
# ---------------------------------------------------------------------------

def normalized_eps(eps: Tensor) -> Tensor:
    """Rescale each row to L1 mass N * sqrt(2/pi), the expected L1 norm of a
    standard normal vector of the same size (scale-free in the input)."""
    n = eps.shape[-1]
    l1 = ad.sum_last(ad.absolute(eps))
    if np.any(l1.data == 0.0):
        raise ZeroDivisionError("normalized_eps: zero L1 mass in a noise estimate")
    scale = float(n) * np.sqrt(2.0 / np.pi)
    return ad.mul_scalar(ad.div(eps, ad.expand_last(l1, n)), scale)


def diffusion_errors(model: EpsMlpDiffusion, x: np.ndarray, delta=None,
                     cfg: DiffScoreConfig | None = None) -> Tensor:
    """Trajectory deviation per sample, differentiable in delta: (B,).

    The probe state x_t is built deterministically from the model's own t=0
    noise estimate; the deviation is the p-norm between the estimate at
    t_probe and the (optionally normalized) t=0 estimate.  Two model queries
    per sample.
    """
    cfg = cfg or DiffScoreConfig()
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.min() < 0.0 or x.max() > 1.0:
        raise ValueError("diffusion inputs must lie in [0, 1]")
    t = model.schedule.check_t(cfg.t_probe)
    xt = ad.constant(x)
    if delta is not None:
        d = ad.as_tensor(delta)
        xt = ad.clamp(ad.add(xt, ad.tile_first(d, x.shape[0])), 0.0, 1.0)
    eps0 = model.predict_eps(xt, 0)
    ab = float(model.schedule.alpha_bar[t])
    probe = ad.add(ad.mul_scalar(xt, np.sqrt(ab)), ad.mul_scalar(eps0, np.sqrt(1.0 - ab)))
    eps_t = model.predict_eps(probe, t)
    anchor = normalized_eps(eps0) if cfg.normalize_eps else eps0
    return ad.lp_norm_last(ad.sub(eps_t, anchor), cfg.p_norm)


def diffusion_error(model: EpsMlpDiffusion, x, delta=None,
                    cfg: DiffScoreConfig | None = None) -> float:
    """Scalar trajectory deviation for one sample (lower = more member-like)."""
    return float(diffusion_errors(model, x, delta, cfg).data[0])


def diffusion_scores(model: EpsMlpDiffusion, x: np.ndarray, delta=None,
                     cfg: DiffScoreConfig | None = None) -> np.ndarray:
    """Membership scores = negated trajectory deviation (higher = member)."""
    return -diffusion_errors(model, x, delta, cfg).data.copy()


def diffusion_naive_scores(model: EpsMlpDiffusion, x: np.ndarray, t_probe: int,
                           rng: Rng, n_mc: int = 8,
                           noise_override: np.ndarray | None = None) -> np.ndarray:
    """Monte-Carlo noise-estimation-error score (higher = member): (B,).

    Fresh standard-normal noise per draw, shared across all samples (common
    random numbers); seed-deterministic.  ``noise_override`` is a test hook
    that substitutes the noise draws.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.min() < 0.0 or x.max() > 1.0:
        raise ValueError("diffusion inputs must lie in [0, 1]")
    t = model.schedule.check_t(t_probe)
    if noise_override is not None:
        draws = np.asarray(noise_override, dtype=np.float64)
    else:
        draws = rng.standard_normal((n_mc, x.shape[1]))
    errs = np.zeros(x.shape[0])
    for eps in draws:
        xt = model.noised(x, t, np.broadcast_to(eps, x.shape))
        pred = model.predict_eps(xt, t).data
        errs += ((pred - eps) ** 2).sum(axis=1)
    return -(errs / draws.shape[0])


def diffusion_naive_score(model: EpsMlpDiffusion, x, t_probe: int, rng: Rng,
                          n_mc: int = 8, noise_override=None) -> float:
    return float(diffusion_naive_scores(model, x, t_probe, rng, n_mc, noise_override)[0])


# ---------------------------------------------------------------------------
# Classifier scores
# ---------------------------------------------------------------------------

def _neighborhood_information(model, x_tilde: Tensor, y: np.ndarray,
                              cfg: ClsScoreConfig, rng: Rng | None) -> Tensor:
    if cfg.ni_mode == "constant_one":
        return ad.constant(np.ones(x_tilde.shape[0]))
    if rng is None:
        raise ValueError("ni_mode=neighbor_mean needs an rng")
    vals = None
    for _ in range(cfg.ni_neighbors):
        u = ad.constant(cfg.ni_radius * rng.standard_normal(x_tilde.shape))
        s = ad.gather_last(ad.log_softmax(model.logits(ad.add(x_tilde, u))), y)
        vals = s if vals is None else ad.add(vals, s)
    return ad.mul_scalar(vals, 1.0 / cfg.ni_neighbors)


def cls_score_tensors(target, reference, x: np.ndarray, y: np.ndarray, delta=None,
                      cfg: ClsScoreConfig | None = None, rng: Rng | None = None
                      ) -> tuple[Tensor, Tensor]:
    """Differentiable (s, s_cal) per sample.

    s is the log-confidence of the true class under the target at the
    (optionally pattern-shifted) input; s_cal subtracts the reference model's
    log-confidence and multiplies by the neighborhood term.
    """
    cfg = cfg or ClsScoreConfig()
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    y = np.asarray(y, dtype=np.int64)
    if y.ndim == 0:
        y = y[None]
    if np.any(y < 0) or np.any(y >= target.num_classes):
        raise ValueError("labels out of range")
    xt = ad.constant(x)
    if delta is not None:
        d = ad.as_tensor(delta)
        xt = ad.add(xt, ad.tile_first(d, x.shape[0]))
    s = ad.gather_last(ad.log_softmax(target.logits(xt)), y)
    if cfg.use_reference:
        if reference is None:
            raise ValueError("cls_scores: reference model required by config")
        s_ref = ad.gather_last(ad.log_softmax(reference.logits(xt)), y)
        ni = _neighborhood_information(target, xt, y, cfg, rng)
        s_cal = ad.mul(ad.sub(s, s_ref), ni)
    else:
        s_cal = s
    return s, s_cal


def cls_scores(target, reference, x, y, delta=None,
               cfg: ClsScoreConfig | None = None, rng: Rng | None = None
               ) -> tuple[float, float]:
    """(s, s_cal) for one sample; see cls_score_tensors."""
    s, s_cal = cls_score_tensors(target, reference, x, y, delta, cfg, rng)
    return float(s.data[0]), float(s_cal.data[0])


def cls_score_arrays(target, reference, x, y, delta=None,
                     cfg: ClsScoreConfig | None = None, rng: Rng | None = None
                     ) -> tuple[np.ndarray, np.ndarray]:
    s, s_cal = cls_score_tensors(target, reference, x, y, delta, cfg, rng)
    return s.data.copy(), s_cal.data.copy()
