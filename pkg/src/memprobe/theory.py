"""Numerical verification lab for the mathematics behind the attack.

Checks, on desk-scale models and closed-form toys: the exact decomposition
of the input-space Hessian of cross-entropy into a Jacobian/softmax-covariance
form plus a curvature residual; the trace bound of the softmax covariance at
high confidence; the member / non-member spectral gap of overfit models; the
dominance of the non-member gradient stream; loss-gap amplification under a
trained pattern; the Gaussian Jensen-Shannon divergence (monotone in the mean
separation, saturating at log 2); and mutual-information estimates between
scores and membership.

Assumption constants from the source analysis (Jacobian singular-value
bounds, residual bounds, dispersion slopes) are non-operational here: the lab
verifies signs and directions, never the constants.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy.integrate import simpson

from . import autodiff as ad
from .autodiff import Tensor
from .rng import Rng


# ---------------------------------------------------------------------------
# Softmax covariance
# ---------------------------------------------------------------------------

@dataclass
class SoftmaxCov:
    p: np.ndarray
    matrix: np.ndarray

    @property
    def trace(self) -> float:
        return float(np.trace(self.matrix))


def softmax_cov(p) -> SoftmaxCov:
    """C(p) = diag(p) - p p^T with its invariants asserted on construction.

    C is symmetric PSD with zero row sums and tr C = 1 - ||p||^2; when the
    top entry is at least 1 - eps the trace is bounded by 2 eps.
    """
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1:
        raise ValueError("p must be a vector")
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise ValueError("p must be a probability vector (sum within 1e-9 of 1)")
    c = np.diag(p) - np.outer(p, p)
    assert np.allclose(c, c.T, atol=1e-15)
    assert np.allclose(c.sum(axis=1), 0.0, atol=1e-12)
    assert abs(np.trace(c) - (1.0 - float(p @ p))) < 1e-12
    assert np.linalg.eigvalsh(c).min() > -1e-12
    return SoftmaxCov(p=p, matrix=c)


# ---------------------------------------------------------------------------
# Hessian decomposition and spectra
# ---------------------------------------------------------------------------

@dataclass
class HessianProbe:
    jacobian: np.ndarray          # (K, d) class-logit input gradients
    h_fd: np.ndarray              # (d, d) finite-difference Hessian of the loss
    structured: np.ndarray        # J^T C J
    residual_fd: np.ndarray | None
    rel_residual_structured: float    # ||H - J^T C J||_F / ||H||_F
    rel_residual_full: float | None   # with the finite-difference residual term
    symmetry_defect: float
    fd_step: float


def _class_gradient(model, x: np.ndarray, k: int) -> np.ndarray:
    n_out = model.num_classes
    return ad.input_gradient(
        lambda t: ad.narrow(ad.reshape(model.logits(t), (n_out,)), 0, k, 1), x)


def _loss_gradient(model, x: np.ndarray, y: int) -> np.ndarray:
    return ad.input_gradient(lambda t: model.loss(t, np.array([y])), x)


def _fd_hessian(grad_fn, x: np.ndarray, h: float) -> np.ndarray:
    d = x.size
    hess = np.zeros((d, d))
    for j in range(d):
        e = np.zeros(d)
        e[j] = h
        hess[:, j] = (grad_fn(x + e) - grad_fn(x - e)) / (2.0 * h)
    return hess


def verify_hessian_decomposition(model, x, y: int, h: float = 1e-4,
                                 max_dim: int = 16) -> HessianProbe:
    """Check H = J^T C(p) J (+ residual) against a finite-difference Hessian.

    For a linear-softmax model the residual vanishes and the structured form
    alone matches; for a nonlinear model the residual is assembled from
    finite-difference class Hessians weighted by (p_k - [k = y]).
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    d = x.size
    if d > max_dim:
        raise ValueError(f"input dim {d} exceeds dense finite-difference limit {max_dim}")
    k_classes = model.num_classes

    jac = np.stack([_class_gradient(model, x, k) for k in range(k_classes)])
    p = np.exp(model.log_probs(x).data[0])
    structured = jac.T @ softmax_cov(p).matrix @ jac
    h_fd = _fd_hessian(lambda z: _loss_gradient(model, z, y), x, h)
    sym_defect = float(np.linalg.norm(h_fd - h_fd.T) / max(np.linalg.norm(h_fd), 1e-300))

    h_norm = max(float(np.linalg.norm(h_fd)), 1e-300)
    rel_structured = float(np.linalg.norm(h_fd - structured) / h_norm)

    is_linear = getattr(model, "n_layers", None) == 1
    residual_fd = None
    rel_full = None
    if not is_linear:
        residual_fd = np.zeros((d, d))
        onehot = np.zeros(k_classes)
        onehot[y] = 1.0
        for k in range(k_classes):
            class_hess = _fd_hessian(lambda z, k=k: _class_gradient(model, z, k), x, h)
            residual_fd += (p[k] - onehot[k]) * class_hess
        rel_full = float(np.linalg.norm(h_fd - structured - residual_fd) / h_norm)

    return HessianProbe(jacobian=jac, h_fd=h_fd, structured=structured,
                        residual_fd=residual_fd,
                        rel_residual_structured=rel_structured,
                        rel_residual_full=rel_full,
                        symmetry_defect=sym_defect, fd_step=h)


@dataclass
class PowerIterResult:
    value: float
    converged: bool
    iterations: int


def hessian_lambda_max(grad_fn, x: np.ndarray, power_iters: int = 50,
                       h: float = 1e-4, rng: Rng | None = None,
                       tol: float = 1e-7) -> PowerIterResult:
    """Dominant-magnitude Hessian eigenvalue by power iteration on the
    finite-difference Hessian-vector product v -> (g(x+hv) - g(x-hv)) / 2h.

    Reports the Rayleigh quotient.  For cross-entropy at confident points the
    spectrum is PSD-dominated, so the dominant-magnitude eigenvalue is the
    top one; for indefinite spectra it is the largest in absolute value.
    """
    if power_iters < 20:
        raise ValueError("power_iters must be >= 20")
    if rng is None:
        rng = Rng(0)
    x = np.asarray(x, dtype=np.float64)
    v = rng.standard_normal(x.shape)
    v /= np.linalg.norm(v)
    value = 0.0
    for it in range(1, power_iters + 1):
        hv = (grad_fn(x + h * v) - grad_fn(x - h * v)) / (2.0 * h)
        norm = np.linalg.norm(hv)
        if norm < 1e-300:
            return PowerIterResult(0.0, True, it)
        new_value = float(v @ hv)
        v = hv / norm
        if it > 1 and abs(new_value - value) <= tol * max(1.0, abs(new_value)):
            return PowerIterResult(new_value, True, it)
        value = new_value
    return PowerIterResult(value, False, power_iters)


def classifier_lambda_max(model, x, y: int, power_iters: int = 50, h: float = 1e-4,
                          rng: Rng | None = None) -> PowerIterResult:
    """Top input-Hessian eigenvalue of the cross-entropy loss at (x, y)."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    return hessian_lambda_max(lambda z: _loss_gradient(model, z, int(y)), x,
                              power_iters=power_iters, h=h, rng=rng)


@dataclass
class SpectralGapResult:
    member_mean: float
    nonmember_mean: float
    gap: float                   # nonmember mean - member mean
    member_se: float
    nonmember_se: float
    gap_se: float
    dispersion_alpha: float      # 1 - E ||p(x_nm)||^2
    member_values: np.ndarray
    nonmember_values: np.ndarray


def spectral_gap_experiment(model, member_x, member_y, nonmember_x, nonmember_y,
                            power_iters: int = 40, h: float = 1e-4,
                            rng: Rng | None = None, min_samples: int = 32
                            ) -> SpectralGapResult:
    """Mean top Hessian eigenvalue per population and their gap.

    On an overfit model the non-member side is expected to dominate; on an
    untrained model the gap is statistically indistinguishable from zero.
    Also reports the output-dispersion level on non-members, which lies in
    [0, 1 - 1/K] for a K-class softmax.
    """
    member_x = np.asarray(member_x, dtype=np.float64)
    nonmember_x = np.asarray(nonmember_x, dtype=np.float64)
    if member_x.shape[0] < min_samples or nonmember_x.shape[0] < min_samples:
        raise ValueError(f"need at least {min_samples} samples per side")
    rng = rng or Rng(0)

    def side(xs, ys, tag):
        side_rng = rng.split(tag)
        return np.array([classifier_lambda_max(model, x, int(y), power_iters, h,
                                               side_rng.split(str(i))).value
                         for i, (x, y) in enumerate(zip(xs, ys))])

    mv = side(member_x, member_y, "member")
    nv = side(nonmember_x, nonmember_y, "nonmember")
    p_nm = np.exp(model.log_probs(nonmember_x).data)
    alpha = float(1.0 - (p_nm * p_nm).sum(axis=1).mean())
    m_se = float(mv.std(ddof=1) / np.sqrt(mv.size))
    n_se = float(nv.std(ddof=1) / np.sqrt(nv.size))
    return SpectralGapResult(member_mean=float(mv.mean()), nonmember_mean=float(nv.mean()),
                             gap=float(nv.mean() - mv.mean()), member_se=m_se,
                             nonmember_se=n_se, gap_se=float(np.hypot(m_se, n_se)),
                             dispersion_alpha=alpha, member_values=mv, nonmember_values=nv)


# ---------------------------------------------------------------------------
# Gradient streams
# ---------------------------------------------------------------------------

@dataclass
class GradientStreamResult:
    g1_norm: float               # aggregated member stream
    g2_norm: float               # aggregated non-member stream
    member_sensitivity: float    # mean ||w_m||
    nonmember_sensitivity: float


def _log_conf_grad(model, x: np.ndarray, y: int) -> np.ndarray:
    """Input gradient of the membership score log p_y; equals J^T w with
    w = e_y - p at the model output."""
    return ad.input_gradient(
        lambda t: ad.tsum(ad.gather_last(ad.log_softmax(model.logits(t)), np.array([y]))), x)


def gradient_streams(model, member_x, member_y, nonmember_x, nonmember_y
                     ) -> GradientStreamResult:
    """Aggregated input-space score-gradient norms at zero pattern.

    The streams are || E[grad score] || per population; on memorized points
    the score-sensitivity vector w = e_y - p vanishes, so the member stream
    should be the smaller one once the model is overfit.
    """
    member_x = np.asarray(member_x, dtype=np.float64)
    nonmember_x = np.asarray(nonmember_x, dtype=np.float64)
    gm = np.stack([_log_conf_grad(model, x, int(y)) for x, y in zip(member_x, member_y)])
    gn = np.stack([_log_conf_grad(model, x, int(y)) for x, y in zip(nonmember_x, nonmember_y)])

    def sensitivity(xs, ys):
        p = np.exp(model.log_probs(xs).data)
        onehot = np.zeros_like(p)
        onehot[np.arange(len(ys)), np.asarray(ys, dtype=int)] = 1.0
        return float(np.linalg.norm(onehot - p, axis=1).mean())

    return GradientStreamResult(
        g1_norm=float(np.linalg.norm(gm.mean(axis=0))),
        g2_norm=float(np.linalg.norm(gn.mean(axis=0))),
        member_sensitivity=sensitivity(member_x, member_y),
        nonmember_sensitivity=sensitivity(nonmember_x, nonmember_y))


# ---------------------------------------------------------------------------
# Loss-gap amplification
# ---------------------------------------------------------------------------

class LeakageError(RuntimeError):
    """Evaluation ids overlap the population the pattern was trained on."""


def check_no_leakage(eval_ids, pattern_shadow_ids) -> None:
    overlap = set(eval_ids) & set(pattern_shadow_ids)
    if overlap:
        raise LeakageError(
            f"evaluation population overlaps the pattern's shadow data: "
            f"{sorted(overlap)[:5]}{'...' if len(overlap) > 5 else ''}")


def loss_gap_report(model, pattern, member_data, nonmember_data,
                    member_ids, nonmember_ids, member_labels=None,
                    nonmember_labels=None) -> tuple[float, float]:
    """Mean loss(non-member) - mean loss(member), without and with pattern.

    ``member_ids`` / ``nonmember_ids`` must be disjoint from the pattern's
    shadow population (hard error otherwise).  Dispatches on the pattern
    kind: sequences use per-sequence cross-entropy, classifier inputs use
    per-sample cross-entropy.
    """
    check_no_leakage(list(member_ids) + list(nonmember_ids), pattern.shadow_ids)

    if pattern.kind == "soft_prompt":
        prompt = pattern.values if pattern.values.shape[0] else None
        base_m = model.sequence_loss(member_data).data
        base_n = model.sequence_loss(nonmember_data).data
        pat_m = model.sequence_loss(member_data, prompt).data
        pat_n = model.sequence_loss(nonmember_data, prompt).data
    else:
        if member_labels is None or nonmember_labels is None:
            raise ValueError("classifier loss gap needs labels")

        def per_sample_ce(x, y, delta):
            xt = ad.constant(np.asarray(x, dtype=np.float64))
            if delta is not None:
                xt = ad.add(xt, ad.tile_first(ad.constant(delta), xt.shape[0]))
            logp = ad.gather_last(ad.log_softmax(model.logits(xt)), np.asarray(y, dtype=np.int64))
            return -logp.data

        base_m = per_sample_ce(member_data, member_labels, None)
        base_n = per_sample_ce(nonmember_data, nonmember_labels, None)
        pat_m = per_sample_ce(member_data, member_labels, pattern.values)
        pat_n = per_sample_ce(nonmember_data, nonmember_labels, pattern.values)

    gap_base = float(base_n.mean() - base_m.mean())
    gap_delta = float(pat_n.mean() - pat_m.mean())
    return gap_base, gap_delta


# ---------------------------------------------------------------------------
# Gaussian JSD, mutual information, stochastic-order checks
# ---------------------------------------------------------------------------

@dataclass
class GaussianScorePair:
    mu0: float
    mu1: float
    sigma: float

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")

    @property
    def delta(self) -> float:
        return self.mu1 - self.mu0


def gaussian_jsd(pair: GaussianScorePair, n_nodes: int = 4001,
                 span_sigmas: float = 12.0) -> float:
    """Jensen-Shannon divergence of two equal-variance Gaussians, in nats.

    Quadrature (composite Simpson, >= 2000 nodes) over +-span_sigmas around
    both means; each KL term integrates p log(p/m) against the equal-weight
    mixture.  The value is 0 at equal means and saturates at log 2.
    """
    if n_nodes < 2001:
        raise ValueError("use at least 2001 quadrature nodes")
    mu0, mu1, sigma = pair.mu0, pair.mu1, pair.sigma
    lo = min(mu0, mu1) - span_sigmas * sigma
    hi = max(mu0, mu1) + span_sigmas * sigma
    grid = np.linspace(lo, hi, n_nodes)

    def pdf(mu):
        z = (grid - mu) / sigma
        return np.exp(-0.5 * z * z) / (sigma * np.sqrt(2.0 * np.pi))

    p, q = pdf(mu1), pdf(mu0)
    m = 0.5 * (p + q)
    with np.errstate(divide="ignore", invalid="ignore"):
        ip = np.where(p > 0, p * (np.log(np.maximum(p, 1e-320)) - np.log(np.maximum(m, 1e-320))), 0.0)
        iq = np.where(q > 0, q * (np.log(np.maximum(q, 1e-320)) - np.log(np.maximum(m, 1e-320))), 0.0)
    return float(0.5 * simpson(ip, x=grid) + 0.5 * simpson(iq, x=grid))


def mi_estimate(member_scores, nonmember_scores, estimator: str = "gaussian_fit",
                bins: int = 32) -> float:
    """Mutual information (nats) between the membership bit and the score,
    under equal priors, where it coincides with the JSD of the two score
    distributions.  Bounded by log 2 up to estimator error.

    ``gaussian_fit`` fits per-class means and a pooled std, then evaluates
    the Gaussian JSD; ``histogram`` is a plug-in discrete JSD over shared
    bins.  A degenerate pooled variance falls back to the histogram with a
    warning.
    """
    m = np.asarray(member_scores, dtype=np.float64)
    n = np.asarray(nonmember_scores, dtype=np.float64)
    if m.size == 0 or n.size == 0:
        raise ValueError("both score sets must be non-empty")

    if estimator == "gaussian_fit":
        pooled_var = (((m - m.mean()) ** 2).sum() + ((n - n.mean()) ** 2).sum()) / (m.size + n.size)
        if pooled_var <= 0:
            warnings.warn("degenerate variance in gaussian_fit; falling back to histogram",
                          RuntimeWarning)
            return mi_estimate(m, n, estimator="histogram", bins=bins)
        return gaussian_jsd(GaussianScorePair(mu0=float(n.mean()), mu1=float(m.mean()),
                                              sigma=float(np.sqrt(pooled_var))))
    if estimator == "histogram":
        lo = min(m.min(), n.min())
        hi = max(m.max(), n.max())
        if hi == lo:
            return 0.0
        edges = np.linspace(lo, hi, bins + 1)
        pm = np.histogram(m, bins=edges)[0] / m.size
        pn = np.histogram(n, bins=edges)[0] / n.size
        mix = 0.5 * (pm + pn)

        def kl(p):
            mask = p > 0
            return float((p[mask] * (np.log(p[mask]) - np.log(mix[mask]))).sum())

        return 0.5 * kl(pm) + 0.5 * kl(pn)
    raise ValueError(f"unknown estimator '{estimator}'")


@dataclass
class MonotoneCheckResult:
    deltas: np.ndarray
    values: np.ndarray
    strictly_increasing: bool
    mc_se: float


def score_margin_monotone_check(phi, sigma: float, deltas, n_mc: int = 100_000,
                                rng: Rng | None = None) -> MonotoneCheckResult:
    """Estimate H(delta) = E phi(N(delta, 2 sigma^2)) on a grid by Monte Carlo
    with common random numbers.

    Under common draws the pairwise differences are positive term-by-term for
    a strictly increasing phi, so the estimated curve must be strictly
    increasing; the result records the curve and its standard error.
    """
    rng = rng or Rng(0)
    deltas = np.asarray(sorted(float(d) for d in deltas))
    z = rng.standard_normal(n_mc)
    values = []
    for d in deltas:
        draws = phi(d + np.sqrt(2.0) * sigma * z)
        values.append(float(np.mean(draws)))
    values = np.asarray(values)
    se = float(np.std(phi(deltas[-1] + np.sqrt(2.0) * sigma * z), ddof=1) / np.sqrt(n_mc))
    return MonotoneCheckResult(deltas=deltas, values=values,
                               strictly_increasing=bool(np.all(np.diff(values) > 0)),
                               mc_se=se)


def degraded_channel_check(delta1: float, sigma: float, r: float, n_mc: int = 200_000,
                           rng: Rng | None = None, estimator: str = "gaussian_fit"
                           ) -> tuple[float, float]:
    """Estimate MI before and after mixing X2 = r X1 + Z, Var Z = (1-r^2) s^2.

    The mixed variable has conditional law N(+-r delta1 / 2, sigma^2), i.e.
    the same family with a shrunk separation, so its MI cannot exceed the
    original (data-processing direction).  Returns (mi_before, mi_after).
    """
    if not 0.0 <= r < 1.0:
        raise ValueError("r must be in [0, 1)")
    rng = rng or Rng(0)
    half = n_mc // 2
    x_member = delta1 / 2.0 + sigma * rng.standard_normal(half)
    x_nonmember = -delta1 / 2.0 + sigma * rng.standard_normal(half)
    z_scale = sigma * np.sqrt(1.0 - r * r)
    mixed_member = r * x_member + z_scale * rng.standard_normal(half)
    mixed_nonmember = r * x_nonmember + z_scale * rng.standard_normal(half)
    before = mi_estimate(x_member, x_nonmember, estimator=estimator)
    after = mi_estimate(mixed_member, mixed_nonmember, estimator=estimator)
    return before, after


# ---------------------------------------------------------------------------
# Aggregated report
# ---------------------------------------------------------------------------

@dataclass
class TheoryReport:
    rho: float = float("nan")
    lambda_max_member_mean: float = float("nan")
    lambda_max_nonmember_mean: float = float("nan")
    spectral_gap: float = float("nan")
    spectral_gap_se: float = float("nan")
    dispersion_alpha: float = float("nan")
    g1_norm: float = float("nan")
    g2_norm: float = float("nan")
    loss_gap_base: float = float("nan")
    loss_gap_delta: float = float("nan")
    mi_base: float = float("nan")
    mi_delta: float = float("nan")
    lin_decomposition_residual: float = float("nan")
    mlp_decomposition_residual: float = float("nan")

    def to_dict(self) -> dict:
        return asdict(self)
