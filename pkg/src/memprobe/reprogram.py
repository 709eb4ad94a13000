"""Learning the probe pattern: the perturbation or soft prompt optimized on
shadow data against a frozen model to widen the member / non-member score gap.

Every trainer here treats the attacked model as a constant: parameters are
required to be frozen up front and stay bit-identical through optimization.
Only the pattern (and, for the classifier route, a small attack MLP over the
scores) is learned.
"""

from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import scoring
from .autodiff import Tensor
from .models.base import Module
from .models.diffusion import EpsMlpDiffusion
from .models.lm import TinyCausalLm
from .optim import Adam
from .persist import save_checkpoint, load_checkpoint, format_float
from .rng import Rng

SOFT_PROMPT = "soft_prompt"
ADDITIVE = "additive"


class PatternKindError(TypeError):
    """Pattern kind does not match the model family it is applied to."""


class PatternTrainingError(RuntimeError):
    """Non-finite loss or a violated precondition during pattern training."""


@dataclass
class HardMiningConfig:
    """Fraction k of hardest examples kept per side and pairwise margin."""
    k: float = 0.25
    margin: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.k <= 1.0:
            raise ValueError("k must be in (0, 1]")
        if self.margin < 0:
            raise ValueError("margin must be >= 0")


@dataclass
class DiffLossConfig:
    margin: float = 0.5            # eta inside the softplus
    l2_weight: float = 1e-3        # lambda on ||delta||_2
    eps_guard: float = 1e-12       # added before log; set 0 to disable

    def __post_init__(self):
        if self.l2_weight < 0:
            raise ValueError("l2_weight must be >= 0")


@dataclass
class ClsLossConfig:
    sep_weight: float = 1.0        # alpha on the separation term
    reg_weight: float = 1e-3       # beta on ||delta||^2
    sep_margin: float = 1.0        # margin inside the separation softplus

    def __post_init__(self):
        if self.sep_weight < 0 or self.reg_weight < 0:
            raise ValueError("weights must be >= 0")


@dataclass
class PatternOptConfig:
    steps: int = 300
    lr: float = 1e-2               # additive patterns; soft prompts use 1e-3
    batch_size: int = 32
    descent_tolerance: float = 0.25  # sanity band over 50-step windows


@dataclass
class ReprogramPattern:
    """The learned pattern plus the shadow population it was trained on.

    ``values`` is an (L, d) soft-prompt matrix or a (d,) additive vector with
    sup-norm bound ``bound``.  The shadow ids are retained so downstream
    evaluation can enforce the no-leakage guard; ``fingerprint`` condenses
    them for manifests.
    """

    kind: str
    values: np.ndarray
    bound: float | None
    seed: int
    member_ids: tuple[int, ...] = ()
    nonmember_ids: tuple[int, ...] = ()
    curve: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.kind not in (SOFT_PROMPT, ADDITIVE):
            raise ValueError(f"unknown pattern kind '{self.kind}'")
        if self.kind == ADDITIVE:
            if self.values.ndim != 1:
                raise ValueError("additive pattern must be a vector")
            if self.bound is not None and np.abs(self.values).max(initial=0.0) > self.bound + 1e-12:
                raise ValueError("additive pattern violates its sup-norm bound")
        elif self.values.ndim != 2:
            raise ValueError("soft prompt must be an (L, d) matrix")

    @property
    def shadow_ids(self) -> frozenset:
        return frozenset(self.member_ids) | frozenset(self.nonmember_ids)

    @property
    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(repr((sorted(self.member_ids), sorted(self.nonmember_ids), self.seed)).encode())
        return h.hexdigest()[:16]

    @classmethod
    def zero_additive(cls, dim: int, bound: float | None = None, seed: int = 0) -> "ReprogramPattern":
        return cls(kind=ADDITIVE, values=np.zeros(dim), bound=bound, seed=seed)

    @classmethod
    def empty_prompt(cls, embed_dim: int, seed: int = 0) -> "ReprogramPattern":
        """The zero pattern for the LM route: an empty prompt (length 0).

        A zero-valued prompt of positive length still occupies positions and
        attention mass, so only the empty prompt reduces bitwise to the
        baseline score.
        """
        return cls(kind=SOFT_PROMPT, values=np.zeros((0, embed_dim)), bound=None, seed=seed)


def _require_frozen(model: Module) -> None:
    if not getattr(model, "frozen", False):
        raise PatternTrainingError("the attacked model must be frozen before pattern training")


def _mining_count(batch: int, k: float) -> int:
    need = int(np.ceil(1.0 / k))
    if batch < need:
        raise PatternTrainingError(f"batch size {batch} < ceil(1/k) = {need}; hard sets would be empty")
    return max(1, int(k * batch))


def _descent_sanity(curve: np.ndarray, tolerance: float, window: int = 50) -> None:
    if curve.size <= window:
        return
    rises = curve[window:] - curve[:-window]
    worst = float(rises.max())
    if worst > tolerance:
        warnings.warn(
            f"pattern loss rose by {worst:.4f} over a {window}-step window "
            f"(tolerance {tolerance}); optimization may be unstable", RuntimeWarning)


def _finite_or_raise(loss: Tensor, step: int) -> None:
    if not np.isfinite(loss.data):
        raise PatternTrainingError(f"non-finite pattern loss at step {step}")


# ---------------------------------------------------------------------------
# Soft prompt (LM family)
# ---------------------------------------------------------------------------

def train_soft_prompt(model: TinyCausalLm, member_seqs: np.ndarray,
                      nonmember_seqs: np.ndarray, prompt_len: int,
                      mining: HardMiningConfig | None = None,
                      score_cfg: scoring.LmScoreConfig | None = None,
                      opt_cfg: PatternOptConfig | None = None,
                      rng: Rng | None = None,
                      member_ids=(), nonmember_ids=()) -> ReprogramPattern:
    """Optimize a soft prompt so member scores rise above non-member scores.

    Per batch the members with the lowest scores and the non-members with the
    highest scores are kept (hard-example mining, fraction k per side) and a
    softplus margin loss is averaged over their cartesian pairing:
    mean softplus(S(z) - S(x) + margin).  Scores enter as raw differences;
    a log transform of exponentiated scores would be the identity and is
    therefore not a separate code path.
    """
    _require_frozen(model)
    mining = mining or HardMiningConfig()
    score_cfg = score_cfg or scoring.LmScoreConfig()
    opt_cfg = opt_cfg or PatternOptConfig(lr=1e-3)
    if rng is None:
        raise ValueError("rng is required")
    member_seqs = np.asarray(member_seqs, dtype=np.int64)
    nonmember_seqs = np.asarray(nonmember_seqs, dtype=np.int64)
    if prompt_len < 1:
        raise ValueError("prompt_len must be >= 1")

    prompt = Tensor(np.zeros((prompt_len, model.embed_dim)), requires_grad=True)
    opt = Adam({"prompt": prompt}, lr=opt_cfg.lr)
    batch = min(opt_cfg.batch_size, member_seqs.shape[0], nonmember_seqs.shape[0])
    h = _mining_count(batch, mining.k)

    curve = np.zeros(opt_cfg.steps)
    for step in range(opt_cfg.steps):
        im = rng.choice(member_seqs.shape[0], size=batch, replace=False)
        inm = rng.choice(nonmember_seqs.shape[0], size=batch, replace=False)
        sm = scoring.lm_score_batch(model, member_seqs[im], prompt, score_cfg)
        snm = scoring.lm_score_batch(model, nonmember_seqs[inm], prompt, score_cfg)
        hard_m = ad.take_flat(sm, np.argsort(sm.data, kind="stable")[:h])
        hard_nm = ad.take_flat(snm, np.argsort(snm.data, kind="stable")[::-1][:h])
        diff = ad.sub(ad.tile_first(hard_nm, h), ad.expand_last(hard_m, h))
        loss = ad.mean(ad.softplus(ad.add_scalar(diff, mining.margin)))
        _finite_or_raise(loss, step)
        curve[step] = float(loss.data)
        opt.zero_grad()
        ad.backward(loss)
        opt.step()

    _descent_sanity(curve, opt_cfg.descent_tolerance)
    return ReprogramPattern(kind=SOFT_PROMPT, values=prompt.data.copy(), bound=None,
                            seed=rng.seed, member_ids=tuple(member_ids),
                            nonmember_ids=tuple(nonmember_ids), curve=curve)


# ---------------------------------------------------------------------------
# Additive pattern (diffusion family)
# ---------------------------------------------------------------------------

def train_diffusion_pattern(model: EpsMlpDiffusion, member_x: np.ndarray,
                            nonmember_x: np.ndarray,
                            loss_cfg: DiffLossConfig | None = None,
                            bound: float = 16.0 / 255.0,
                            score_cfg: scoring.DiffScoreConfig | None = None,
                            opt_cfg: PatternOptConfig | None = None,
                            rng: Rng | None = None,
                            member_ids=(), nonmember_ids=()) -> ReprogramPattern:
    """Optimize the additive perturbation by the trajectory-deviation margin.

    Per step a batch of (member, non-member) pairs is drawn and the loss
    mean softplus(log E(x_m) - log E(x_nm) + margin) + l2_weight * ||delta||_2
    is descended; after every update delta is projected back to the sup-norm
    ball of radius ``bound``.
    """
    _require_frozen(model)
    loss_cfg = loss_cfg or DiffLossConfig()
    score_cfg = score_cfg or scoring.DiffScoreConfig()
    opt_cfg = opt_cfg or PatternOptConfig()
    if rng is None:
        raise ValueError("rng is required")
    if bound < 0:
        raise ValueError("bound must be >= 0")
    member_x = np.asarray(member_x, dtype=np.float64)
    nonmember_x = np.asarray(nonmember_x, dtype=np.float64)
    dim = member_x.shape[1]

    delta = Tensor(np.zeros(dim), requires_grad=True)
    opt = Adam({"delta": delta}, lr=opt_cfg.lr)
    batch = min(opt_cfg.batch_size, member_x.shape[0], nonmember_x.shape[0])

    curve = np.zeros(opt_cfg.steps)
    for step in range(opt_cfg.steps):
        im = rng.choice(member_x.shape[0], size=batch, replace=False)
        inm = rng.choice(nonmember_x.shape[0], size=batch, replace=False)
        err_m = scoring.diffusion_errors(model, member_x[im], delta, score_cfg)
        err_nm = scoring.diffusion_errors(model, nonmember_x[inm], delta, score_cfg)
        if loss_cfg.eps_guard > 0:
            log_m = ad.log(ad.add_scalar(err_m, loss_cfg.eps_guard))
            log_nm = ad.log(ad.add_scalar(err_nm, loss_cfg.eps_guard))
        else:
            log_m, log_nm = ad.log(err_m), ad.log(err_nm)
        margin = ad.add_scalar(ad.sub(log_m, log_nm), loss_cfg.margin)
        loss = ad.mean(ad.softplus(margin))
        if loss_cfg.l2_weight > 0:
            loss = ad.add(loss, ad.mul_scalar(ad.l2_norm(delta), loss_cfg.l2_weight))
        _finite_or_raise(loss, step)
        curve[step] = float(loss.data)
        opt.zero_grad()
        ad.backward(loss)
        opt.step()
        np.clip(delta.data, -bound, bound, out=delta.data)
        assert np.abs(delta.data).max(initial=0.0) <= bound + 1e-12

    _descent_sanity(curve, opt_cfg.descent_tolerance)
    return ReprogramPattern(kind=ADDITIVE, values=delta.data.copy(), bound=bound,
                            seed=rng.seed, member_ids=tuple(member_ids),
                            nonmember_ids=tuple(nonmember_ids), curve=curve)


# ---------------------------------------------------------------------------
# Additive pattern (classifier family)
# ---------------------------------------------------------------------------

def train_cls_pattern(target, reference, member_x, member_y, nonmember_x, nonmember_y,
                      loss_cfg: ClsLossConfig | None = None,
                      bound: float = 16.0 / 255.0,
                      score_cfg: scoring.ClsScoreConfig | None = None,
                      opt_cfg: PatternOptConfig | None = None,
                      rng: Rng | None = None,
                      member_ids=(), nonmember_ids=()
                      ) -> tuple[ReprogramPattern, dict[str, np.ndarray]]:
    """Optimize the classifier perturbation with the three-part objective.

    preservation (members stay correctly classified after the shift) +
    sep_weight * softplus(sep_margin - (mean s_cal_m - mean s_cal_nm)) +
    reg_weight * ||delta||^2.  Returns the pattern and per-step traces of the
    three components.
    """
    _require_frozen(target)
    if reference is not None:
        _require_frozen(reference)
    loss_cfg = loss_cfg or ClsLossConfig()
    score_cfg = score_cfg or scoring.ClsScoreConfig()
    opt_cfg = opt_cfg or PatternOptConfig()
    if rng is None:
        raise ValueError("rng is required")
    member_x = np.asarray(member_x, dtype=np.float64)
    nonmember_x = np.asarray(nonmember_x, dtype=np.float64)
    member_y = np.asarray(member_y, dtype=np.int64)
    nonmember_y = np.asarray(nonmember_y, dtype=np.int64)
    dim = member_x.shape[1]

    delta = Tensor(np.zeros(dim), requires_grad=True)
    opt = Adam({"delta": delta}, lr=opt_cfg.lr)
    batch = min(opt_cfg.batch_size, member_x.shape[0], nonmember_x.shape[0])
    traces = {k: np.zeros(opt_cfg.steps) for k in ("preserve", "sep", "reg", "total")}

    for step in range(opt_cfg.steps):
        im = rng.choice(member_x.shape[0], size=batch, replace=False)
        inm = rng.choice(nonmember_x.shape[0], size=batch, replace=False)
        xm, ym = member_x[im], member_y[im]
        xnm, ynm = nonmember_x[inm], nonmember_y[inm]

        shifted = ad.add(ad.constant(xm), ad.tile_first(delta, xm.shape[0]))
        preserve = ad.cross_entropy(target.logits(shifted), ym)
        _, cal_m = scoring.cls_score_tensors(target, reference, xm, ym, delta, score_cfg, rng=None)
        _, cal_nm = scoring.cls_score_tensors(target, reference, xnm, ynm, delta, score_cfg, rng=None)
        gap = ad.sub(ad.mean(cal_m), ad.mean(cal_nm))
        sep = ad.softplus(ad.add_scalar(ad.neg(gap), loss_cfg.sep_margin))
        reg = ad.tsum(ad.square(delta))
        loss = ad.add(preserve, ad.add(ad.mul_scalar(sep, loss_cfg.sep_weight),
                                       ad.mul_scalar(reg, loss_cfg.reg_weight)))
        _finite_or_raise(loss, step)
        traces["preserve"][step] = float(preserve.data)
        traces["sep"][step] = float(sep.data)
        traces["reg"][step] = float(reg.data)
        traces["total"][step] = float(loss.data)
        opt.zero_grad()
        ad.backward(loss)
        opt.step()
        np.clip(delta.data, -bound, bound, out=delta.data)
        assert np.abs(delta.data).max(initial=0.0) <= bound + 1e-12

    _descent_sanity(traces["total"], opt_cfg.descent_tolerance)
    pattern = ReprogramPattern(kind=ADDITIVE, values=delta.data.copy(), bound=bound,
                               seed=rng.seed, member_ids=tuple(member_ids),
                               nonmember_ids=tuple(nonmember_ids), curve=traces["total"])
    return pattern, traces


# ---------------------------------------------------------------------------
# Attack classifier (classifier family)
# ---------------------------------------------------------------------------

@dataclass
class AttackMlpHyper:
    hidden: int = 16
    steps: int = 400
    lr: float = 1e-2


class AttackMlp(Module):
    """One-hidden-layer MLP mapping (s, s_cal, one-hot y) to P(member)."""

    def __init__(self, input_dim: int, hidden: int, rng: Rng):
        super().__init__()
        self.input_dim = int(input_dim)
        self._param("w0", np.sqrt(2.0 / input_dim) * rng.standard_normal((input_dim, hidden)))
        self._param("b0", np.zeros(hidden))
        self._param("w1", np.sqrt(1.0 / hidden) * rng.standard_normal((hidden, 1)))
        self._param("b1", np.zeros(1))

    def logit(self, features) -> Tensor:
        f = ad.as_tensor(features)
        if f.ndim == 1:
            f = ad.reshape(f, (1, f.shape[0]))
        h = ad.relu(ad.add_tail(ad.matmul(f, self._params["w0"]), self._params["b0"]))
        z = ad.add_tail(ad.matmul(h, self._params["w1"]), self._params["b1"])
        return ad.reshape(z, (f.shape[0],))

    def predict_proba(self, features: np.ndarray) -> np.ndarray:
        return ad.sigmoid(self.logit(features)).data.copy()


def attack_features(s: np.ndarray, s_cal: np.ndarray, y: np.ndarray,
                    num_classes: int) -> np.ndarray:
    """Stack (s, s_cal, one-hot label) into the attack MLP feature matrix."""
    y = np.asarray(y, dtype=np.int64)
    onehot = np.zeros((y.size, num_classes))
    onehot[np.arange(y.size), y] = 1.0
    return np.column_stack([np.asarray(s, dtype=np.float64),
                            np.asarray(s_cal, dtype=np.float64), onehot])


def train_attack_mlp(features: np.ndarray, labels: np.ndarray,
                     hyper: AttackMlpHyper | None = None,
                     rng: Rng | None = None) -> AttackMlp:
    """Fit the attack MLP with binary cross-entropy on shadow features."""
    hyper = hyper or AttackMlpHyper()
    if rng is None:
        raise ValueError("rng is required")
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if len(np.unique(labels)) < 2:
        raise ValueError("attack MLP needs both member and non-member shadow labels")

    model = AttackMlp(features.shape[1], hyper.hidden, rng)
    opt = Adam(model.parameters(), lr=hyper.lr)
    y = ad.constant(labels)
    for step in range(hyper.steps):
        z = model.logit(features)
        # stable BCE from logits: softplus(z) - y*z
        loss = ad.mean(ad.sub(ad.softplus(z), ad.mul(y, z)))
        _finite_or_raise(loss, step)
        opt.zero_grad()
        ad.backward(loss)
        opt.step()
    return model


# ---------------------------------------------------------------------------
# Inference dispatch
# ---------------------------------------------------------------------------

def infer(pattern: ReprogramPattern, model, sample, *, reference=None,
          label=None, attack_mlp: AttackMlp | None = None,
          lm_cfg: scoring.LmScoreConfig | None = None,
          diff_cfg: scoring.DiffScoreConfig | None = None,
          cls_cfg: scoring.ClsScoreConfig | None = None) -> float:
    """Score one sample with the pattern applied (higher = more member-like).

    Dispatches on the pattern kind and model family; a zero pattern
    reproduces the matching baseline score bitwise.
    """
    if pattern.kind == SOFT_PROMPT:
        if not hasattr(model, "token_stat_tensors"):
            raise PatternKindError("soft prompt patterns apply to the causal LM only")
        prompt = pattern.values if pattern.values.shape[0] > 0 else None
        return scoring.lm_score(model, sample, prompt, lm_cfg)
    if hasattr(model, "token_stat_tensors"):
        raise PatternKindError("additive patterns do not apply to the causal LM")
    if hasattr(model, "predict_eps"):
        return -scoring.diffusion_error(model, sample, pattern.values, diff_cfg)
    if hasattr(model, "num_classes"):
        if label is None:
            raise ValueError("classifier inference needs the sample label")
        s, s_cal = scoring.cls_scores(model, reference, sample, label,
                                      pattern.values, cls_cfg)
        if attack_mlp is not None:
            feats = attack_features(np.array([s]), np.array([s_cal]),
                                    np.array([label]), model.num_classes)
            return float(attack_mlp.predict_proba(feats)[0])
        return s_cal
    raise PatternKindError(f"additive pattern does not apply to {type(model).__name__}")


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def save_pattern(path, pattern: ReprogramPattern) -> None:
    header = {
        "kind": pattern.kind,
        "bound": pattern.bound,
        "seed": pattern.seed,
        "fingerprint": pattern.fingerprint,
        "member_ids": list(map(int, pattern.member_ids)),
        "nonmember_ids": list(map(int, pattern.nonmember_ids)),
    }
    save_checkpoint(path, header, {"values": pattern.values})
    if pattern.curve is not None:
        lines = ["step,loss"]
        lines += [f"{i},{format_float(v)}" for i, v in enumerate(pattern.curve)]
        with open(str(path) + ".curve.csv", "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")


def load_pattern(path) -> ReprogramPattern:
    header, tensors = load_checkpoint(path)
    return ReprogramPattern(kind=header["kind"], values=tensors["values"],
                            bound=header["bound"], seed=int(header["seed"]),
                            member_ids=tuple(header["member_ids"]),
                            nonmember_ids=tuple(header["nonmember_ids"]))
