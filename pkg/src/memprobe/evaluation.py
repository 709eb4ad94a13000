"""Attack evaluation: ROC/AUC, TPR at low FPR, balanced accuracy, inference
advantage, output/input-noise defenses, and persisted comparison reports.

Thresholding convention everywhere: a sample is predicted *member* strictly
above the threshold.  AUC uses half-credit for ties (the Mann-Whitney
convention); TPR at a target FPR is conservative (no interpolation): the
best TPR among operating points whose empirical FPR does not exceed the
target, with the achieved FPR recorded.
"""

from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .persist import format_float, write_json
from .rng import Rng


@dataclass(frozen=True)
class ScoredSample:
    id: int
    score: float
    is_member: bool

    def __post_init__(self):
        if not np.isfinite(self.score):
            raise ValueError(f"sample {self.id}: score must be finite")


@dataclass
class RocCurve:
    thresholds: np.ndarray     # descending; one per operating point
    fpr: np.ndarray
    tpr: np.ndarray
    tie_note: str = "ties share an operating point; member iff score > threshold"


@dataclass
class AttackReport:
    attack_name: str
    defense_name: str
    auc: float
    tpr_at: dict[str, float]           # fpr target (as string key) -> tpr
    achieved_fpr: dict[str, float]
    balanced_acc: float
    advantage: float
    threshold: float
    n_members: int
    n_nonmembers: int
    queries: str
    seed: int

    def to_dict(self) -> dict:
        return {
            "attack_name": self.attack_name,
            "defense_name": self.defense_name,
            "auc": self.auc,
            "tpr_at": self.tpr_at,
            "achieved_fpr": self.achieved_fpr,
            "balanced_acc": self.balanced_acc,
            "advantage": self.advantage,
            "threshold": self.threshold,
            "n_members": self.n_members,
            "n_nonmembers": self.n_nonmembers,
            "queries": self.queries,
            "seed": self.seed,
        }


class SingleClassError(ValueError):
    """Metrics need at least one member and one non-member."""


def _split_scores(samples: Sequence[ScoredSample]) -> tuple[np.ndarray, np.ndarray]:
    members = np.array([s.score for s in samples if s.is_member])
    nonmembers = np.array([s.score for s in samples if not s.is_member])
    if members.size == 0 or nonmembers.size == 0:
        raise SingleClassError("need at least one member and one non-member")
    return members, nonmembers


def make_samples(ids, scores, is_member) -> list[ScoredSample]:
    return [ScoredSample(int(i), float(s), bool(m))
            for i, s, m in zip(ids, scores, is_member)]


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def auc(samples: Sequence[ScoredSample]) -> float:
    """Rank-based AUC, equal to the all-pairs Mann-Whitney statistic.

    Ties between a member and a non-member count half.  Computed from
    average ranks after one sort, O(n log n); the numerator is an exact
    half-integer so the value matches the brute-force pair count bitwise.
    """
    members, nonmembers = _split_scores(samples)
    scores = np.concatenate([members, nonmembers])
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(scores.size)
    sorted_scores = scores[order]
    # average ranks over tie groups (1-based)
    boundaries = np.flatnonzero(np.diff(sorted_scores) != 0) + 1
    starts = np.concatenate([[0], boundaries])
    stops = np.concatenate([boundaries, [scores.size]])
    for a, b in zip(starts, stops):
        ranks[order[a:b]] = 0.5 * (a + 1 + b)
    rank_sum = ranks[: members.size].sum()
    u = rank_sum - members.size * (members.size + 1) / 2.0
    return float(u / (members.size * nonmembers.size))


def roc_curve(samples: Sequence[ScoredSample]) -> RocCurve:
    """Empirical step ROC with exact (0,0) and (1,1) endpoints."""
    members, nonmembers = _split_scores(samples)
    thresholds = np.unique(np.concatenate([members, nonmembers]))[::-1]
    fpr = [0.0]
    tpr = [0.0]
    ths = [np.inf]
    for t in thresholds:
        tpr.append(float((members > t).sum() / members.size))
        fpr.append(float((nonmembers > t).sum() / nonmembers.size))
        ths.append(float(t))
    # the lowest threshold admits every sample: endpoint (1, 1)
    return RocCurve(thresholds=np.array(ths), fpr=np.array(fpr), tpr=np.array(tpr))


def tpr_at_fpr_with_achieved(samples: Sequence[ScoredSample],
                             fpr_target: float) -> tuple[float, float]:
    """Conservative TPR at the largest achievable FPR <= target.

    Returns (tpr, achieved fpr).  Warns when the non-member count cannot
    resolve the target (1/n_nonmembers > target), where only the reject-all
    point qualifies.
    """
    if not 0.0 < fpr_target <= 1.0:
        raise ValueError("fpr_target must be in (0, 1]")
    members, nonmembers = _split_scores(samples)
    if 1.0 / nonmembers.size > fpr_target:
        warnings.warn(
            f"fpr target {fpr_target} below the empirical resolution "
            f"1/{nonmembers.size}; result is conservative", RuntimeWarning)
    best_tpr, best_fpr = 0.0, 0.0   # reject-all operating point
    for t in np.unique(np.concatenate([members, nonmembers])):
        fpr = (nonmembers > t).sum() / nonmembers.size
        if fpr <= fpr_target:
            tpr = (members > t).sum() / members.size
            if tpr > best_tpr or (tpr == best_tpr and fpr < best_fpr):
                best_tpr, best_fpr = float(tpr), float(fpr)
    return best_tpr, best_fpr


def tpr_at_fpr(samples: Sequence[ScoredSample], fpr_target: float) -> float:
    return tpr_at_fpr_with_achieved(samples, fpr_target)[0]


def balanced_accuracy(samples: Sequence[ScoredSample]) -> tuple[float, float]:
    """Best (TPR + TNR)/2 over all empirical thresholds, with the threshold.

    Candidate thresholds are the observed scores plus one below the minimum
    (predict everyone a member); prediction is member strictly above.
    """
    members, nonmembers = _split_scores(samples)
    all_scores = np.unique(np.concatenate([members, nonmembers]))
    candidates = np.concatenate([[all_scores[0] - 1.0], all_scores])
    best_acc, best_thr = -1.0, candidates[0]
    for t in candidates:
        tpr = (members > t).sum() / members.size
        tnr = (nonmembers <= t).sum() / nonmembers.size
        acc = 0.5 * (tpr + tnr)
        if acc > best_acc:
            best_acc, best_thr = float(acc), float(t)
    return best_acc, best_thr


def advantage(balanced_acc: float) -> float:
    """Inference advantage: leakage over random guessing, 2 (acc - 1/2)."""
    return 2.0 * (balanced_acc - 0.5)


def evaluate_attack(samples: Sequence[ScoredSample], attack_name: str,
                    defense_name: str, fpr_targets: Sequence[float],
                    queries: str = "1", seed: int = 0) -> AttackReport:
    members, nonmembers = _split_scores(samples)
    acc, thr = balanced_accuracy(samples)
    tpr_at = {}
    achieved = {}
    for target in fpr_targets:
        tpr, ach = tpr_at_fpr_with_achieved(samples, target)
        key = format_float(target)
        tpr_at[key] = tpr
        achieved[key] = ach
    return AttackReport(attack_name=attack_name, defense_name=defense_name,
                        auc=auc(samples), tpr_at=tpr_at, achieved_fpr=achieved,
                        balanced_acc=acc, advantage=advantage(acc), threshold=thr,
                        n_members=int(members.size), n_nonmembers=int(nonmembers.size),
                        queries=queries, seed=seed)


# ---------------------------------------------------------------------------
# Defenses: wrappers at the model boundary.  Noise is keyed statelessly by
# (seed, tag, query bytes), so identical queries always receive identical
# noise and results do not depend on evaluation order or worker count.
# ---------------------------------------------------------------------------

def _query_noise(seed: int, tag: str, payload: bytes, shape) -> np.ndarray:
    digest = hashlib.blake2b(digest_size=8)
    digest.update(str(seed).encode())
    digest.update(tag.encode())
    digest.update(payload)
    key = int.from_bytes(digest.digest(), "little")
    gen = np.random.Generator(np.random.Philox(key=key))
    return gen.standard_normal(shape)


class _DefenseWrapper:
    """Shares the attacked model's public attributes; subclasses intercept
    the raw output or input of the wrapped family.

    Noise is keyed per sample row, never per batch, so the same query gets
    the same noise regardless of how queries are grouped into batches.
    """

    def __init__(self, model, noise_std: float, seed: int, tag: str):
        if noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        self._model = model
        self._std = float(noise_std)
        self._seed = int(seed)
        self._tag = tag

    def __getattr__(self, name):
        return getattr(self._model, name)

    def _row_noise(self, row_payloads: Iterable[bytes], row_shape) -> np.ndarray:
        rows = [self._std * _query_noise(self._seed, self._tag, p, row_shape)
                for p in row_payloads]
        return np.stack(rows)


def _row_bytes(arr: np.ndarray, extra: bytes = b"") -> list[bytes]:
    arr = np.ascontiguousarray(arr)
    return [arr[i].tobytes() + extra for i in range(arr.shape[0])]


class LogitsNoiseLm(_DefenseWrapper):
    def logits(self, tokens, prompt=None):
        from . import autodiff as ad
        out = self._model.logits(tokens, prompt)
        tok = np.asarray(tokens, dtype=np.int64)
        if tok.ndim == 1:
            tok = tok[None, :]
        extra = b""
        if prompt is not None:
            extra = np.ascontiguousarray(ad.as_tensor(prompt).data).tobytes()
        noise = self._row_noise(_row_bytes(tok, extra), out.shape[1:])
        return ad.add(out, ad.constant(noise))

    def token_stat_tensors(self, tokens, prompt=None):
        # same statistics computation, routed through the noisy logits
        from .models.lm import TinyCausalLm
        return TinyCausalLm.token_stat_tensors(self, tokens, prompt)

    def sequence_loss(self, tokens, prompt=None):
        from .models.lm import TinyCausalLm
        return TinyCausalLm.sequence_loss(self, tokens, prompt)


class LogitsNoiseClassifier(_DefenseWrapper):
    def logits(self, x):
        from . import autodiff as ad
        xt = ad.as_tensor(x)
        out = self._model.logits(xt)
        x2d = xt.data if xt.ndim == 2 else xt.data[None, :]
        noise = self._row_noise(_row_bytes(x2d), out.shape[1:])
        return ad.add(out, ad.constant(noise))


class EpsNoiseDiffusion(_DefenseWrapper):
    def predict_eps(self, x, t):
        from . import autodiff as ad
        xt = ad.as_tensor(x)
        out = self._model.predict_eps(xt, t)
        x2d = xt.data if xt.ndim == 2 else xt.data[None, :]
        noise = self._row_noise(_row_bytes(x2d, bytes([int(t) % 251])), out.shape[1:])
        return ad.add(out, ad.constant(noise))


class InputSmoothingClassifier(_DefenseWrapper):
    def logits(self, x):
        from . import autodiff as ad
        xt = ad.as_tensor(x)
        x2d = xt if xt.ndim == 2 else ad.reshape(xt, (1, xt.shape[0]))
        noise = self._row_noise(_row_bytes(x2d.data), x2d.shape[1:])
        return self._model.logits(ad.add(x2d, ad.constant(noise)))


class InputSmoothingDiffusion(_DefenseWrapper):
    def predict_eps(self, x, t):
        from . import autodiff as ad
        xt = ad.as_tensor(x)
        x2d = xt if xt.ndim == 2 else ad.reshape(xt, (1, xt.shape[0]))
        noise = self._row_noise(_row_bytes(x2d.data, bytes([int(t) % 251])), x2d.shape[1:])
        noisy = ad.clamp(ad.add(x2d, ad.constant(noise)), 0.0, 1.0)
        return self._model.predict_eps(noisy, t)


def defense_logits_noise(model, noise_std: float, rng: Rng):
    """Gaussian noise on the model's raw outputs before any scoring."""
    from .models.diffusion import EpsMlpDiffusion
    from .models.lm import TinyCausalLm
    if isinstance(model, TinyCausalLm):
        return LogitsNoiseLm(model, noise_std, rng.seed, "lm-logits")
    if isinstance(model, EpsMlpDiffusion):
        return EpsNoiseDiffusion(model, noise_std, rng.seed, "eps-out")
    if hasattr(model, "num_classes"):
        return LogitsNoiseClassifier(model, noise_std, rng.seed, "cls-logits")
    raise TypeError(f"no logits-noise defense for {type(model).__name__}")


def defense_input_smoothing(model, noise_std: float, rng: Rng):
    """Gaussian noise on inputs (clamped to [0,1] for the diffusion family)."""
    from .models.diffusion import EpsMlpDiffusion
    if isinstance(model, EpsMlpDiffusion):
        return InputSmoothingDiffusion(model, noise_std, rng.seed, "eps-in")
    if hasattr(model, "num_classes"):
        return InputSmoothingClassifier(model, noise_std, rng.seed, "cls-in")
    raise TypeError(f"no input-smoothing defense for {type(model).__name__}")


# ---------------------------------------------------------------------------
# Report persistence
# ---------------------------------------------------------------------------

@dataclass
class ScoreSet:
    """One cell of the attack x defense grid."""
    attack_name: str
    defense_name: str
    samples: list[ScoredSample]
    queries: str = "1"
    pattern_id: str = ""


def write_report(entries: Sequence[ScoreSet], out_dir, fpr_targets: Sequence[float],
                 seed: int = 0, config: dict | None = None) -> list[AttackReport]:
    """Persist the grid: scores/, roc/, report.json, report.csv (+ config).

    Duplicate (attack, defense) cells are an error; float columns carry 17
    significant digits so re-runs are byte-comparable.
    """
    entries = list(entries)
    if not entries:
        raise ValueError("empty attack grid")
    keys = [(e.attack_name, e.defense_name) for e in entries]
    if len(set(keys)) != len(keys):
        raise ValueError("duplicate attack/defense names in one grid")

    out = Path(out_dir)
    (out / "scores").mkdir(parents=True, exist_ok=True)
    (out / "roc").mkdir(parents=True, exist_ok=True)
    if config is not None:
        write_json(out / "config.json", config)

    reports = []
    for entry in entries:
        stem = entry.attack_name if entry.defense_name in ("", "none") \
            else f"{entry.attack_name}__{entry.defense_name}"
        rows = ["sample_id,score,is_member,score_name,delta_id"]
        for s in sorted(entry.samples, key=lambda s: s.id):
            rows.append(f"{s.id},{format_float(s.score)},{int(s.is_member)},"
                        f"{entry.attack_name},{entry.pattern_id}")
        (out / "scores" / f"{stem}.csv").write_text("\n".join(rows) + "\n", encoding="utf-8")

        curve = roc_curve(entry.samples)
        rows = ["fpr,tpr,threshold"]
        for f, t, thr in zip(curve.fpr, curve.tpr, curve.thresholds):
            rows.append(f"{format_float(f)},{format_float(t)},{format_float(thr)}")
        (out / "roc" / f"{stem}.csv").write_text("\n".join(rows) + "\n", encoding="utf-8")

        reports.append(evaluate_attack(entry.samples, entry.attack_name,
                                       entry.defense_name, fpr_targets,
                                       queries=entry.queries, seed=seed))

    write_json(out / "report.json", [r.to_dict() for r in reports])

    header = ["attack", "defense", "queries", "auc", "balanced_acc", "advantage",
              "n_members", "n_nonmembers"]
    header += [f"tpr@{format_float(t)}" for t in fpr_targets]
    lines = [",".join(header)]
    for r in reports:
        row = [r.attack_name, r.defense_name, r.queries, format_float(r.auc),
               format_float(r.balanced_acc), format_float(r.advantage),
               str(r.n_members), str(r.n_nonmembers)]
        row += [format_float(r.tpr_at[format_float(t)]) for t in fpr_targets]
        lines.append(",".join(row))
    (out / "report.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return reports
