"""Synthetic datasets and the six-way membership split plan.

Real corpora are out of scope; these generators produce data with enough
learnable structure that a small model can first fit and then memorize it,
which is the regime the attack needs (overfitting ratio > 1).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .rng import Rng

SPLIT_NAMES = ("tar_train", "tar_held", "shadow_train", "shadow_held", "ref_train", "test")
MIN_SUBSET = 8


class SplitError(ValueError):
    """A requested split plan is infeasible or inconsistent."""


@dataclass(frozen=True)
class SplitPlan:
    """Six pairwise-disjoint id subsets plus the seed that produced them.

    ``tar_train`` / ``tar_held`` form the evaluated member / non-member
    population; ``shadow_train`` / ``shadow_held`` are reserved for learning
    the probe pattern; ``ref_train`` trains the reference model and ``test``
    measures generalization.
    """

    tar_train: tuple[int, ...]
    tar_held: tuple[int, ...]
    shadow_train: tuple[int, ...]
    shadow_held: tuple[int, ...]
    ref_train: tuple[int, ...]
    test: tuple[int, ...]
    seed: int = 0

    def __post_init__(self):
        subsets = self.subsets()
        seen: set[int] = set()
        for name in SPLIT_NAMES:
            ids = subsets[name]
            overlap = seen.intersection(ids)
            if overlap:
                raise SplitError(f"subset '{name}' overlaps earlier subsets: {sorted(overlap)[:5]}")
            seen.update(ids)

    def subsets(self) -> dict[str, tuple[int, ...]]:
        return {name: getattr(self, name) for name in SPLIT_NAMES}

    def to_json(self) -> str:
        payload = {name: list(map(int, getattr(self, name))) for name in SPLIT_NAMES}
        payload["seed"] = int(self.seed)
        return json.dumps(payload, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "SplitPlan":
        payload = json.loads(text)
        kwargs = {name: tuple(int(i) for i in payload[name]) for name in SPLIT_NAMES}
        return cls(seed=int(payload.get("seed", 0)), **kwargs)


def make_split(n_total: int, fractions, rng: Rng) -> SplitPlan:
    """Partition ids 0..n_total-1 into the six disjoint subsets.

    ``fractions`` holds six values summing to at most 1; ids beyond the
    allocated counts are discarded.  Every subset must receive at least
    MIN_SUBSET ids.
    """
    fractions = [float(f) for f in fractions]
    if len(fractions) != len(SPLIT_NAMES):
        raise SplitError(f"need {len(SPLIT_NAMES)} fractions, got {len(fractions)}")
    if any(f < 0 for f in fractions):
        raise SplitError("fractions must be non-negative")
    total = sum(fractions)
    if total > 1.0 + 1e-12:
        raise SplitError(f"fractions sum to {total:.4f} > 1")
    counts = [int(np.floor(f * n_total)) for f in fractions]
    for name, c in zip(SPLIT_NAMES, counts):
        if c < MIN_SUBSET:
            minimum = int(np.ceil(MIN_SUBSET / min(f for f in fractions if f > 0))) if all(fractions) else MIN_SUBSET
            raise SplitError(
                f"subset '{name}' would get {c} ids; every subset needs >= {MIN_SUBSET} "
                f"(n_total of at least {minimum} for these fractions)")
    order = rng.permutation(n_total)
    pieces = {}
    start = 0
    for name, c in zip(SPLIT_NAMES, counts):
        pieces[name] = tuple(int(i) for i in order[start:start + c])
        start += c
    return SplitPlan(seed=rng.seed, **pieces)


# ---------------------------------------------------------------------------
# Classifier data
# ---------------------------------------------------------------------------

@dataclass
class ClsDataset:
    points: np.ndarray          # (N, d) float64
    labels: np.ndarray          # (N,) ints in [0, K)
    num_classes: int

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.min(initial=0) < 0 or self.labels.max(initial=0) >= self.num_classes:
            raise ValueError("labels out of range")
        counts = np.bincount(self.labels, minlength=self.num_classes)
        if np.any(counts < 2):
            raise ValueError("every class needs at least 2 samples")


def gen_gaussian_mixture(k_classes: int, n_per_class: int, spread: float, rng: Rng,
                         dim: int = 2) -> ClsDataset:
    """Isotropic Gaussian blobs centered on the vertices of a regular polygon.

    Class c sits on the c-th vertex of the unit-radius K-gon (embedded in the
    first two coordinates when dim > 2) with noise std ``spread``.
    """
    if k_classes < 2:
        raise ValueError("k_classes must be >= 2")
    if n_per_class < 4:
        raise ValueError("n_per_class must be >= 4")
    if spread < 0:
        raise ValueError("spread must be non-negative")
    if dim < 2:
        raise ValueError("dim must be >= 2")
    angles = 2.0 * np.pi * np.arange(k_classes) / k_classes
    centers = np.zeros((k_classes, dim))
    centers[:, 0] = np.cos(angles)
    centers[:, 1] = np.sin(angles)
    points = np.repeat(centers, n_per_class, axis=0)
    points = points + spread * rng.standard_normal((k_classes * n_per_class, dim))
    labels = np.repeat(np.arange(k_classes), n_per_class)
    return ClsDataset(points=points, labels=labels, num_classes=k_classes)


# ---------------------------------------------------------------------------
# Sequence data
# ---------------------------------------------------------------------------

@dataclass
class SeqDataset:
    sequences: np.ndarray       # (N, n_tok) ints in [0, V)
    vocab_size: int
    source: np.ndarray          # (V, V) row-stochastic transition matrix

    def __post_init__(self):
        self.sequences = np.asarray(self.sequences, dtype=np.int64)
        self.source = np.asarray(self.source, dtype=np.float64)
        if self.sequences.min(initial=0) < 0 or self.sequences.max(initial=0) >= self.vocab_size:
            raise ValueError("tokens out of vocabulary range")
        rowsum = self.source.sum(axis=1)
        if not np.allclose(rowsum, 1.0, atol=1e-9):
            raise ValueError("transition matrix rows must sum to 1 within 1e-9")


def gen_markov_sequences(vocab_size: int, n_seq: int, seq_len: int,
                         temperature: float, rng: Rng) -> SeqDataset:
    """Sample token sequences from one random Markov chain.

    A single transition matrix is drawn per dataset: Gaussian logits per row,
    sharpened by ``temperature`` through a softmax (rows approach one-hot as
    temperature -> 0+).  The matrix is stored so tests can inspect it.
    """
    if vocab_size < 4:
        raise ValueError("vocab_size must be >= 4")
    if seq_len < 8:
        raise ValueError("seq_len must be >= 8")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    logits = rng.standard_normal((vocab_size, vocab_size)) / temperature
    logits -= logits.max(axis=1, keepdims=True)
    trans = np.exp(logits)
    trans /= trans.sum(axis=1, keepdims=True)
    init_logits = rng.standard_normal(vocab_size) / temperature
    init_logits -= init_logits.max()
    init = np.exp(init_logits)
    init /= init.sum()

    seqs = np.zeros((n_seq, seq_len), dtype=np.int64)
    u = rng.uniform(size=(n_seq, seq_len))
    init_cdf = np.cumsum(init)
    trans_cdf = np.cumsum(trans, axis=1)
    seqs[:, 0] = np.searchsorted(init_cdf, u[:, 0], side="right").clip(0, vocab_size - 1)
    for j in range(1, seq_len):
        rows = trans_cdf[seqs[:, j - 1]]
        seqs[:, j] = (rows < u[:, j, None]).sum(axis=1).clip(0, vocab_size - 1)
    return SeqDataset(sequences=seqs, vocab_size=vocab_size, source=trans)


# ---------------------------------------------------------------------------
# Diffusion data
# ---------------------------------------------------------------------------

@dataclass
class DiffDataset:
    points: np.ndarray          # (N, d) float64 in [0, 1]

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.size and (self.points.min() < 0.0 or self.points.max() > 1.0):
            raise ValueError("diffusion points must lie in [0, 1]")


def gen_diffusion_points(n_points: int, dim: int, n_modes: int, spread: float,
                         rng: Rng) -> DiffDataset:
    """Mixture of blobs inside the unit hypercube, clipped to [0, 1]^dim.

    Mode centers are drawn uniformly in [0.2, 0.8]^dim so the clip boundary
    rarely bites; clipping keeps the hard [0, 1] domain invariant either way.
    """
    if n_points < 4 or dim < 1 or n_modes < 1:
        raise ValueError("need n_points >= 4, dim >= 1, n_modes >= 1")
    if spread < 0:
        raise ValueError("spread must be non-negative")
    centers = rng.uniform(0.2, 0.8, size=(n_modes, dim))
    assignment = rng.integers(0, n_modes, size=n_points)
    points = centers[assignment] + spread * rng.standard_normal((n_points, dim))
    return DiffDataset(points=np.clip(points, 0.0, 1.0))
