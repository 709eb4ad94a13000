"""One-block causal transformer LM and its vocabulary-statistics hooks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import autodiff as ad
from ..autodiff import Tensor
from ..data import SeqDataset
from ..optim import Adam, Sgd
from ..rng import Rng
from .base import Module, TrainReport, TrainingDivergedError

SIGMA_FLOOR = 1e-8  # vocabulary-std guard; the z-score divides by sigma


@dataclass
class LmHyper:
    embed_dim: int = 32
    n_heads: int = 2
    prompt_budget: int = 8
    epochs: int = 120
    lr: float = 3e-3
    momentum: float = 0.9
    optimizer: str = "adam"


class TinyCausalLm(Module):
    """Causal LM: embeddings, one pre-LN attention block, MLP, vocab head.

    A learned begin-of-sequence row is always prepended to the token
    embeddings, so every real token has a predictable position and per-token
    statistics keep shape N for any prompt length (including none).

    Prompt handling: the model reserves ``prompt_budget`` context slots ahead
    of the BOS row, zero-filled by default and present during training, with
    their own band of the positional table; a soft prompt of length
    L <= prompt_budget fills the first L slots.  Two desk-scale failure modes
    force this design, both measured: shifting token positions by the prompt
    length destroys the predictions of a model trained at fixed positions,
    and slots the model never saw during training soak up attention mass even
    when zero-valued.  With reserved, trained-through slots a zero prompt is
    bit-for-bit the model's canonical forward pass.
    """

    def __init__(self, vocab_size: int, max_seq_len: int, embed_dim: int = 32,
                 n_heads: int = 2, prompt_budget: int = 8, rng: Rng | None = None):
        super().__init__()
        if embed_dim % n_heads != 0:
            raise ValueError("embed_dim must be divisible by n_heads")
        if rng is None:
            raise ValueError("rng is required")
        self.vocab_size = int(vocab_size)
        self.max_seq_len = int(max_seq_len)
        self.embed_dim = int(embed_dim)
        self.n_heads = int(n_heads)
        self.head_dim = embed_dim // n_heads
        self.prompt_budget = int(prompt_budget)
        self.max_positions = self.prompt_budget + 1 + self.max_seq_len

        d = self.embed_dim
        s = 0.02
        self._param("tok_emb", s * rng.standard_normal((vocab_size, d)))
        self._param("pos_emb", s * rng.standard_normal((self.max_positions, d)))
        self._param("bos", s * rng.standard_normal((1, d)))
        for name in ("wq", "wk", "wv", "wo"):
            self._param(name, rng.standard_normal((d, d)) / np.sqrt(d))
        self._param("bo", np.zeros(d))
        self._param("ln1_g", np.ones(d))
        self._param("ln1_b", np.zeros(d))
        self._param("ln2_g", np.ones(d))
        self._param("ln2_b", np.zeros(d))
        self._param("w_in", rng.standard_normal((d, 4 * d)) / np.sqrt(d))
        self._param("b_in", np.zeros(4 * d))
        self._param("w_out", rng.standard_normal((4 * d, d)) / np.sqrt(4 * d))
        self._param("b_out", np.zeros(d))
        self._param("w_head", rng.standard_normal((d, vocab_size)) / np.sqrt(d))
        self._param("b_head", np.zeros(vocab_size))

    def _add_bias(self, h: Tensor, b: Tensor) -> Tensor:
        return ad.add_tail(h, b)

    def _causal_mask(self, t: int) -> Tensor:
        mask = np.where(np.tril(np.ones((t, t), dtype=bool)), 0.0, -1e30)
        return ad.constant(mask)

    def logits(self, tokens: np.ndarray, prompt: Tensor | np.ndarray | None = None) -> Tensor:
        """Next-token logits, one row per real token: (B, N, V).

        ``tokens`` is (B, N) or (N,) integer ids; ``prompt`` is an optional
        (L, d) embedding matrix filling the first L reserved context slots
        (the remaining slots stay zero, as during training).
        """
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim == 1:
            tokens = tokens[None, :]
        b, n = tokens.shape
        if n > self.max_seq_len:
            raise ad.ShapeError(f"sequence length {n} exceeds max {self.max_seq_len}")
        s = self.prompt_budget
        if prompt is not None:
            prompt = ad.as_tensor(prompt)
            if prompt.ndim != 2 or prompt.shape[1] != self.embed_dim:
                raise ad.ShapeError(f"prompt must be (L, {self.embed_dim}), got {prompt.shape}")
            if prompt.shape[0] > s:
                raise ad.ShapeError(f"prompt length {prompt.shape[0]} exceeds budget {s}")
            if prompt.shape[0] == 0:
                prompt = None
        if prompt is None:
            slots = ad.constant(np.zeros((s, self.embed_dim)))
        elif prompt.shape[0] == s:
            slots = prompt
        else:
            pad = ad.constant(np.zeros((s - prompt.shape[0], self.embed_dim)))
            slots = ad.concat([prompt, pad], axis=0)
        pieces = [ad.tile_first(slots, b),
                  ad.tile_first(self._params["bos"], b),
                  ad.embedding(self._params["tok_emb"], tokens)]
        h = ad.concat(pieces, axis=1)
        t = s + 1 + n

        slot_pos = ad.narrow(self._params["pos_emb"], 0, 1 + self.max_seq_len, s)
        seq_pos = ad.narrow(self._params["pos_emb"], 0, 0, 1 + n)
        h = ad.add_tail(h, ad.concat([slot_pos, seq_pos], axis=0))

        # Attention block (pre-LN).
        x = ad.layer_norm(h, self._params["ln1_g"], self._params["ln1_b"])
        q = ad.matmul(x, self._params["wq"])
        k = ad.matmul(x, self._params["wk"])
        v = ad.matmul(x, self._params["wv"])
        mask = self._causal_mask(t)
        heads = []
        for i in range(self.n_heads):
            lo = i * self.head_dim
            qh = ad.narrow(q, 2, lo, self.head_dim)
            kh = ad.narrow(k, 2, lo, self.head_dim)
            vh = ad.narrow(v, 2, lo, self.head_dim)
            scores = ad.mul_scalar(ad.matmul(qh, ad.swap_last2(kh)), 1.0 / np.sqrt(self.head_dim))
            attn = ad.softmax(ad.add_tail(scores, mask))
            heads.append(ad.matmul(attn, vh))
        merged = heads[0] if len(heads) == 1 else ad.concat(heads, axis=2)
        h = ad.add(h, self._add_bias(ad.matmul(merged, self._params["wo"]), self._params["bo"]))

        # MLP block.
        x = ad.layer_norm(h, self._params["ln2_g"], self._params["ln2_b"])
        x = ad.relu(self._add_bias(ad.matmul(x, self._params["w_in"]), self._params["b_in"]))
        h = ad.add(h, self._add_bias(ad.matmul(x, self._params["w_out"]), self._params["b_out"]))

        # Rows s .. s+n-1 (BOS onward) predict t_1 .. t_N.
        h = ad.narrow(h, 1, s, n)
        return self._add_bias(ad.matmul(h, self._params["w_head"]), self._params["b_head"])

    def token_stat_tensors(self, tokens: np.ndarray,
                           prompt: Tensor | np.ndarray | None = None
                           ) -> tuple[Tensor, Tensor, Tensor]:
        """Differentiable per-position (log p(t_i), vocab mean, vocab std).

        The std is a population statistic over the full vocabulary and is
        floored at SIGMA_FLOOR before use.
        """
        tokens = np.asarray(tokens, dtype=np.int64)
        squeeze = tokens.ndim == 1
        if squeeze:
            tokens = tokens[None, :]
        if tokens.shape[1] < 2:
            raise ValueError("token statistics need sequence length >= 2")
        logp_all = ad.log_softmax(self.logits(tokens, prompt))
        logp = ad.gather_last(logp_all, tokens)
        mu = ad.mean_last(logp_all)
        sigma = ad.clamp(ad.sqrt(ad.var_last(logp_all)), SIGMA_FLOOR, None)
        return logp, mu, sigma

    def sequence_loss(self, tokens: np.ndarray,
                      prompt: Tensor | np.ndarray | None = None) -> Tensor:
        """Per-sequence mean next-token cross-entropy: (B,)."""
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim == 1:
            tokens = tokens[None, :]
        logp = ad.gather_last(ad.log_softmax(self.logits(tokens, prompt)), tokens)
        return ad.neg(ad.mean_last(logp))

    def loss(self, tokens: np.ndarray, prompt=None) -> Tensor:
        return ad.mean(self.sequence_loss(tokens, prompt))


def lm_token_stats(model: TinyCausalLm, tokens: np.ndarray,
                   soft_prompt: np.ndarray | Tensor | None = None
                   ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-token (log p, vocab mean, vocab std) for one sequence, as arrays."""
    logp, mu, sigma = model.token_stat_tensors(np.asarray(tokens), soft_prompt)
    return logp.data[0].copy(), mu.data[0].copy(), sigma.data[0].copy()


def train_lm(data: SeqDataset, member_ids, test_ids, hyper: LmHyper,
             rng: Rng) -> tuple[TinyCausalLm, TrainReport]:
    """Train on the member sequences (full batch), freeze, report overfit."""
    member_ids = np.asarray(list(member_ids), dtype=np.int64)
    test_ids = np.asarray(list(test_ids), dtype=np.int64)
    train_seqs = data.sequences[member_ids]
    test_seqs = data.sequences[test_ids]

    model = TinyCausalLm(data.vocab_size, data.sequences.shape[1],
                         embed_dim=hyper.embed_dim, n_heads=hyper.n_heads,
                         prompt_budget=hyper.prompt_budget, rng=rng)
    if hyper.optimizer == "adam":
        opt = Adam(model.parameters(), lr=hyper.lr)
    else:
        opt = Sgd(model.parameters(), lr=hyper.lr, momentum=hyper.momentum)
    for epoch in range(hyper.epochs):
        opt.zero_grad()
        try:
            loss = model.loss(train_seqs)
        except ad.NonFiniteError as exc:
            raise TrainingDivergedError(f"lm training diverged at epoch {epoch}") from exc
        if not np.isfinite(loss.data):
            raise TrainingDivergedError(f"lm training diverged at epoch {epoch}")
        ad.backward(loss)
        opt.step()

    train_loss = float(model.loss(train_seqs).data)
    test_loss = float(model.loss(test_seqs).data)
    report = TrainReport(train_loss=train_loss, test_loss=test_loss,
                         rho=test_loss / max(train_loss, 1e-300),
                         epochs=hyper.epochs, seed=rng.seed)
    model.freeze()
    return model, report
