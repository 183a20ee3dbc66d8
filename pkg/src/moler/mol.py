"""Dual-loss continual pre-training on a bigram softmax language model.

Domain sequences are trained with cross-entropy, general sequences with a
KL penalty towards the frozen starting model, mixed 1:1 per batch::

    loss = mean_{s in domain} CE(s) + mean_{s in general} KL(s)

    CE(s) = -1/n_s sum_t log p(s_t | s_{t-1})
    KL(s) =  1/n_s sum_t KL(p_theta(.|s_{t-1}) || p_0(.|s_{t-1}))

``n_s`` counts scored positions, i.e. ``len(s) - 1``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted


def log_softmax_rows(theta: np.ndarray) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    m = theta.max(axis=-1, keepdims=True)
    shifted = theta - m
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _check_sequence(s, V):
    s = np.asarray(s, dtype=np.int64)
    if s.ndim != 1 or len(s) < 2:
        raise ValueError("a sequence needs at least 2 tokens (one context, one scored)")
    if s.min() < 0 or s.max() >= V:
        raise ValueError(f"token id out of range for vocabulary of size {V}")
    return s


def _check_pair(theta, theta0):
    theta = np.asarray(theta, dtype=np.float64)
    theta0 = np.asarray(theta0, dtype=np.float64)
    if theta.shape != theta0.shape:
        raise ValueError(f"shape mismatch: {theta.shape} vs {theta0.shape}")
    if theta.ndim != 2 or theta.shape[0] != theta.shape[1]:
        raise ValueError("bigram table must be V x V")
    return theta, theta0


def ce_loss(theta, s) -> float:
    theta = np.asarray(theta, dtype=np.float64)
    s = _check_sequence(s, theta.shape[0])
    lp = log_softmax_rows(theta[s[:-1]])
    return float(-lp[np.arange(len(s) - 1), s[1:]].mean())


def ce_grad(theta, s) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    s = _check_sequence(s, theta.shape[0])
    ctx, nxt = s[:-1], s[1:]
    n = len(ctx)
    rows = np.exp(log_softmax_rows(theta[ctx]))
    rows[np.arange(n), nxt] -= 1.0
    grad = np.zeros_like(theta)
    np.add.at(grad, ctx, rows / n)
    return grad


def _row_kl(theta, theta0, rows):
    lp = log_softmax_rows(theta[rows])
    lq = log_softmax_rows(theta0[rows])
    p = np.exp(lp)
    diff = lp - lq
    kl = (p * diff).sum(axis=1)
    return kl, p * (diff - kl[:, None])


def kl_loss(theta, theta0, s) -> float:
    theta, theta0 = _check_pair(theta, theta0)
    s = _check_sequence(s, theta.shape[0])
    kl, _ = _row_kl(theta, theta0, s[:-1])
    return float(kl.mean())


def kl_grad(theta, theta0, s) -> np.ndarray:
    theta, theta0 = _check_pair(theta, theta0)
    s = _check_sequence(s, theta.shape[0])
    ctx = s[:-1]
    _, g = _row_kl(theta, theta0, ctx)
    grad = np.zeros_like(theta)
    np.add.at(grad, ctx, g / len(ctx))
    return grad


@dataclass(frozen=True)
class MixedBatch:
    domain: tuple
    general: tuple

    def __post_init__(self):
        domain = tuple(tuple(int(t) for t in s) for s in self.domain)
        general = tuple(tuple(int(t) for t in s) for s in self.general)
        if len(domain) != len(general):
            raise ValueError(f"domain/general counts must match 1:1, got {len(domain)} vs {len(general)}")
        if not domain:
            raise ValueError("empty batch")
        # canonical order makes the update independent of sequence order, bit for bit
        object.__setattr__(self, "domain", tuple(sorted(domain)))
        object.__setattr__(self, "general", tuple(sorted(general)))


@dataclass(frozen=True)
class LossReport:
    ce_domain: float
    kl_general: float

    @property
    def total(self) -> float:
        return self.ce_domain + self.kl_general


def mol_loss(theta, theta0, batch: MixedBatch) -> LossReport:
    ce = float(np.mean([ce_loss(theta, s) for s in batch.domain]))
    kl = float(np.mean([kl_loss(theta, theta0, s) for s in batch.general]))
    return LossReport(ce, kl)


def mol_grad(theta, theta0, batch: MixedBatch) -> np.ndarray:
    g = sum(ce_grad(theta, s) for s in batch.domain) / len(batch.domain)
    return g + sum(kl_grad(theta, theta0, s) for s in batch.general) / len(batch.general)


def mol_step(theta, theta0, batch: MixedBatch, lr: float):
    """One gradient-descent step on the summed objective; returns ``(theta', report-before-step)``."""
    theta, theta0 = _check_pair(theta, theta0)
    report = mol_loss(theta, theta0, batch)
    return theta - lr * mol_grad(theta, theta0, batch), report


def ce_only_step(theta, domain: Sequence, lr: float) -> np.ndarray:
    """The CE-only ablation: descend on domain cross-entropy and ignore general data."""
    theta = np.asarray(theta, dtype=np.float64)
    domain = sorted(tuple(int(t) for t in s) for s in domain)
    if not domain:
        raise ValueError("empty batch")
    return theta - lr * sum(ce_grad(theta, s) for s in domain) / len(domain)


# -- toy corpora -----------------------------------------------------------------

class Vocabulary:
    def __init__(self, tokens: Sequence[str]):
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate vocabulary entries")

    def __len__(self):
        return len(self.tokens)

    def encode(self, line: str) -> list[int]:
        try:
            return [self.index[w] for w in line.split()]
        except KeyError as exc:
            raise ValueError(f"token {exc.args[0]!r} not in vocabulary") from None

    @classmethod
    def build(cls, *corpora) -> "Vocabulary":
        seen = {}
        for corpus in corpora:
            for line in corpus:
                for w in line.split():
                    seen.setdefault(w, None)
        return cls(list(seen))

    def save(self, path):
        Path(path).write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls([t for t in Path(path).read_text(encoding="utf-8").splitlines() if t])


def read_lines(path) -> list[str]:
    return [line.strip() for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]


# Domain text visits the general-purpose context "the" once per sentence;
# general text is mostly made of it.
TOY_DOMAIN = [
    "zinc binds the receptor kinase site",
    "statin lowers serum ldl cholesterol levels",
    "vitamin d modulates the innate immune cells",
    "fiber intake reduces colon cancer risk",
]
TOY_GENERAL = [
    "the cat and the dog and the bird",
    "the sun and the moon and the sea",
    "the man and the boy and the girl",
    "the cup and the pot and the pan",
]


def toy_corpora():
    vocab = Vocabulary.build(TOY_DOMAIN, TOY_GENERAL)
    return vocab, [vocab.encode(s) for s in TOY_DOMAIN], [vocab.encode(s) for s in TOY_GENERAL]


# -- training --------------------------------------------------------------------

def train(theta0, domain, general, steps: int, lr: float, mode: str = "mol"):
    """Run ``steps`` full-batch updates; returns ``(theta, curve)``.

    Each curve row holds the domain CE and general KL measured *after* the
    step. ``mode="ce"`` trains the CE-only baseline but still reports the
    general-side KL.
    """
    theta0 = np.array(theta0, dtype=np.float64)
    theta0.setflags(write=False)
    theta = theta0.copy()
    batch = MixedBatch(domain, general)
    curve = []
    for step in range(1, steps + 1):
        if mode == "mol":
            theta, _ = mol_step(theta, theta0, batch, lr)
        elif mode == "ce":
            theta = ce_only_step(theta, batch.domain, lr)
        else:
            raise ValueError("mode must be 'mol' or 'ce'")
        report = mol_loss(theta, theta0, batch)
        curve.append({"step": step, "ce_domain": report.ce_domain, "kl_general": report.kl_general})
    return theta, curve


def write_curve_csv(curve, path):
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "ce_domain", "kl_general"])
        for row in curve:
            writer.writerow([row["step"], repr(row["ce_domain"]), repr(row["kl_general"])])


class MolTrainer(BaseEstimator):
    """Estimator wrapper: ``fit(domain, general)`` trains a bigram table from a seeded start.

    ``init_scale`` sets the std of the random initial logits (the frozen
    reference model); ``mode="ce"`` gives the CE-only ablation.
    """

    def __init__(self, mode="mol", learning_rate=1.0, n_steps=500, init_scale=0.5, seed=0, vocab_size=None):
        self.mode = mode
        self.learning_rate = learning_rate
        self.n_steps = n_steps
        self.init_scale = init_scale
        self.seed = seed
        self.vocab_size = vocab_size

    def fit(self, X, y, theta0: Optional[np.ndarray] = None):
        """``X`` = domain sequences, ``y`` = general sequences (token ids)."""
        V = self.vocab_size or 1 + max(max(s) for s in list(X) + list(y))
        if theta0 is None:
            theta0 = np.random.default_rng(self.seed).normal(0.0, self.init_scale, size=(V, V))
        self.theta0_ = np.array(theta0, dtype=np.float64)
        self.theta_, self.curve_ = train(self.theta0_, X, y, self.n_steps, self.learning_rate, self.mode)
        return self

    def score(self, X, y=None) -> float:
        """Negative mean domain CE of ``X`` (higher is better)."""
        check_is_fitted(self, "theta_")
        return -float(np.mean([ce_loss(self.theta_, s) for s in X]))
