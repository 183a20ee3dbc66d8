"""GRPO / Dr.GRPO on a toy categorical policy with recall rewards.

Each rollout has two components, ``mqr`` (query expansion) and ``cqe``
(pre-answer passage). The toy policy holds one logit vector per component;
a component's output is a sequence of tokens drawn from its categorical.

Objective for one group (ascent direction)::

    grpo:   J = 1/G sum_i sum_c 1/|o_ic| sum_t (r_t * A_i - beta * KL_c)
    drgrpo: J = 1/G sum_i sum_c          sum_t (r_t * A_i - beta * KL_c)

with ``r_t = pi_theta(o_t) / pi_old(o_t)`` and ``KL_c`` the exact
``KL(pi_theta,c || pi_ref,c)``. GRPO uses std-normalised advantages,
Dr.GRPO only mean-centred ones. No ratio clipping is applied.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .corpus import Document, Query, RelevanceJudgments, relevant_set
from .fusion import FusionConfig, rrf_fuse
from .metrics import recall_at_k

COMPONENTS = ("mqr", "cqe")
VARIANTS = ("grpo", "drgrpo")


def _log_softmax(z):
    z = np.asarray(z, dtype=np.float64)
    m = z.max()
    return z - m - math.log(np.exp(z - m).sum())


def categorical_kl(logits, ref_logits):
    """``KL(softmax(logits) || softmax(ref_logits))`` and its gradient w.r.t. ``logits``."""
    lp = _log_softmax(logits)
    lq = _log_softmax(ref_logits)
    p = np.exp(lp)
    diff = lp - lq
    kl = float(np.dot(p, diff))
    return kl, p * (diff - kl)


@dataclass
class ToyPolicy:
    logits: dict

    def __post_init__(self):
        self.logits = {c: np.array(v, dtype=np.float64) for c, v in self.logits.items()}

    @classmethod
    def uniform(cls, sizes: dict) -> "ToyPolicy":
        return cls({c: np.zeros(n) for c, n in sizes.items()})

    def copy(self) -> "ToyPolicy":
        return ToyPolicy({c: v.copy() for c, v in self.logits.items()})

    def log_probs(self, component) -> np.ndarray:
        return _log_softmax(self.logits[component])

    def probs(self, component) -> np.ndarray:
        return np.exp(self.log_probs(component))

    def greedy(self) -> dict:
        return {c: int(np.argmax(v)) for c, v in self.logits.items()}

    def sample(self, rng, n_tokens=1) -> dict:
        return {c: tuple(int(a) for a in rng.choice(len(v), size=n_tokens, p=self.probs(c)))
                for c, v in self.logits.items()}

    def total_variation(self, other: "ToyPolicy") -> float:
        """Largest per-component total-variation distance to ``other``."""
        return max(0.5 * float(np.abs(self.probs(c) - other.probs(c)).sum()) for c in self.logits)

    # flat parameter vector, component order fixed by sorted names
    def flat(self) -> np.ndarray:
        return np.concatenate([self.logits[c] for c in sorted(self.logits)])

    def with_flat(self, theta) -> "ToyPolicy":
        out, i = {}, 0
        for c in sorted(self.logits):
            n = len(self.logits[c])
            out[c] = np.array(theta[i:i + n], dtype=np.float64)
            i += n
        return ToyPolicy(out)


@dataclass(frozen=True)
class ComponentOutput:
    tokens: tuple
    logprobs_old: tuple
    logprobs_ref: tuple = ()
    logprobs_new: tuple = ()

    def __post_init__(self):
        if len(self.tokens) < 1:
            raise ValueError("a component output needs at least one token")
        for name in ("logprobs_old", "logprobs_ref", "logprobs_new"):
            values = getattr(self, name)
            if values and len(values) != len(self.tokens):
                raise ValueError(f"{name} length does not match token count")


@dataclass
class RolloutOutput:
    components: dict
    reward: float
    completion_tokens: int = 0


@dataclass
class Group:
    query_id: str
    outputs: list

    @property
    def rewards(self) -> np.ndarray:
        return np.array([o.reward for o in self.outputs], dtype=np.float64)


@dataclass(frozen=True)
class GrpoConfig:
    variant: str = "drgrpo"
    beta: float = 0.0
    learning_rate: float = 1e-4
    std_floor: float = 1e-8
    group_size: int = 8
    seed: int = 0
    temperature: float = 0.9
    max_completion_length: int = 8192

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.std_floor < 0:
            raise ValueError("std_floor must be >= 0")
        if self.group_size < 2:
            raise ValueError("group_size must be >= 2")


@dataclass(frozen=True)
class Advantages:
    values: np.ndarray
    variant: str


def grpo_advantages(rewards, std_floor=1e-8) -> np.ndarray:
    """``(R_i - mean) / max(std, floor)`` with population std; zero when std is exactly 0."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1 or r.size < 2:
        raise ValueError("advantage estimation needs a group of at least 2 rewards")
    centred = r - r.mean()
    std = float(np.sqrt(np.mean(centred ** 2)))
    if std == 0.0:
        return np.zeros_like(r)
    return centred / max(std, std_floor)


def drgrpo_advantages(rewards) -> np.ndarray:
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1 or r.size < 2:
        raise ValueError("advantage estimation needs a group of at least 2 rewards")
    return r - r.mean()


def compute_advantages(rewards, cfg: GrpoConfig) -> Advantages:
    if cfg.variant == "grpo":
        return Advantages(grpo_advantages(rewards, cfg.std_floor), "grpo")
    return Advantages(drgrpo_advantages(rewards), "drgrpo")


def surrogate_objective(policy: ToyPolicy, group: Group, advantages, cfg: GrpoConfig,
                        reference: Optional[ToyPolicy] = None):
    """Surrogate value and its gradient (a ``{component: array}`` dict) for ascent."""
    if isinstance(advantages, Advantages):
        if advantages.variant != cfg.variant:
            raise ValueError(f"advantages were computed for {advantages.variant}, config is {cfg.variant}")
        adv = advantages.values
    else:
        adv = np.asarray(advantages, dtype=np.float64)
    if len(adv) != len(group.outputs):
        raise ValueError("one advantage per rollout output is required")
    if not np.all(np.isfinite(adv)):
        raise ValueError("non-finite advantages")
    reference = reference if reference is not None else policy
    G = len(group.outputs)
    per_component = {}
    for c in policy.logits:
        lp = policy.log_probs(c)
        kl, kl_grad = categorical_kl(policy.logits[c], reference.logits[c])
        per_component[c] = (lp, np.exp(lp), kl, kl_grad)
    value = 0.0
    grad = {c: np.zeros_like(v) for c, v in policy.logits.items()}
    for A, out in zip(adv, group.outputs):
        for c, comp in out.components.items():
            lp, p, kl, kl_grad = per_component[c]
            tokens = np.asarray(comp.tokens, dtype=np.int64)
            old = np.asarray(comp.logprobs_old, dtype=np.float64)
            if not np.all(np.isfinite(old)):
                raise ValueError("non-finite old log-probabilities")
            n = len(tokens)
            weight = 1.0 / n if cfg.variant == "grpo" else 1.0
            ratio = np.exp(lp[tokens] - old)
            value += weight * (A * ratio.sum() - cfg.beta * n * kl)
            # d ratio_t / d logits = ratio_t * (onehot(token_t) - p)
            g = -ratio.sum() * p
            np.add.at(g, tokens, ratio)
            grad[c] += weight * (A * g - cfg.beta * n * kl_grad)
    return value / G, {c: g / G for c, g in grad.items()}


# -- rewards ---------------------------------------------------------------------

@dataclass(frozen=True)
class RewardSpec:
    k: int = 10
    threshold: int = 1
    fusion: FusionConfig = field(default_factory=FusionConfig)
    pool_depth: Optional[int] = None


def compute_reward(query: Query, passage: str, qrels: RelevanceJudgments, ctx, spec: RewardSpec = RewardSpec()) -> float:
    """Recall@k of the two-list (query, passage) fusion, i.e. the MSLF training reward."""
    relevant = relevant_set(qrels, query.id, spec.threshold)
    lists = [ctx.search(query.text, spec.pool_depth, "query"), ctx.search(passage, spec.pool_depth, "passage")]
    return recall_at_k(rrf_fuse(lists, spec.fusion, label=query.id), relevant, spec.k)


@dataclass
class ToyRetrievalEnv:
    """One query over a small corpus with a finite menu of expansion and passage actions.

    ``passages[i][j]`` is the pre-answer produced when the expansion action is
    ``i`` and the passage action is ``j``; ``sub_queries[i]`` are the
    expansions of action ``i``. Rewards come from :func:`compute_reward`.
    """

    query: Query
    qrels: RelevanceJudgments
    ctx: object
    sub_queries: list
    passages: list
    spec: RewardSpec = field(default_factory=RewardSpec)
    _rewards: dict = field(default_factory=dict, repr=False)

    @property
    def sizes(self) -> dict:
        return {"mqr": len(self.sub_queries), "cqe": len(self.passages[0])}

    def reward(self, i, j) -> float:
        if (i, j) not in self._rewards:
            self._rewards[(i, j)] = compute_reward(self.query, self.passages[i][j], self.qrels, self.ctx, self.spec)
        return self._rewards[(i, j)]

    def reward_table(self) -> np.ndarray:
        n, m = self.sizes["mqr"], self.sizes["cqe"]
        return np.array([[self.reward(i, j) for j in range(m)] for i in range(n)])

    def completion_tokens(self, i, j) -> int:
        return sum(len(s.split()) for s in self.sub_queries[i]) + len(self.passages[i][j].split())


def make_toy_env(kind="one_good", n_mqr=3, n_cqe=3, good=(1, 2), k=5, dim=512) -> ToyRetrievalEnv:
    """Synthetic environment built on the offline embedder.

    ``one_good``: only the ``good`` (expansion, passage) pair writes a passage
    matching the relevant document, giving reward 1; every other pair
    paraphrases a distractor and scores 0. ``flat``: every pair scores 0.
    """
    from .backends import CachedEmbedder, OfflineEmbedder
    from .index import build_index
    from .pipeline import SearchContext

    # six "common0" documents outrank the target for the raw query; the target sits 7th
    docs = [Document(f"d{i:02d}", "", f"topic{i} filler{i} common{i % 4}") for i in range(24)]
    target = "d17"
    docs[17] = Document(target, "", "zinc deficiency weakens innate immune response in elderly patients")
    embedder = CachedEmbedder(OfflineEmbedder(dim))
    ctx = SearchContext(build_index(docs, embedder), embedder)
    query = Query("toy", "immune minerals common0 dietary intake")
    qrels = RelevanceJudgments({"toy": {target: 1}})
    sub_queries = [[f"variant {i} question {t}" for t in range(1 + i % 3)] for i in range(n_mqr)]
    passages = []
    for i in range(n_mqr):
        row = []
        for j in range(n_cqe):
            if kind == "one_good" and (i, j) == tuple(good):
                row.append(docs[17].text)
            else:
                d = docs[(3 * i + j) % 8 * 2]
                row.append(d.text)
        passages.append(row)
    return ToyRetrievalEnv(query, qrels, ctx, sub_queries, passages, RewardSpec(k=k))


# -- training ------------------------------------------------------------------

@dataclass
class TrainResult:
    policy: ToyPolicy
    reference: ToyPolicy
    curve: list  # dicts: step, mean_reward, mean_completion_tokens


def train_toy(env: ToyRetrievalEnv, cfg: GrpoConfig, steps: int, init: Optional[ToyPolicy] = None) -> TrainResult:
    """On-policy GRPO loop: sample a group, score, compute advantages, one ascent step.

    The old policy is refreshed every step and the reference policy is the
    initial one.
    """
    rng = np.random.default_rng(cfg.seed)
    policy = init.copy() if init is not None else ToyPolicy.uniform(env.sizes)
    reference = policy.copy()
    ref_lp = {c: reference.log_probs(c) for c in COMPONENTS}
    curve = []
    for step in range(1, steps + 1):
        old_lp = {c: policy.log_probs(c) for c in COMPONENTS}
        outputs = []
        for _ in range(cfg.group_size):
            acts = policy.sample(rng)
            comps = {c: ComponentOutput(acts[c], tuple(old_lp[c][list(acts[c])]), tuple(ref_lp[c][list(acts[c])]),
                                        tuple(old_lp[c][list(acts[c])]))
                     for c in COMPONENTS}
            i, j = acts["mqr"][0], acts["cqe"][0]
            outputs.append(RolloutOutput(comps, env.reward(i, j), env.completion_tokens(i, j)))
        group = Group(env.query.id, outputs)
        adv = compute_advantages(group.rewards, cfg)
        _, grad = surrogate_objective(policy, group, adv, cfg, reference)
        for c in policy.logits:
            policy.logits[c] = policy.logits[c] + cfg.learning_rate * grad[c]
        curve.append({
            "step": step,
            "mean_reward": float(group.rewards.mean()),
            "mean_completion_tokens": float(np.mean([o.completion_tokens for o in outputs])),
        })
    return TrainResult(policy, reference, curve)


def expected_reward(policy: ToyPolicy, env: ToyRetrievalEnv) -> float:
    table = env.reward_table()
    return float(policy.probs("mqr") @ table @ policy.probs("cqe"))


def moving_average(values: Sequence[float], window: int = 8) -> np.ndarray:
    """Trailing moving average (``valid`` mode: ``len(values) - window + 1`` points)."""
    values = np.asarray(values, dtype=np.float64)
    if window < 1:
        raise ValueError("window must be positive")
    if len(values) < window:
        return np.array([])
    kernel = np.ones(window) / window
    return np.convolve(values, kernel, mode="valid")


def write_curve_csv(curve, path):
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "mean_reward", "mean_completion_tokens"])
        for row in curve:
            writer.writerow([row["step"], repr(row["mean_reward"]), repr(row["mean_completion_tokens"])])


class GrpoToyTrainer(BaseEstimator):
    """Estimator wrapper around :func:`train_toy`.

    ``fit(env)`` trains from the uniform policy; ``predict()`` returns the
    greedy ``{component: action}``; ``score(env)`` the expected reward of the
    learned policy.
    """

    def __init__(self, variant="drgrpo", beta=0.0, learning_rate=0.5, group_size=8, n_steps=200,
                 std_floor=1e-8, seed=0):
        self.variant = variant
        self.beta = beta
        self.learning_rate = learning_rate
        self.group_size = group_size
        self.n_steps = n_steps
        self.std_floor = std_floor
        self.seed = seed

    def config(self) -> GrpoConfig:
        return GrpoConfig(variant=self.variant, beta=self.beta, learning_rate=self.learning_rate,
                          std_floor=self.std_floor, group_size=self.group_size, seed=self.seed)

    def fit(self, env: ToyRetrievalEnv, y=None):
        result = train_toy(env, self.config(), self.n_steps)
        self.policy_ = result.policy
        self.reference_ = result.reference
        self.curve_ = result.curve
        return self

    def predict(self, env=None) -> dict:
        check_is_fitted(self, "policy_")
        return self.policy_.greedy()

    def score(self, env: ToyRetrievalEnv, y=None) -> float:
        check_is_fitted(self, "policy_")
        return expected_reward(self.policy_, env)
