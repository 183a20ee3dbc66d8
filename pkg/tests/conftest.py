import shutil

import numpy as np
from pathlib import Path

import pytest

from moler.backends import CachedEmbedder, OfflineEmbedder
from moler.corpus import Document
from moler.index import build_index
from moler.pipeline import SearchContext

DATA = Path(__file__).parent / "data"


@pytest.fixture
def toy_dir(tmp_path):
    dest = tmp_path / "toy"
    shutil.copytree(DATA / "toy", dest)
    return dest


def make_ctx(texts, dim=512):
    """Index ``{doc_id: text}`` with a cached offline embedder."""
    docs = [Document(doc_id, "", text) for doc_id, text in texts.items()]
    embedder = CachedEmbedder(OfflineEmbedder(dim))
    return SearchContext(build_index(docs, embedder), embedder)


def random_group(rng, G=8, sizes=None, max_len=4, variant_lengths=True):
    """A random policy, reference and group with ratios away from 1."""
    from moler.rl import ComponentOutput, Group, RolloutOutput, ToyPolicy

    sizes = sizes or {"mqr": 4, "cqe": 3}
    policy = ToyPolicy({c: rng.normal(size=n) for c, n in sizes.items()})
    reference = ToyPolicy({c: rng.normal(size=n) for c, n in sizes.items()})
    outputs = []
    for _ in range(G):
        comps = {}
        for c, n in sizes.items():
            length = int(rng.integers(1, max_len + 1)) if variant_lengths else 1
            tokens = tuple(int(t) for t in rng.integers(0, n, size=length))
            old = policy.log_probs(c)[list(tokens)] + rng.normal(scale=0.3, size=length)
            comps[c] = ComponentOutput(tokens, tuple(old))
        outputs.append(RolloutOutput(comps, float(rng.integers(0, 2) if rng.random() < 0.5 else rng.random())))
    return policy, reference, Group("q", outputs)


def fd_max_rel_error(policy, reference, group, adv, cfg, h=1e-5):
    """Largest relative gap between the analytic surrogate gradient and central differences."""
    from moler.rl import surrogate_objective

    _, grad = surrogate_objective(policy, group, adv, cfg, reference)
    analytic = np.concatenate([grad[c] for c in sorted(grad)])
    theta = policy.flat()
    worst = 0.0
    for k in range(theta.size):
        up, down = theta.copy(), theta.copy()
        up[k] += h
        down[k] -= h
        fd = (surrogate_objective(policy.with_flat(up), group, adv, cfg, reference)[0]
              - surrogate_objective(policy.with_flat(down), group, adv, cfg, reference)[0]) / (2 * h)
        denom = max(abs(fd), abs(analytic[k]), 1e-6)
        worst = max(worst, abs(fd - analytic[k]) / denom)
    return worst


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
