"""``moler`` command-line interface.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

A ``--config FILE`` of ``key = value`` lines (keys are long option names,
dashes or underscores) supplies defaults; explicit flags win. Environment
variables only provide credentials and the cache location.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .backends import (
    ENV_CACHE_DIR,
    CachedEmbedder,
    HttpChatBackend,
    HttpEmbedder,
    MockChatBackend,
    OfflineChatBackend,
    OfflineEmbedder,
    RecordingChatBackend,
)
from .corpus import dataset_paths, load_beir, load_qrels
from .errors import CorpusFormatError, MolerError
from .fusion import FusionConfig
from .index import CorpusIndex, build_index
from .metrics import evaluate_run, parse_metrics
from .pipeline import (
    STRATEGIES,
    SearchContext,
    StrategyConfig,
    read_run,
    run_queries,
    sweep_expansions,
    write_run,
    write_sweep_csv,
    write_traces,
)
from .prompts import PromptTemplates

logger = logging.getLogger("moler")


class UsageError(Exception):
    pass


def _int_list(text):
    try:
        values = [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values or min(values) < 1:
        raise argparse.ArgumentTypeError("values must be positive integers")
    return values


def _depth(text):
    if str(text).lower() in ("all", "none", ""):
        return None
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("depth must be positive or 'all'")
    return value


def _bool(text):
    if isinstance(text, bool):
        return text
    return str(text).strip().lower() in ("1", "true", "yes", "on")


# -- backends --------------------------------------------------------------------

def _embedder(args):
    cache_dir = os.environ.get(ENV_CACHE_DIR) or None
    if args.backend == "live":
        return CachedEmbedder(HttpEmbedder(model=args.embedding_model), cache_dir)
    return CachedEmbedder(OfflineEmbedder(args.dim), cache_dir)


def _chat(args):
    if args.backend == "live":
        return HttpChatBackend(model=args.chat_model)
    if args.backend == "mock":
        if not args.script:
            raise UsageError("--backend mock requires --script FILE")
        return MockChatBackend.from_file(args.script)
    return OfflineChatBackend(seed=args.seed or 0)


def _context(args, dataset):
    embedder = _embedder(args)
    if args.index:
        index = CorpusIndex.load(args.index)
        if index.embedder_id != embedder.identifier:
            raise UsageError(f"index was built with {index.embedder_id}, backend embeds with {embedder.identifier}")
    else:
        index = build_index(dataset.corpus, embedder)
    return SearchContext(index, embedder)


def _strategy_config(args, strategy, n=None):
    return StrategyConfig(
        strategy=strategy, n=n or args.n, fusion=FusionConfig(args.rrf_k), pool_depth=args.pool_depth,
        temperature=args.temperature, top_p=args.top_p, top_k=args.top_k, max_tokens=args.max_tokens,
        seed=args.seed, thinking=args.thinking,
        templates=PromptTemplates(args.templates) if args.templates else None,
    )


def _load_dataset(args):
    try:
        return load_beir(args.data, args.split)
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from None


# -- commands --------------------------------------------------------------------

def cmd_ingest(args):
    dataset = _load_dataset(args)
    paths = dataset_paths(args.data, args.split)
    n_judgments = sum(len(d) for d in dataset.qrels.judgments.values())
    manifest = {
        "split": args.split,
        "documents": len(dataset.corpus),
        "queries": len(dataset.queries),
        "judged_queries": len(dataset.qrels),
        "judgments": n_judgments,
        "files": {name: {"path": str(p.relative_to(args.data)),
                         "sha256": hashlib.sha256(p.read_bytes()).hexdigest()}
                  for name, p in paths.items()},
    }
    out = Path(args.manifest) if args.manifest else Path(args.data) / f"manifest-{args.split}.json"
    out.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"docs={len(dataset.corpus)} queries={len(dataset.queries)} judgments={n_judgments}")
    return 0


def cmd_index(args):
    dataset = _load_dataset(args)
    index = build_index(dataset.corpus, _embedder(args))
    index.save(args.out)
    print(f"indexed {len(index)} documents (dim={index.dim}) into {args.out}")
    return 0


def cmd_run(args):
    cfg = _strategy_config(args, args.strategy)
    dataset = _load_dataset(args)
    ctx = _context(args, dataset)
    chat = _chat(args)
    if args.record:
        chat = RecordingChatBackend(chat)
    run, traces = run_queries(list(dataset.queries), ctx, chat, cfg, args.parallel)
    out = Path(args.out or f"{args.strategy}.trec")
    write_run(run, out, args.tag or args.strategy)
    trace_path = Path(args.trace) if args.trace else out.with_suffix(".trace.jsonl")
    write_traces(traces, trace_path)
    if args.record:
        chat.dump(args.record)
    calls = sum(t.chat_calls for t in traces)
    degraded = sum(1 for t in traces if t.fallbacks)
    print(f"strategy={args.strategy} queries={len(run)} chat_calls={calls} degraded={degraded} run={out}")
    return 0


def cmd_eval(args):
    metrics = parse_metrics(args.metric)
    if args.qrels:
        qrels = load_qrels(args.qrels)
    elif args.data:
        qrels = load_qrels(dataset_paths(args.data, args.split)["qrels"])
    else:
        raise UsageError("eval needs --qrels FILE or --data DIR")
    run = read_run(args.run)
    if not run:
        raise UsageError(f"run file {args.run} is empty")
    report = evaluate_run(run, qrels, metrics, threshold=args.threshold, gain=args.gain)
    sys.stdout.write(report.to_table())
    if args.tsv:
        Path(args.tsv).write_text(report.to_tsv(), encoding="utf-8")
    return 0


def cmd_sweep(args):
    dataset = _load_dataset(args)
    ctx = _context(args, dataset)
    chat = _chat(args)
    rows = []
    for strategy in args.strategy.split(","):
        if strategy not in STRATEGIES:
            raise UsageError(f"unknown strategy {strategy!r}")
        rows += sweep_expansions(list(dataset.queries), ctx, chat, strategy, args.n_values, dataset.qrels,
                                 args.metric, _strategy_config(args, strategy), args.parallel)
    out = args.out or "sweep.csv"
    write_sweep_csv(rows, out)
    print(f"wrote {len(rows)} rows to {out}")
    return 0


def cmd_rl_train_toy(args):
    from .rl import GrpoConfig, expected_reward, make_toy_env, train_toy, write_curve_csv
    env = make_toy_env(kind=args.env)
    cfg = GrpoConfig(variant=args.variant, beta=args.beta, learning_rate=args.lr, group_size=args.group_size,
                     seed=args.seed or 0)
    result = train_toy(env, cfg, args.steps)
    out = args.out or f"rl-{args.variant}.csv"
    write_curve_csv(result.curve, out)
    tail = result.curve[-min(20, len(result.curve)):]
    print(f"variant={args.variant} steps={args.steps} final_mean_reward={sum(r['mean_reward'] for r in tail) / len(tail):.4f} "
          f"expected_reward={expected_reward(result.policy, env):.4f} greedy={result.policy.greedy()} "
          f"tv_to_reference={result.policy.total_variation(result.reference):.4f} curve={out}")
    return 0


def cmd_mol_train_toy(args):
    import numpy as np

    from .mol import Vocabulary, read_lines, toy_corpora, train, write_curve_csv
    if args.domain or args.general:
        if not (args.domain and args.general):
            raise UsageError("--domain and --general must be given together")
        domain_lines, general_lines = read_lines(args.domain), read_lines(args.general)
        vocab = Vocabulary.load(args.vocab) if args.vocab else Vocabulary.build(domain_lines, general_lines)
        try:
            domain = [vocab.encode(s) for s in domain_lines]
            general = [vocab.encode(s) for s in general_lines]
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        if len(domain) != len(general):
            raise UsageError(f"corpora must be 1:1, got {len(domain)} domain vs {len(general)} general lines")
    else:
        vocab, domain, general = toy_corpora()
    if args.save_vocab:
        vocab.save(args.save_vocab)
    theta0 = np.random.default_rng(args.seed or 0).normal(0.0, args.init_scale, size=(len(vocab), len(vocab)))
    _, curve = train(theta0, domain, general, args.steps, args.lr, args.mode)
    out = args.out or f"mol-{args.mode}.csv"
    write_curve_csv(curve, out)
    last = curve[-1]
    print(f"mode={args.mode} steps={args.steps} vocab={len(vocab)} ce_domain={last['ce_domain']:.6f} "
          f"kl_general={last['kl_general']:.6f} curve={out}")
    return 0


# -- parser --------------------------------------------------------------------

def _add_data(p):
    p.add_argument("data", help="BEIR dataset directory")
    p.add_argument("--split", default="test")


def _add_backend(p):
    p.add_argument("--backend", choices=("live", "mock", "offline"), default="offline")
    p.add_argument("--script", help="mock backend script (JSONL of prompt/hash -> response)")
    p.add_argument("--dim", type=int, default=256, help="offline embedder dimension")
    p.add_argument("--chat-model", default="qwen3")
    p.add_argument("--embedding-model", default="text-embedding-ada-002")
    p.add_argument("--index", help="prebuilt index directory")


def _add_strategy(p):
    p.add_argument("--n", type=int, default=3, help="number of query expansions")
    p.add_argument("--rrf-k", type=float, default=60.0)
    p.add_argument("--pool-depth", type=_depth, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--temperature", type=float, default=0.7)
    p.add_argument("--top-p", type=float, default=0.8)
    p.add_argument("--top-k", type=int, default=20)
    p.add_argument("--max-tokens", type=int, default=1024)
    p.add_argument("--thinking", type=_bool, nargs="?", const=True, default=False)
    p.add_argument("--templates", help="directory overriding mqr/cqe/q2d/cot templates")
    p.add_argument("--parallel", type=int, default=1)


def build_parser():
    parser = argparse.ArgumentParser(prog="moler", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--config", help="key = value defaults file")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="validate a BEIR dataset and write a manifest")
    _add_data(p)
    p.add_argument("--manifest", help="output path (default DATA/manifest-SPLIT.json)")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("index", help="embed a corpus and persist the index")
    _add_data(p)
    _add_backend(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("run", help="run one retrieval strategy and write a TREC run file")
    _add_data(p)
    _add_backend(p)
    _add_strategy(p)
    p.add_argument("--strategy", choices=STRATEGIES, required=True)
    p.add_argument("--out", help="run file (default STRATEGY.trec)")
    p.add_argument("--trace", help="trace JSONL (default next to the run file)")
    p.add_argument("--tag", help="run tag (default: strategy name)")
    p.add_argument("--record", help="write every chat exchange as a mock script")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="score a run file")
    p.add_argument("run")
    p.add_argument("--qrels")
    p.add_argument("--data")
    p.add_argument("--split", default="test")
    p.add_argument("--metric", default="recall@1k,ndcg@10")
    p.add_argument("--threshold", type=int, default=1, help="minimum grade counted as relevant")
    p.add_argument("--gain", choices=("linear", "exponential"), default="linear")
    p.add_argument("--tsv", help="write machine-readable per-query values here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="metric as a function of the expansion count")
    _add_data(p)
    _add_backend(p)
    _add_strategy(p)
    p.add_argument("--strategy", default="mmlf", help="comma-separated strategies")
    p.add_argument("--n-values", type=_int_list, default=[1, 2, 3, 5, 8])
    p.add_argument("--metric", default="recall@1k,recall@10")
    p.add_argument("--out")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("rl-train-toy", help="GRPO / Dr.GRPO on the toy retrieval environment")
    p.add_argument("--variant", choices=("grpo", "drgrpo"), default="drgrpo")
    p.add_argument("--beta", type=float, default=0.0)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--lr", type=float, default=0.5)
    p.add_argument("--group-size", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--env", choices=("one_good", "flat"), default="one_good")
    p.add_argument("--out")
    p.set_defaults(func=cmd_rl_train_toy)

    p = sub.add_parser("mol-train-toy", help="dual CE/KL training of a bigram model")
    p.add_argument("--mode", choices=("mol", "ce"), default="mol")
    p.add_argument("--domain", help="domain corpus, one whitespace-tokenised sequence per line")
    p.add_argument("--general", help="general corpus, same format")
    p.add_argument("--vocab", help="vocabulary file, one token per line")
    p.add_argument("--save-vocab")
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--lr", type=float, default=1.0)
    p.add_argument("--init-scale", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_mol_train_toy)
    return parser


def _subparsers(parser):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices
    return {}


def load_config(path) -> dict:
    text = Path(path).read_text(encoding="utf-8")
    cp = configparser.ConfigParser(interpolation=None)
    cp.read_string("[moler]\n" + text)
    return {k.replace("-", "_"): v for k, v in cp["moler"].items()}


def apply_config(parser, config: dict):
    """Install config values as subcommand defaults (converted with each option's type)."""
    for sp in _subparsers(parser).values():
        known = {a.dest: a for a in sp._actions if a.option_strings}
        defaults = {}
        for key, raw in config.items():
            action = known.get(key)
            if action is None:
                continue
            value = raw
            if action.type is not None:
                try:
                    value = action.type(raw)
                except (ValueError, argparse.ArgumentTypeError) as exc:
                    raise UsageError(f"config key {key}: {exc}") from None
            if action.choices is not None and value not in action.choices:
                raise UsageError(f"config key {key}: {value!r} not one of {list(action.choices)}")
            defaults[key] = value
            action.required = False
        sp.set_defaults(**defaults)


def main(argv=None):
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    try:
        if known.config:
            apply_config(parser, load_config(known.config))
    except (OSError, configparser.Error, UsageError) as exc:
        print(f"moler: config error: {exc}", file=sys.stderr)
        return 2
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, FileNotFoundError) as exc:
        print(f"moler: {exc}", file=sys.stderr)
        return 2
    except (CorpusFormatError, MolerError, ValueError, OSError) as exc:
        print(f"moler: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
