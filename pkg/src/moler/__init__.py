"""Multi-query expansion, pre-answer passages and reciprocal-rank late fusion for dense retrieval.

Also ships desk-scale implementations of the training math around it:
GRPO / Dr.GRPO objectives with recall rewards, and the dual CE/KL
continual-pretraining loss.
"""

__version__ = "0.1.0"

from .corpus import Dataset, Document, Query, RelevanceJudgments, load_beir, load_corpus, load_qrels, load_queries, relevant_set
from .fusion import FusionConfig, rrf_fuse
from .index import CorpusIndex, DenseRetriever, RankedList, build_index, cosine, rank_all
from .metrics import evaluate_run, ndcg_at_k, recall_at_k
from .mol import MolTrainer
from .pipeline import QueryExpansionRetriever, SearchContext, StrategyConfig
from .rl import GrpoConfig, GrpoToyTrainer

__all__ = [
    "CorpusIndex", "Dataset", "DenseRetriever", "Document", "FusionConfig", "GrpoConfig", "GrpoToyTrainer",
    "MolTrainer", "Query", "QueryExpansionRetriever", "RankedList", "RelevanceJudgments", "SearchContext",
    "StrategyConfig", "build_index", "cosine", "evaluate_run", "load_beir", "load_corpus", "load_qrels",
    "load_queries", "ndcg_at_k", "rank_all", "recall_at_k", "relevant_set", "rrf_fuse",
]
