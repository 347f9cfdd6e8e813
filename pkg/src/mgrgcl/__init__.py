"""Multi-granularity re-identification features with unsupervised group
contrastive domain adaptation, in numpy."""

from .clustering import ClusterAssignment, ClusteringConfig, dbscan
from .dataset import Dataset, DatasetManifest, SynthConfig, generate_synthetic_pair, load_dataset
from .evaluation import EvalProtocol, RankingResult, evaluate_retrieval
from .memory import GroupMemory, init_memory, update_memory
from .mgr import MGRParams, backward, forward, forward_batch, init_params
from .pipeline import RunConfig, adapt, run_variant, train_source

__version__ = "0.1.0"
