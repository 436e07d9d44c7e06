"""Continual learning with low-rank perturbations of a frozen base network."""
from .checkpoint import load_checkpoint, save_checkpoint
from .engine import ContinualState, ExperimentConfig, learn_task, predict, run_sequence, train_base
from .linalg import LowRankFactors, SVDFactors, svd, truncate, truncation_error
from .metrics import bwt, final_avg_accuracy, increment_report, mopd_aopd, opd
from .perturb import decompose, reconstruct_weights
from .rank_select import fisher_norm, importance_scores, select_ranks
from .reg_prune import PruneSpec, RegCoefficients
from .tasks import TaskDataset, TaskOrder, gen_permuted, gen_split, gen_synthetic

__version__ = "0.1.0"
