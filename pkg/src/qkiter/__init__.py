"""QK Iteration: alternating query/key contrastive training against a
frozen-backbone database store, with micro-AP evaluation."""

from .config import ExperimentConfig, load_config
from .data import SynthConfig, build_eval_split, generate_keys
from .loss import LossConfig, contrastive_bce, mine_hard_negatives, score_matrix
from .metrics import macro_ap, micro_ap, rank_all_pairs
from .trainer import PhaseSchedule, PhaseSpec, RunConfig, run_qk_iteration, run_simclr

__version__ = "0.1.0"

__all__ = [
    "ExperimentConfig",
    "load_config",
    "SynthConfig",
    "build_eval_split",
    "generate_keys",
    "LossConfig",
    "contrastive_bce",
    "mine_hard_negatives",
    "score_matrix",
    "macro_ap",
    "micro_ap",
    "rank_all_pairs",
    "PhaseSchedule",
    "PhaseSpec",
    "RunConfig",
    "run_qk_iteration",
    "run_simclr",
]
