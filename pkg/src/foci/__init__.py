"""Post-hoc rationale selection over frozen multiple-instance classifiers."""
from .backbones import ARCHETYPES, AttentionPoolMIL, ClsTransformerMIL, HardTopKMIL, make_backbone
from .bags import Bag, Dataset, SynthConfig, generate_synthetic, load_dataset, save_dataset
from .checkpoint import load_checkpoint, save_checkpoint
from .srp import aukc, deletion_auc, msk, msk_cond, reach, reveal_curve, shi
from .stats import roc_auc, wilcoxon_signed_rank
from .training import FOCISelector

__version__ = "0.1.0"

__all__ = [
    "ARCHETYPES",
    "AttentionPoolMIL",
    "ClsTransformerMIL",
    "HardTopKMIL",
    "make_backbone",
    "Bag",
    "Dataset",
    "SynthConfig",
    "generate_synthetic",
    "load_dataset",
    "save_dataset",
    "load_checkpoint",
    "save_checkpoint",
    "FOCISelector",
    "reveal_curve",
    "msk",
    "reach",
    "msk_cond",
    "aukc",
    "shi",
    "deletion_auc",
    "roc_auc",
    "wilcoxon_signed_rank",
]
