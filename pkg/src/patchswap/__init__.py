"""Self-distillation through intra-class patch swap, on a small numpy autodiff core."""

__version__ = "0.1.0"

from .augment import SwapPolicy, apply_patch_swap, intra_patch_swap, make_swap_mask, swap_batch
from .data import Dataset, GlyphSpec, gen_two_part_glyphs, load_cifar_binary, load_idx
from .distill import DistillConfig, kd_logit_gradient, kd_loss_pair, kl_divergence, total_loss
from .metrics import PredictionSet, aurc, brier, ece, fpr_at_tpr, top_k_accuracy
from .model import Model, ModelSpec, build_model, forward_logits
from .pairing import PairBatch, draw_partners, sample_pair_batches
from .tensor import GradTape, Tensor, finite_diff_check, verification_mode
from .train import PrSchedule, TrainConfig, TrainReport, fit, load_checkpoint, p_r_at, save_checkpoint, sgd_step

__all__ = [
    "Dataset", "DistillConfig", "GlyphSpec", "GradTape", "Model", "ModelSpec", "PairBatch",
    "PredictionSet", "PrSchedule", "SwapPolicy", "Tensor", "TrainConfig", "TrainReport",
    "apply_patch_swap", "aurc", "brier", "build_model", "draw_partners", "ece", "finite_diff_check",
    "fit", "forward_logits", "fpr_at_tpr", "gen_two_part_glyphs", "intra_patch_swap", "kd_logit_gradient",
    "kd_loss_pair", "kl_divergence", "load_checkpoint", "load_cifar_binary", "load_idx", "make_swap_mask",
    "p_r_at", "sample_pair_batches", "save_checkpoint", "sgd_step", "swap_batch", "top_k_accuracy",
    "total_loss", "verification_mode",
]  # fmt: skip
