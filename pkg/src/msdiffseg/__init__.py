"""Mask diffusion for semantic segmentation with cross-bridge linear attention."""

from .attention import AttentionConfig, AttentionInputs, attend, cbla, dot_attention, linear_attention, multi_head
from .diffusion import NoiseSchedule, build_schedule, reverse_step, sample
from .engine import RunReport, TrainConfig, ablate, bench_attention, evaluate, infer, train
from .losses import LossWeights, composite_loss, ce_loss, dice_loss, mse_loss
from .metrics import confusion, f1, iou, macro_f1, miou
from .network import Checkpoint, ModelConfig, init_params, pmsdiff_forward
from .tensor import Tensor, backward, fd_check

__all__ = [
    "AttentionConfig",
    "AttentionInputs",
    "Checkpoint",
    "LossWeights",
    "ModelConfig",
    "NoiseSchedule",
    "RunReport",
    "Tensor",
    "TrainConfig",
    "ablate",
    "attend",
    "backward",
    "bench_attention",
    "build_schedule",
    "cbla",
    "ce_loss",
    "composite_loss",
    "confusion",
    "dice_loss",
    "dot_attention",
    "evaluate",
    "f1",
    "fd_check",
    "infer",
    "init_params",
    "iou",
    "linear_attention",
    "macro_f1",
    "miou",
    "mse_loss",
    "multi_head",
    "pmsdiff_forward",
    "reverse_step",
    "sample",
    "train",
]
