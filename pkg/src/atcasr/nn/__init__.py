from .checkpoint import CheckpointError, load_checkpoint, load_into, save_checkpoint
from .gradcheck import GradCheckError, grad_check
from .optim import AdamState, adam_step, clip_grad_norm, grads_of, zero_grads
from .params import ParameterStore
from .schedule import LRSchedule, halving_schedule, lr_at, srl_schedule

__all__ = [
    "AdamState",
    "CheckpointError",
    "GradCheckError",
    "LRSchedule",
    "ParameterStore",
    "adam_step",
    "clip_grad_norm",
    "grad_check",
    "grads_of",
    "halving_schedule",
    "load_checkpoint",
    "load_into",
    "lr_at",
    "save_checkpoint",
    "srl_schedule",
    "zero_grads",
]
