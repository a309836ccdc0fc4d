"""Engine layer - Tensor, autodiff, layers, LoRA, optimizer."""

from engine.tensor import Tensor, Tape, backward, no_grad
from engine.gradcheck import grad_check
from engine.base_module import BaseModule
from engine.layers import BlockConfig, LinearMap, TransformerBlock
from engine.lora import LoRAAdapter, LoRAConfig
from engine.optim import AdamW, AdamWConfig, AdamWState, ScheduleConfig, TrainHyperparams, lr_at_step

__all__ = [
    'Tensor',
    'Tape',
    'backward',
    'no_grad',
    'grad_check',
    'BaseModule',
    'BlockConfig',
    'LinearMap',
    'TransformerBlock',
    'LoRAAdapter',
    'LoRAConfig',
    'AdamW',
    'AdamWConfig',
    'AdamWState',
    'ScheduleConfig',
    'TrainHyperparams',
    'lr_at_step',
]
