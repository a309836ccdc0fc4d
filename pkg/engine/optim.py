"""Optim - AdamW và lịch learning rate cosine có warmup."""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigurationError, MissingGradientError, ScheduleRangeError
from .tensor import Tensor, backward
from . import functional as F

logger = logging.getLogger(__name__)

REFERENCE_BATCH_SIZE = 128


@dataclass
class ScheduleConfig:
    """Lịch cosine với warmup tuyến tính."""

    total_steps: int
    base_lr: float = 1e-4
    warmup_steps: int = 100
    min_lr: float = 0.0

    def __post_init__(self):
        if self.total_steps < 1:
            raise ConfigurationError(f"total_steps phải dương, nhận: {self.total_steps}")
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ConfigurationError(
                f"warmup_steps={self.warmup_steps} phải nằm trong [0, {self.total_steps}]"
            )
        if self.base_lr < 0 or self.min_lr < 0 or self.min_lr > self.base_lr:
            raise ConfigurationError(f"Learning rate không hợp lệ: {self}")


@dataclass
class TrainHyperparams:
    """Batch size, gradient accumulation, seed (cấu hình gốc: batch 128, accum 1)."""

    batch_size: int = 8
    grad_accum_steps: int = 1
    seed: int = 0
    clip_norm: Optional[float] = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size phải >= 1, nhận: {self.batch_size}")
        if self.grad_accum_steps < 1:
            raise ConfigurationError(f"grad_accum_steps phải >= 1, nhận: {self.grad_accum_steps}")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ConfigurationError(f"clip_norm phải dương, nhận: {self.clip_norm}")


@dataclass
class AdamWConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01

    def __post_init__(self):
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigurationError(f"beta phải nằm trong [0, 1): {self.beta1}, {self.beta2}")
        if self.eps <= 0 or self.weight_decay < 0:
            raise ConfigurationError(f"eps/weight_decay không hợp lệ: {self}")


def lr_at_step(cfg: ScheduleConfig, step: int) -> float:
    """Learning rate tại ``step``.

    Warmup: base_lr · step / warmup_steps.
    Sau warmup: min_lr + (base_lr − min_lr) · ½(1 + cos(π · tiến độ)).

    Raises:
        ScheduleRangeError: nếu step ngoài [0, total_steps]
    """
    if not 0 <= step <= cfg.total_steps:
        raise ScheduleRangeError(f"step={step} ngoài [0, {cfg.total_steps}]")
    if step < cfg.warmup_steps:
        return cfg.base_lr * step / cfg.warmup_steps
    decay_steps = cfg.total_steps - cfg.warmup_steps
    if decay_steps == 0:
        return cfg.base_lr
    progress = (step - cfg.warmup_steps) / decay_steps
    return cfg.min_lr + (cfg.base_lr - cfg.min_lr) * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class AdamWState:
    """Moment bậc 1/2 theo tên parameter và bộ đếm step."""

    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01

    def hyperparameters(self) -> Dict[str, float]:
        return {
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "weight_decay": self.weight_decay,
        }


def adamw_step(params: Dict[str, Tensor], grads: Dict[str, np.ndarray],
               state: AdamWState, lr: float) -> AdamWState:
    """Một bước AdamW: weight decay tách rời rồi update Adam có bias correction.

    Tensor frozen (requires_grad=False) được bỏ qua.

    Raises:
        MissingGradientError: nếu parameter trainable không có gradient
    """
    trainable = {name: t for name, t in params.items() if t.requires_grad}
    for name in trainable:
        if grads.get(name) is None:
            raise MissingGradientError(f"Parameter '{name}' chưa có gradient")
    state.step_count += 1
    t = state.step_count
    correction1 = 1.0 - state.beta1 ** t
    correction2 = 1.0 - state.beta2 ** t
    for name, tensor in trainable.items():
        grad = grads[name]
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(tensor.data)
            v = np.zeros_like(tensor.data)
        m = state.beta1 * m + (1.0 - state.beta1) * grad
        v = state.beta2 * v + (1.0 - state.beta2) * grad * grad
        state.m[name], state.v[name] = m, v
        weights = tensor.data * (1.0 - lr * state.weight_decay)
        m_hat = m / correction1
        v_hat = v / correction2
        tensor.data = weights - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return state


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """Scale gradient theo global norm; trả về norm trước khi clip."""
    grads = [t.grad for t in params if t.grad is not None]
    total = math.sqrt(float(np.sum([np.sum(g * g) for g in grads]))) if grads else 0.0
    if total > max_norm:
        factor = max_norm / (total + 1e-12)
        for tensor in params:
            if tensor.grad is not None:
                tensor.grad = tensor.grad * factor
    return total


class AdamW:
    """Optimizer AdamW trên một tập parameter có tên."""

    def __init__(self, named_params: Iterable[Tuple[str, Tensor]], beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.01,
                 clip_norm: Optional[float] = None):
        self.params: Dict[str, Tensor] = dict(named_params)
        self.state = AdamWState(beta1=beta1, beta2=beta2, eps=eps, weight_decay=weight_decay)
        self.clip_norm = clip_norm

    @classmethod
    def from_config(cls, named_params: Iterable[Tuple[str, Tensor]], cfg: AdamWConfig,
                    clip_norm: Optional[float] = None) -> "AdamW":
        return cls(named_params, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay, clip_norm)

    @property
    def trainable(self) -> List[Tensor]:
        return [t for t in self.params.values() if t.requires_grad]

    def zero_grad(self):
        for tensor in self.params.values():
            tensor.reset_grad()

    def step(self, lr: float):
        if self.clip_norm is not None:
            clip_grad_norm(self.trainable, self.clip_norm)
        grads = {name: t.grad for name, t in self.params.items() if t.requires_grad}
        adamw_step(self.params, grads, self.state, lr)

    def state_dict(self) -> Dict[str, np.ndarray]:
        """Moment theo tên ``<param>.m`` / ``<param>.v``."""
        out: Dict[str, np.ndarray] = {}
        for name in self.params:
            if name in self.state.m:
                out[f"{name}.m"] = self.state.m[name]
                out[f"{name}.v"] = self.state.v[name]
        return out

    def load_state_dict(self, tensors: Dict[str, np.ndarray], step_count: int):
        self.state.step_count = step_count
        for name in self.params:
            if f"{name}.m" in tensors:
                self.state.m[name] = np.array(tensors[f"{name}.m"], dtype=np.float64)
                self.state.v[name] = np.array(tensors[f"{name}.v"], dtype=np.float64)


StepCallback = Callable[[int, float, float], None]


def accumulate_and_step(micro_batches: Iterable, loss_fn: Callable[[object], Tensor],
                        optimizer: AdamW, lr_fn: Callable[[int], float],
                        grad_accum_steps: int = 1,
                        on_step: Optional[StepCallback] = None,
                        max_steps: Optional[int] = None) -> int:
    """Cộng dồn gradient trung bình trên ``grad_accum_steps`` micro-batch rồi step.

    Args:
        micro_batches: Nguồn micro-batch
        loss_fn: Hàm micro-batch -> loss scalar
        optimizer: AdamW
        lr_fn: step index -> learning rate
        grad_accum_steps: Số micro-batch mỗi optimizer step
        on_step: Callback (step, lr, loss trung bình) sau mỗi step
        max_steps: Dừng sau số step này (None = hết dữ liệu)

    Returns:
        Số optimizer step đã thực hiện
    """
    if grad_accum_steps < 1:
        raise ConfigurationError(f"grad_accum_steps phải >= 1, nhận: {grad_accum_steps}")
    applied = 0
    group: List[object] = []

    def flush(batch_group: List[object]):
        optimizer.zero_grad()
        total = 0.0
        for micro in batch_group:
            loss = loss_fn(micro)
            total += loss.item()
            backward(F.scale(loss, 1.0 / len(batch_group)))
        step = optimizer.state.step_count
        lr = lr_fn(step)
        optimizer.step(lr)
        if on_step is not None:
            on_step(step, lr, total / len(batch_group))

    for micro in micro_batches:
        if max_steps is not None and applied >= max_steps:
            break
        group.append(micro)
        if len(group) == grad_accum_steps:
            flush(group)
            group = []
            applied += 1
    if group and (max_steps is None or applied < max_steps):
        flush(group)
        applied += 1
    return applied
