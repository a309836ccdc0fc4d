"""LoRA - Low-Rank Adaptation cho LinearMap.

Adapted forward: y = W x + b + (alpha / rank) · B (A x).
A khởi tạo normal(0, 0.02), B bằng 0 nên lúc vừa gắn output không đổi.
"""

import logging
from dataclasses import dataclass, field
from fnmatch import fnmatch
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import functional as F
from .base_module import BaseModule
from .errors import ConfigurationError, LoRAStateError, ShapeError
from .layers import INIT_STD, LinearMap
from .tensor import Tensor

logger = logging.getLogger(__name__)

DEFAULT_TARGETS = ("lm.blocks.*.attn.q", "lm.blocks.*.attn.v")


@dataclass
class LoRAConfig:
    """Hyperparameter của LoRA (mặc định rank=8, alpha=32)."""

    rank: int = 8
    alpha: float = 32.0
    target_selectors: Sequence[str] = field(default_factory=lambda: list(DEFAULT_TARGETS))

    def __post_init__(self):
        if self.rank < 1:
            raise ConfigurationError(f"LoRA rank phải dương, nhận: {self.rank}")
        if self.alpha <= 0:
            raise ConfigurationError(f"LoRA alpha phải dương, nhận: {self.alpha}")
        if not self.target_selectors:
            raise ConfigurationError("LoRA cần ít nhất một target selector")

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank


class LoRAAdapter:
    """Cặp low-rank (A, B) gắn vào một LinearMap đã đóng băng."""

    def __init__(self, base: LinearMap, rank: int, alpha: float, rng: np.random.Generator):
        """Tạo adapter cho ``base``.

        Args:
            base: LinearMap gốc (weight không bị sửa khi adapter còn gắn)
            rank: Hạng r
            alpha: Hệ số alpha, scaling = alpha / r
            rng: Generator cho A
        """
        if rank > min(base.d_in, base.d_out):
            raise ConfigurationError(
                f"{base.name}: rank={rank} vượt min(d_in={base.d_in}, d_out={base.d_out})"
            )
        self.base = base
        self.rank = rank
        self.alpha = alpha
        self.scaling = alpha / rank
        self.a = Tensor(rng.normal(0.0, INIT_STD, size=(rank, base.d_in)),
                        requires_grad=True, name=f"{base.name}.lora_a")
        self.b = Tensor(np.zeros((base.d_out, rank)), requires_grad=True,
                        name=f"{base.name}.lora_b")
        self.merged = False

    @property
    def attached(self) -> bool:
        return self.base.adapter is self and not self.merged

    def delta(self, x: Tensor) -> Tensor:
        """scaling · B (A x)."""
        return F.scale(F.linear(F.linear(x, self.a), self.b), self.scaling)

    def num_parameters(self) -> int:
        return self.a.size + self.b.size

    def __repr__(self) -> str:
        return f"LoRAAdapter(base={self.base.name}, rank={self.rank}, scaling={self.scaling})"


def iter_linear_maps(module: BaseModule) -> List[LinearMap]:
    """Tất cả LinearMap bên trong module, theo thứ tự duyệt cố định."""
    found: List[LinearMap] = []
    stack = [module]
    while stack:
        current = stack.pop(0)
        if isinstance(current, LinearMap):
            found.append(current)
        stack[0:0] = current.children()
    return found


def attach(model: BaseModule, cfg: LoRAConfig, rng: Optional[np.random.Generator] = None) -> int:
    """Gắn adapter vào mọi LinearMap khớp selector.

    Base weight/bias của map được đánh dấu frozen; chỉ A, B là trainable.

    Args:
        model: Module chứa các LinearMap
        cfg: LoRAConfig
        rng: Generator cho A (mặc định seed 0)

    Returns:
        Số map đã được gắn adapter

    Raises:
        ConfigurationError: nếu không có map nào khớp
        LoRAStateError: nếu map đã có adapter
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    maps = iter_linear_maps(model)
    targets = [m for m in maps if any(fnmatch(m.name, pattern) for pattern in cfg.target_selectors)]
    if not targets:
        available = ", ".join(m.name for m in maps)
        raise ConfigurationError(
            f"Không có LinearMap nào khớp {list(cfg.target_selectors)}. Có sẵn: {available}"
        )
    for linear in targets:
        if linear.adapter is not None:
            raise LoRAStateError(f"{linear.name} đã có adapter")
        linear.weight.requires_grad = False
        if linear.bias is not None:
            linear.bias.requires_grad = False
        linear.adapter = LoRAAdapter(linear, cfg.rank, cfg.alpha, rng)
    logger.info("🔧 Đã gắn LoRA (rank=%d, alpha=%g, scaling=%g) vào %d map",
                cfg.rank, cfg.alpha, cfg.scaling, len(targets))
    return len(targets)


def lora_forward(adapter: LoRAAdapter, x: Tensor) -> Tensor:
    """Base output + scaling · B(Ax).

    Raises:
        LoRAStateError: nếu adapter không còn gắn
        ShapeError: nếu x không khớp d_in
    """
    if not adapter.attached:
        raise LoRAStateError(f"Adapter của {adapter.base.name} không còn gắn")
    if x.shape[-1] != adapter.base.d_in:
        raise ShapeError(f"lora_forward: input {x.shape} không khớp d_in={adapter.base.d_in}")
    return F.add(adapter.base.base_forward(x), adapter.delta(x))


def merged_weight(adapter: LoRAAdapter) -> np.ndarray:
    return adapter.base.weight.data + adapter.scaling * (adapter.b.data @ adapter.a.data)


def merge(adapter: LoRAAdapter) -> LinearMap:
    """Gộp adapter thành map mới có weight W + scaling·B·A và tháo adapter.

    Raises:
        LoRAStateError: nếu adapter đã merge hoặc đã tháo
    """
    if not adapter.attached:
        raise LoRAStateError(f"Adapter của {adapter.base.name} đã merge hoặc đã tháo")
    base = adapter.base
    weight = Tensor(merged_weight(adapter), requires_grad=base.weight.requires_grad)
    bias = None
    if base.bias is not None:
        bias = Tensor(base.bias.data, requires_grad=base.bias.requires_grad)
    base.adapter = None
    adapter.merged = True
    return LinearMap(base.name, weight, bias)


def merge_all(model: BaseModule) -> int:
    """Gộp mọi adapter đang gắn vào weight của map (bước deploy).

    Returns:
        Số adapter đã gộp
    """
    count = 0
    for linear in iter_linear_maps(model):
        if linear.adapter is None:
            continue
        merged = merge(linear.adapter)
        linear.weight = merged.weight
        linear.weight.name = f"{linear.name}.weight"
        count += 1
    if count:
        logger.info("🔗 Đã merge %d adapter vào base weight", count)
    return count


def detach_all(model: BaseModule) -> int:
    """Tháo mọi adapter, giữ nguyên base weight."""
    count = 0
    for linear in iter_linear_maps(model):
        if linear.adapter is not None:
            linear.adapter = None
            count += 1
    return count


def trainable_parameters(model: BaseModule) -> List[Tuple[str, Tensor]]:
    """Các tensor chưa bị đóng băng, kèm tên."""
    return [(name, tensor) for name, tensor in model.named_parameters() if tensor.requires_grad]
