"""NN Layers - Các khối transformer dùng chung cho vision encoder và LM.

Vision stack: layer_norm + gelu, bidirectional.
Language stack: rms_norm + silu, causal.
Cả hai đều pre-norm: x + attn(norm(x)), rồi + ff(norm(·)).
"""

import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from . import functional as F
from .base_module import BaseModule
from .errors import ConfigurationError, ContextLengthError, ShapeError
from .tensor import Tensor

INIT_STD = 0.02


def init_normal(rng: np.random.Generator, shape: Tuple[int, ...], name: str) -> Tensor:
    """Khởi tạo normal(0, 0.02) từ generator có seed."""
    return Tensor(rng.normal(0.0, INIT_STD, size=shape), requires_grad=True, name=name)


def init_constant(value: float, shape: Tuple[int, ...], name: str) -> Tensor:
    return Tensor(np.full(shape, value, dtype=np.float64), requires_grad=True, name=name)


@dataclass
class BlockConfig:
    """Cấu hình một transformer block."""

    embed_dim: int
    num_heads: int
    ff_multiplier: int = 4
    causal: bool = False
    norm_kind: str = "layer_norm"
    activation: str = "gelu"
    use_bias: bool = True

    def __post_init__(self):
        if self.embed_dim < 1 or self.num_heads < 1 or self.ff_multiplier < 1:
            raise ConfigurationError(f"BlockConfig phải dương: {self}")
        if self.embed_dim % self.num_heads != 0:
            raise ConfigurationError(
                f"embed_dim={self.embed_dim} không chia hết cho num_heads={self.num_heads}"
            )
        if self.norm_kind not in ("layer_norm", "rms_norm"):
            raise ConfigurationError(f"norm_kind không hợp lệ: {self.norm_kind}")
        if self.activation not in ("gelu", "silu"):
            raise ConfigurationError(f"activation không hợp lệ: {self.activation}")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads


class LinearMap(BaseModule):
    """Ánh xạ tuyến tính y = x Wᵀ + b, điểm gắn LoRA adapter."""

    def __init__(self, name: str, weight: Tensor, bias: Optional[Tensor] = None):
        """Khởi tạo linear map.

        Args:
            name: Tên checkpoint (VD: "lm.blocks.0.attn.q")
            weight: Tensor [d_out × d_in]
            bias: Tensor [d_out] hoặc None
        """
        super().__init__(name)
        if weight.ndim != 2:
            raise ShapeError(f"{name}: weight phải 2 chiều, nhận {weight.shape}")
        self.weight = weight
        self.bias = bias
        self.adapter = None  # LoRAAdapter khi đã attach
        self.weight.name = f"{name}.weight"
        if self.bias is not None:
            self.bias.name = f"{name}.bias"

    @classmethod
    def create(cls, name: str, d_in: int, d_out: int, rng: np.random.Generator,
               bias: bool = True) -> "LinearMap":
        weight = init_normal(rng, (d_out, d_in), f"{name}.weight")
        bias_tensor = init_constant(0.0, (d_out,), f"{name}.bias") if bias else None
        return cls(name, weight, bias_tensor)

    @property
    def d_in(self) -> int:
        return self.weight.shape[1]

    @property
    def d_out(self) -> int:
        return self.weight.shape[0]

    def own_parameters(self) -> Dict[str, Tensor]:
        params = {"weight": self.weight}
        if self.bias is not None:
            params["bias"] = self.bias
        if self.adapter is not None:
            params["lora_a"] = self.adapter.a
            params["lora_b"] = self.adapter.b
        return params

    def base_forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)

    def forward(self, x: Tensor) -> Tensor:
        out = self.base_forward(x)
        if self.adapter is not None:
            out = F.add(out, self.adapter.delta(x))
        return out

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)


def multi_head_attention(x: Tensor, cfg: BlockConfig, q: LinearMap, k: LinearMap,
                         v: LinearMap, o: LinearMap, return_weights: bool = False
                         ) -> Union[Tensor, Tuple[Tensor, Tensor]]:
    """Scaled dot-product attention nhiều head.

    Args:
        x: Tensor [T × d]
        cfg: BlockConfig (num_heads, causal)
        q, k, v, o: Các projection
        return_weights: True để trả thêm attention weights [heads × T × T]

    Returns:
        Tensor [T × d] (và weights nếu được yêu cầu)

    Raises:
        ShapeError: nếu x không phải [T × embed_dim]
    """
    if x.ndim != 2 or x.shape[1] != cfg.embed_dim or x.shape[0] < 1:
        raise ShapeError(f"attention: input {x.shape} không khớp embed_dim={cfg.embed_dim}")
    steps = x.shape[0]
    heads, head_dim = cfg.num_heads, cfg.head_dim

    def split(t: Tensor, axes: Tuple[int, int, int]) -> Tensor:
        return F.transpose(F.reshape(t, (steps, heads, head_dim)), axes)

    queries = split(q(x), (1, 0, 2))        # [h, T, dh]
    keys_t = split(k(x), (1, 2, 0))         # [h, dh, T]
    values = split(v(x), (1, 0, 2))         # [h, T, dh]

    scores = F.scale(F.matmul(queries, keys_t), 1.0 / math.sqrt(head_dim))
    mask = np.tril(np.ones((steps, steps), dtype=bool)) if cfg.causal else None
    weights = F.softmax(scores, mask=mask)
    context = F.matmul(weights, values)     # [h, T, dh]
    merged = F.reshape(F.transpose(context, (1, 0, 2)), (steps, cfg.embed_dim))
    out = o(merged)
    if return_weights:
        return out, weights
    return out


def feed_forward(x: Tensor, cfg: BlockConfig, up: LinearMap, down: LinearMap) -> Tensor:
    """down(activation(up(x)))."""
    hidden = cfg.ff_multiplier * cfg.embed_dim
    if up.d_in != cfg.embed_dim or up.d_out != hidden or down.d_in != hidden \
            or down.d_out != cfg.embed_dim:
        raise ShapeError(
            f"feed_forward: up {up.weight.shape}, down {down.weight.shape} "
            f"không khớp d={cfg.embed_dim}, ff={hidden}"
        )
    return down(F.activation(cfg.activation, up(x)))


def positional_embedding(steps: int, table: Tensor) -> Tensor:
    """T hàng đầu của bảng vị trí learned.

    Raises:
        ContextLengthError: nếu T > T_max
    """
    max_steps = table.shape[0]
    if steps > max_steps:
        raise ContextLengthError(f"Chuỗi dài {steps} vượt context {max_steps}")
    return F.take(table, slice(0, steps))


class Attention(BaseModule):
    """Bộ bốn projection q/k/v/o của một block."""

    def __init__(self, name: str, cfg: BlockConfig, rng: np.random.Generator):
        super().__init__(name)
        self.cfg = cfg
        d = cfg.embed_dim
        self.q = LinearMap.create(f"{name}.q", d, d, rng, cfg.use_bias)
        self.k = LinearMap.create(f"{name}.k", d, d, rng, cfg.use_bias)
        self.v = LinearMap.create(f"{name}.v", d, d, rng, cfg.use_bias)
        self.o = LinearMap.create(f"{name}.o", d, d, rng, cfg.use_bias)

    def own_parameters(self) -> Dict[str, Tensor]:
        return {}

    def children(self) -> List[BaseModule]:
        return [self.q, self.k, self.v, self.o]

    def forward(self, x: Tensor, return_weights: bool = False):
        return multi_head_attention(x, self.cfg, self.q, self.k, self.v, self.o, return_weights)


class FeedForward(BaseModule):
    def __init__(self, name: str, cfg: BlockConfig, rng: np.random.Generator):
        super().__init__(name)
        self.cfg = cfg
        hidden = cfg.ff_multiplier * cfg.embed_dim
        self.up = LinearMap.create(f"{name}.up", cfg.embed_dim, hidden, rng, cfg.use_bias)
        self.down = LinearMap.create(f"{name}.down", hidden, cfg.embed_dim, rng, cfg.use_bias)

    def own_parameters(self) -> Dict[str, Tensor]:
        return {}

    def children(self) -> List[BaseModule]:
        return [self.up, self.down]

    def forward(self, x: Tensor) -> Tensor:
        return feed_forward(x, self.cfg, self.up, self.down)


class TransformerBlock(BaseModule):
    """Pre-norm residual block: attention rồi feed-forward."""

    def __init__(self, name: str, cfg: BlockConfig, rng: np.random.Generator):
        super().__init__(name)
        self.cfg = cfg
        d = cfg.embed_dim
        self.norm1_gain = init_constant(1.0, (d,), f"{name}.norm1.gain")
        self.norm2_gain = init_constant(1.0, (d,), f"{name}.norm2.gain")
        # rms_norm của LM không có bias
        with_bias = cfg.norm_kind == "layer_norm"
        self.norm1_bias = init_constant(0.0, (d,), f"{name}.norm1.bias") if with_bias else None
        self.norm2_bias = init_constant(0.0, (d,), f"{name}.norm2.bias") if with_bias else None
        self.attn = Attention(f"{name}.attn", cfg, rng)
        self.ff = FeedForward(f"{name}.ff", cfg, rng)

    def own_parameters(self) -> Dict[str, Tensor]:
        params = {"norm1.gain": self.norm1_gain, "norm2.gain": self.norm2_gain}
        if self.norm1_bias is not None:
            params["norm1.bias"] = self.norm1_bias
            params["norm2.bias"] = self.norm2_bias
        return params

    def children(self) -> List[BaseModule]:
        return [self.attn, self.ff]

    def forward(self, x: Tensor) -> Tensor:
        return transformer_block(x, self.cfg, self)


def transformer_block(x: Tensor, cfg: BlockConfig, params: TransformerBlock) -> Tensor:
    """x + attn(norm(x)), sau đó + ff(norm(·))."""
    h = F.add(x, params.attn.forward(F.norm(cfg.norm_kind, x, params.norm1_gain, params.norm1_bias)))
    return F.add(h, params.ff.forward(F.norm(cfg.norm_kind, h, params.norm2_gain, params.norm2_bias)))


class TransformerStack(BaseModule):
    """Chuỗi ``depth`` block giống nhau."""

    def __init__(self, name: str, cfg: BlockConfig, depth: int, rng: np.random.Generator):
        super().__init__(name)
        self.cfg = cfg
        self.blocks = [TransformerBlock(f"{name}.{i}", cfg, rng) for i in range(depth)]

    def own_parameters(self) -> Dict[str, Tensor]:
        return {}

    def children(self) -> List[BaseModule]:
        return list(self.blocks)

    def forward(self, x: Tensor) -> Tensor:
        for block in self.blocks:
            x = block.forward(x)
        return x
