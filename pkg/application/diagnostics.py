"""Diagnostics - Bộ gradient check cho từng thành phần khả vi."""

import logging
from dataclasses import dataclass
from typing import Callable, List, Tuple

import numpy as np

from engine import functional as F
from engine.gradcheck import grad_check
from engine.layers import BlockConfig, LinearMap, TransformerBlock
from engine.lora import LoRAAdapter, LoRAConfig
from engine.tensor import Tensor
from application.tokenizer import EOS_ID
from application.vlm_model import (LMConfig, VisionConfig, VLMModel, encode_image, forward_loss,
                                   sample_loss)

logger = logging.getLogger(__name__)

GRADCHECK_THRESHOLD = 1e-4

CheckFactory = Callable[[np.random.Generator], Tuple[Callable[[Tensor], Tensor], Tensor]]


@dataclass
class CheckResult:
    component: str
    max_relative_error: float

    @property
    def passed(self) -> bool:
        return self.max_relative_error < GRADCHECK_THRESHOLD


def _projection(rng: np.random.Generator, shape) -> Tensor:
    return Tensor(rng.normal(size=shape))


def _projected(op: Callable[[Tensor], Tensor], out_shape, rng: np.random.Generator):
    """Scalar hóa output bằng phép chiếu ngẫu nhiên cố định."""
    weights = _projection(rng, out_shape)
    return lambda x: F.sum(F.mul(op(x), weights))


def _leaf(rng: np.random.Generator, *shape) -> Tensor:
    return Tensor(rng.normal(size=shape), requires_grad=True)


def _check_matmul(rng):
    b = Tensor(rng.normal(size=(5, 3)))
    return _projected(lambda x: F.matmul(x, b), (4, 3), rng), _leaf(rng, 4, 5)


def _check_linear(rng):
    w, bias = Tensor(rng.normal(size=(3, 5))), Tensor(rng.normal(size=(3,)))
    return _projected(lambda x: F.linear(x, w, bias), (4, 3), rng), _leaf(rng, 4, 5)


def _check_elementwise(rng):
    other = Tensor(rng.normal(size=(3, 4)))
    op = lambda x: F.sub(F.mul(F.add(x, other), x), F.scale(x, 0.5))  # noqa: E731
    return _projected(op, (3, 4), rng), _leaf(rng, 3, 4)


def _check_shape_ops(rng):
    other = Tensor(rng.normal(size=(2, 6)))
    op = lambda x: F.concat([F.reshape(F.transpose(x, (1, 0)), (2, 6)), other], axis=0)  # noqa: E731
    return _projected(op, (4, 6), rng), _leaf(rng, 4, 3)


def _check_take_mean(rng):
    op = lambda x: F.mean(F.take(x, slice(1, 4)), axis=0)  # noqa: E731
    return _projected(op, (5,), rng), _leaf(rng, 6, 5)


def _check_softmax(rng):
    mask = np.tril(np.ones((5, 5), dtype=bool))
    return _projected(lambda x: F.softmax(x, mask=mask), (5, 5), rng), _leaf(rng, 5, 5)


def _check_layer_norm(rng):
    gain, bias = Tensor(rng.normal(size=(6,))), Tensor(rng.normal(size=(6,)))
    return _projected(lambda x: F.layer_norm(x, gain, bias), (4, 6), rng), _leaf(rng, 4, 6)


def _check_rms_norm(rng):
    gain = Tensor(rng.normal(size=(6,)))
    return _projected(lambda x: F.rms_norm(x, gain), (4, 6), rng), _leaf(rng, 4, 6)


def _check_gelu(rng):
    return _projected(F.gelu, (4, 5), rng), _leaf(rng, 4, 5)


def _check_silu(rng):
    return _projected(F.silu, (4, 5), rng), _leaf(rng, 4, 5)


def _check_embedding(rng):
    ids = [3, 1, 3, 0]
    return _projected(lambda t: F.embedding_lookup(t, ids), (4, 5), rng), _leaf(rng, 6, 5)


def _check_cross_entropy(rng):
    targets = [int(t) for t in rng.integers(0, 7, size=5)]
    mask = [False, True, True, False, True]
    return (lambda x: F.cross_entropy(x, targets, mask)), _leaf(rng, 5, 7)


def _block_check(cfg: BlockConfig):
    def factory(rng):
        block = TransformerBlock("check.block", cfg, rng)
        return _projected(block.forward, (4, cfg.embed_dim), rng), _leaf(rng, 4, cfg.embed_dim)
    return factory


def _check_lora(rng):
    base = LinearMap.create("check.lora", 6, 5, rng)
    adapter = LoRAAdapter(base, rank=2, alpha=4.0, rng=rng)
    base.adapter = adapter
    adapter.b.data = rng.normal(size=adapter.b.shape)
    return _projected(base.forward, (3, 5), rng), _leaf(rng, 3, 6)


def _tiny_model(seed: int) -> VLMModel:
    vision = VisionConfig(image_size=8, patch_size=4, embed_dim=8, depth=1, num_heads=2)
    lm = LMConfig(embed_dim=8, depth=1, num_heads=2, context_len=32)
    return VLMModel(vision, lm, seed=seed)


def _check_vision_encoder(rng):
    model = _tiny_model(int(rng.integers(1 << 16)))
    image = rng.uniform(size=(8, 8))
    head = _projection(rng, (model.vision_cfg.num_patches, model.vision_cfg.embed_dim))
    weight = model.vision.patch_embed.weight
    return (lambda _: F.sum(F.mul(encode_image(model, image), head))), weight


def _check_fused_loss(rng):
    model = _tiny_model(int(rng.integers(1 << 16)))
    image = rng.uniform(size=(8, 8))
    question, answer = [72, 105], [121, EOS_ID]
    return (lambda _: sample_loss(model, image, question, answer)), model.projector.weight


def _batch_loss_check(pick: Callable[[VLMModel], Tensor]) -> CheckFactory:
    """forward_loss trên batch 2 mẫu (độ dài câu trả lời khác nhau), LoRA đã gắn."""
    def factory(rng):
        model = _tiny_model(int(rng.integers(1 << 16)))
        model.attach_lora(LoRAConfig(rank=2, alpha=4.0))
        for name, tensor in model.named_parameters():
            if name.endswith("lora_b"):
                tensor.data = rng.normal(0.0, 0.5, size=tensor.shape)
        batch = [
            (rng.uniform(size=(8, 8)), [72, 105], [121, EOS_ID]),
            (rng.uniform(size=(8, 8)), [87, 63, 33], [110, 111, 112, EOS_ID]),
        ]
        return (lambda _: forward_loss(model, batch)), pick(model)
    return factory


SUITE: List[Tuple[str, CheckFactory]] = [
    ("matmul", _check_matmul),
    ("linear", _check_linear),
    ("elementwise", _check_elementwise),
    ("reshape/transpose/concat", _check_shape_ops),
    ("take/mean", _check_take_mean),
    ("softmax (causal mask)", _check_softmax),
    ("layer_norm", _check_layer_norm),
    ("rms_norm", _check_rms_norm),
    ("gelu", _check_gelu),
    ("silu", _check_silu),
    ("embedding_lookup", _check_embedding),
    ("cross_entropy", _check_cross_entropy),
    ("vision block", _block_check(BlockConfig(8, 2))),
    ("lm block", _block_check(BlockConfig(8, 2, causal=True, norm_kind="rms_norm",
                                          activation="silu", use_bias=False))),
    ("lora linear", _check_lora),
    ("vision encoder", _check_vision_encoder),
    ("fused answer loss", _check_fused_loss),
    ("batch loss: vision patch", _batch_loss_check(lambda m: m.vision.patch_embed.weight)),
    ("batch loss: projector", _batch_loss_check(lambda m: m.projector.weight)),
    ("batch loss: lora b",
     _batch_loss_check(lambda m: m.lm.blocks.blocks[0].attn.v.adapter.b)),
]


def run_gradcheck_suite(seed: int = 0) -> List[CheckResult]:
    """Chạy toàn bộ gradient check; mỗi thành phần dùng generator riêng theo seed."""
    results = []
    for index, (component, factory) in enumerate(SUITE):
        rng = np.random.default_rng([seed, index])
        f, x = factory(rng)
        result = CheckResult(component, grad_check(f, x))
        if not result.passed:
            logger.warning("⚠️ Gradcheck %s: relative error %.2e", component,
                           result.max_relative_error)
        results.append(result)
    return results
