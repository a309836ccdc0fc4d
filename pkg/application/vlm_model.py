"""VLM Model - Vision encoder → projector → prefix fusion → language decoder.

Ảnh được chia patch, mã hóa bởi stack bidirectional (layer_norm + gelu),
chiếu sang không gian embedding của LM và chèn làm prefix trước câu hỏi.
LM là stack causal (rms_norm + silu) sinh câu trả lời greedy.
"""

import logging
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from engine import functional as F
from engine import lora
from engine.base_module import BaseModule
from engine.errors import (ConfigurationError, ContextLengthError, ContractError,
                           EmptyObjectiveError, ShapeError)
from engine.layers import BlockConfig, LinearMap, TransformerStack, init_constant, init_normal
from engine.layers import positional_embedding
from engine.tensor import Tensor, no_grad
from application.tokenizer import BOS_ID, EOS_ID, IMG_ID, PAD_ID, VOCAB_SIZE, ByteTokenizer

logger = logging.getLogger(__name__)

ZONE_PREFIX = "prefix"
ZONE_QUESTION = "question"
ZONE_ANSWER = "answer"


@dataclass
class VisionConfig:
    """Cấu hình vision encoder (bản thu nhỏ)."""

    image_size: int = 32
    channels: int = 1
    patch_size: int = 8
    embed_dim: int = 32
    depth: int = 2
    num_heads: int = 4

    def __post_init__(self):
        if self.channels != 1:
            raise ConfigurationError(f"Chỉ hỗ trợ ảnh 1 kênh, nhận channels={self.channels}")
        if self.patch_size < 1 or self.image_size % self.patch_size != 0:
            raise ConfigurationError(
                f"image_size={self.image_size} không chia hết cho patch_size={self.patch_size}"
            )
        if self.depth < 0:
            raise ConfigurationError(f"depth không được âm: {self.depth}")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    def block_config(self) -> BlockConfig:
        return BlockConfig(self.embed_dim, self.num_heads, causal=False,
                           norm_kind="layer_norm", activation="gelu", use_bias=True)


@dataclass
class LMConfig:
    """Cấu hình language decoder (bản thu nhỏ)."""

    vocab_size: int = VOCAB_SIZE
    embed_dim: int = 64
    depth: int = 4
    num_heads: int = 4
    context_len: int = 256

    def __post_init__(self):
        if self.vocab_size < VOCAB_SIZE:
            raise ConfigurationError(f"vocab_size phải >= {VOCAB_SIZE}, nhận {self.vocab_size}")
        if self.context_len < 2 or self.depth < 0:
            raise ConfigurationError(f"LMConfig không hợp lệ: {self}")

    def block_config(self) -> BlockConfig:
        return BlockConfig(self.embed_dim, self.num_heads, causal=True,
                           norm_kind="rms_norm", activation="silu", use_bias=False)


@dataclass
class GenerationParams:
    max_new_tokens: int = 16
    strategy: str = "greedy"

    def __post_init__(self):
        if self.max_new_tokens < 1:
            raise ConfigurationError(f"max_new_tokens phải >= 1, nhận {self.max_new_tokens}")
        if self.strategy != "greedy":
            raise ConfigurationError(f"Chỉ hỗ trợ greedy, nhận {self.strategy}")


@dataclass
class ParameterCount:
    total: int
    trainable: int


@dataclass
class FusedSequence:
    """Embedding đã ghép và nhãn vùng cho từng vị trí."""

    embeddings: Tensor
    zones: List[str]
    prefix_len: int
    question_len: int

    @property
    def length(self) -> int:
        return len(self.zones)


class VisionEncoder(BaseModule):
    """Patch embedding + vị trí learned + stack bidirectional + layer_norm cuối."""

    def __init__(self, cfg: VisionConfig, rng: np.random.Generator):
        super().__init__("vision")
        self.cfg = cfg
        d = cfg.embed_dim
        self.patch_embed = LinearMap.create("vision.patch_embed", cfg.patch_dim, d, rng)
        self.pos = init_normal(rng, (cfg.num_patches, d), "vision.pos")
        self.blocks = TransformerStack("vision.blocks", cfg.block_config(), cfg.depth, rng)
        self.norm_gain = init_constant(1.0, (d,), "vision.norm_f.gain")
        self.norm_bias = init_constant(0.0, (d,), "vision.norm_f.bias")

    def own_parameters(self) -> Dict[str, Tensor]:
        return {"pos": self.pos, "norm_f.gain": self.norm_gain, "norm_f.bias": self.norm_bias}

    def children(self) -> List[BaseModule]:
        return [self.patch_embed, self.blocks]

    def patchify(self, image) -> np.ndarray:
        """Chia ảnh thành patch không chồng lấn theo thứ tự row-major.

        Raises:
            ShapeError: nếu kích thước ảnh không khớp cấu hình
        """
        pixels = np.asarray(image, dtype=np.float64)
        if pixels.ndim == 3 and pixels.shape[0] == self.cfg.channels:
            pixels = pixels[0]
        size, patch = self.cfg.image_size, self.cfg.patch_size
        if pixels.shape != (size, size):
            raise ShapeError(f"Ảnh shape {pixels.shape}, cần ({size}, {size})")
        grid = size // patch
        return pixels.reshape(grid, patch, grid, patch).transpose(0, 2, 1, 3).reshape(
            grid * grid, patch * patch)

    def embed_patches(self, image) -> Tensor:
        patches = Tensor(self.patchify(image))
        return F.add(self.patch_embed(patches), positional_embedding(self.cfg.num_patches, self.pos))

    def forward(self, image) -> Tensor:
        hidden = self.blocks.forward(self.embed_patches(image))
        return F.layer_norm(hidden, self.norm_gain, self.norm_bias)


class LanguageModel(BaseModule):
    """Decoder causal: token + vị trí learned, stack, rms_norm, output head."""

    def __init__(self, cfg: LMConfig, rng: np.random.Generator):
        super().__init__("lm")
        self.cfg = cfg
        d = cfg.embed_dim
        self.tok = init_normal(rng, (cfg.vocab_size, d), "lm.tok")
        self.pos = init_normal(rng, (cfg.context_len, d), "lm.pos")
        self.blocks = TransformerStack("lm.blocks", cfg.block_config(), cfg.depth, rng)
        self.norm_gain = init_constant(1.0, (d,), "lm.norm_f.gain")
        self.head = LinearMap.create("lm.head", d, cfg.vocab_size, rng, bias=False)

    def own_parameters(self) -> Dict[str, Tensor]:
        return {"tok": self.tok, "pos": self.pos, "norm_f.gain": self.norm_gain}

    def children(self) -> List[BaseModule]:
        return [self.blocks, self.head]

    def embed_tokens(self, ids: Sequence[int]) -> Tensor:
        return F.embedding_lookup(self.tok, ids)

    def forward(self, embeddings: Tensor) -> Tensor:
        """Embedding [T × d] -> logits [T × V]."""
        steps = embeddings.shape[0]
        hidden = F.add(embeddings, positional_embedding(steps, self.pos))
        hidden = self.blocks.forward(hidden)
        return self.head(F.rms_norm(hidden, self.norm_gain))


class VLMModel(BaseModule):
    """Toàn bộ pipeline: vision encoder, projector, language model."""

    def __init__(self, vision: Optional[VisionConfig] = None, lm: Optional[LMConfig] = None,
                 seed: int = 0):
        """Khởi tạo model với parameter tất định theo seed.

        Args:
            vision: VisionConfig (mặc định toy config)
            lm: LMConfig (mặc định toy config)
            seed: Seed cho generator khởi tạo
        """
        super().__init__("vlm")
        self.vision_cfg = vision or VisionConfig()
        self.lm_cfg = lm or LMConfig()
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.vision = VisionEncoder(self.vision_cfg, rng)
        self.projector = LinearMap.create(
            "projector", self.vision_cfg.embed_dim, self.lm_cfg.embed_dim, rng)
        self.lm = LanguageModel(self.lm_cfg, rng)
        self.tokenizer = ByteTokenizer()
        self.special_tokens = {"PAD": PAD_ID, "BOS": BOS_ID, "EOS": EOS_ID, "IMG": IMG_ID}
        self.lora_config: Optional[lora.LoRAConfig] = None

    def own_parameters(self) -> Dict[str, Tensor]:
        return {}

    def children(self) -> List[BaseModule]:
        return [self.vision, self.projector, self.lm]

    def attach_lora(self, cfg: lora.LoRAConfig) -> int:
        """Đóng băng base LM rồi gắn adapter theo cfg."""
        self.lm.freeze()
        count = lora.attach(self.lm, cfg, np.random.default_rng([self.seed, 1]))
        self.lora_config = cfg
        return count

    def has_lora(self) -> bool:
        return any(m.adapter is not None for m in lora.iter_linear_maps(self.lm))

    def merge_lora(self) -> int:
        """Gộp mọi adapter vào base weight; model sau đó không còn kiến trúc LoRA."""
        count = lora.merge_all(self.lm)
        self.lora_config = None
        return count

    def architecture(self) -> Dict:
        arch = {"vision": asdict(self.vision_cfg), "lm": asdict(self.lm_cfg), "seed": self.seed}
        if self.lora_config is not None and self.has_lora():
            arch["lora"] = {
                "rank": self.lora_config.rank,
                "alpha": self.lora_config.alpha,
                "target_selectors": list(self.lora_config.target_selectors),
            }
        return arch

    def summary(self) -> Dict[str, ParameterCount]:
        """Số parameter theo từng tower."""
        out = {m.name: ParameterCount(m.num_parameters(), m.num_parameters(True))
               for m in self.children()}
        out["total"] = count_parameters(self)
        return out


# --------------------------------------------------------------------------- #
# Pipeline operations
# --------------------------------------------------------------------------- #
def encode_image(model: VLMModel, image) -> Tensor:
    """Ảnh [H × W] trong [0, 1] -> feature [P × vision.embed_dim]."""
    return model.vision.forward(image)


def fuse(model: VLMModel, image_features: Optional[Tensor],
         question_ids: Sequence[int]) -> FusedSequence:
    """Ghép [IMG] + projector(features) + [BOS] + câu hỏi.

    Không có feature (P = 0) thì bỏ cả marker IMG, chỉ còn [BOS] + câu hỏi.

    Raises:
        ContextLengthError: nếu chuỗi vượt context_len
    """
    question = list(question_ids)
    prefix_len = 0 if image_features is None else 1 + image_features.shape[0]
    total = prefix_len + 1 + len(question)
    if total > model.lm_cfg.context_len:
        raise ContextLengthError(
            f"Chuỗi fused dài {total} vượt context_len={model.lm_cfg.context_len}")
    parts = []
    if image_features is not None:
        parts.append(model.lm.embed_tokens([IMG_ID]))
        parts.append(model.projector(image_features))
    parts.append(model.lm.embed_tokens([BOS_ID] + question))
    embeddings = parts[0] if len(parts) == 1 else F.concat(parts, axis=0)
    zones = [ZONE_PREFIX] * prefix_len + [ZONE_QUESTION] * (1 + len(question))
    return FusedSequence(embeddings, zones, prefix_len, 1 + len(question))


def _trim_answer(answer_ids: Sequence[int]) -> List[int]:
    answer = list(answer_ids)
    if not answer:
        raise EmptyObjectiveError("Câu trả lời rỗng, không có vị trí nào để tính loss")
    if EOS_ID not in answer:
        raise ContractError("answer_ids phải kết thúc bằng EOS")
    return answer[:answer.index(EOS_ID) + 1]


def sample_loss(model: VLMModel, image, question_ids: Sequence[int],
                answer_ids: Sequence[int]) -> Tensor:
    """Next-token cross-entropy chỉ trên các token câu trả lời của một mẫu.

    ``image=None`` cho objective text-only (không có prefix ảnh).
    """
    answer = _trim_answer(answer_ids)
    features = None if image is None else encode_image(model, image)
    fused = fuse(model, features, question_ids)
    length = fused.length + len(answer) - 1
    if length > model.lm_cfg.context_len:
        raise ContextLengthError(f"Chuỗi huấn luyện dài {length} vượt context_len")
    inputs = fused.embeddings
    if len(answer) > 1:
        inputs = F.concat([inputs, model.lm.embed_tokens(answer[:-1])], axis=0)
    logits = model.lm.forward(inputs)
    start = fused.length - 1
    targets = [0] * start + answer
    mask = [False] * start + [True] * len(answer)
    return F.cross_entropy(logits, targets, mask)


def forward_loss(model: VLMModel, batch: Sequence[Tuple]) -> Tensor:
    """Trung bình trên batch của loss trung bình mỗi mẫu.

    Args:
        batch: Các tuple (image hoặc None, question_ids, answer_ids)

    Raises:
        EmptyObjectiveError: nếu batch rỗng hoặc có câu trả lời rỗng
    """
    if not batch:
        raise EmptyObjectiveError("Batch rỗng")
    total = None
    for image, question_ids, answer_ids in batch:
        loss = sample_loss(model, image, question_ids, answer_ids)
        total = loss if total is None else F.add(total, loss)
    return F.scale(total, 1.0 / len(batch))


def answer_logits(model: VLMModel, image, question_ids: Sequence[int],
                  answer_prefix: Sequence[int] = ()) -> Tensor:
    """Logits cho toàn bộ chuỗi fused + phần đầu câu trả lời."""
    features = None if image is None else encode_image(model, image)
    fused = fuse(model, features, question_ids)
    inputs = fused.embeddings
    if answer_prefix:
        inputs = F.concat([inputs, model.lm.embed_tokens(list(answer_prefix))], axis=0)
    return model.lm.forward(inputs)


def text_logits(model: VLMModel, ids: Sequence[int]) -> Tensor:
    """Forward text-only trực tiếp từ token id (không qua fuse)."""
    return model.lm.forward(model.lm.embed_tokens(list(ids)))


def generate(model: VLMModel, image, question_ids: Sequence[int],
             params: Optional[GenerationParams] = None) -> List[int]:
    """Greedy decoding; dừng ở EOS (có giữ EOS) hoặc khi hết max_new_tokens.

    Hòa argmax được phá bằng token id nhỏ nhất. Không sửa state của model.

    Raises:
        ContextLengthError: nếu fused + max_new_tokens vượt context_len
    """
    params = params or GenerationParams()
    with no_grad():
        features = None if image is None else encode_image(model, image)
        fused = fuse(model, features, question_ids)
        if fused.length + params.max_new_tokens > model.lm_cfg.context_len:
            raise ContextLengthError(
                f"fused {fused.length} + max_new_tokens {params.max_new_tokens} "
                f"vượt context_len={model.lm_cfg.context_len}")
        generated: List[int] = []
        inputs = fused.embeddings
        for _ in range(params.max_new_tokens):
            logits = model.lm.forward(inputs)
            token = int(np.argmax(logits.data[-1]))
            generated.append(token)
            if token == EOS_ID:
                break
            inputs = F.concat([inputs, model.lm.embed_tokens([token])], axis=0)
    return generated


def generate_text(model: VLMModel, image, question: str,
                  params: Optional[GenerationParams] = None) -> str:
    ids = generate(model, image, model.tokenizer.tokenize(question), params)
    return model.tokenizer.detokenize(ids)


def count_parameters(model: BaseModule) -> ParameterCount:
    """Tổng số parameter và số parameter trainable."""
    return ParameterCount(model.num_parameters(), model.num_parameters(trainable_only=True))
