"""Synthetic data - Bộ dữ liệu VQA tổng hợp cỡ nhỏ, tất định theo seed."""

import json
import logging
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

from engine.errors import ConfigurationError, StorageError
from application.dataset import VQARecord, quantize, save_dataset, save_image

logger = logging.getLogger(__name__)

OPEN_QUESTION = "What type of abnormality is present in this image?"
YESNO_TEMPLATE = "Is there a {shape} present in this image?"
SHAPES = ("circle", "square", "cross")
DEFAULT_MODALITIES = ("ct-texture", "mri-texture", "xray-texture")
NOISE_STD = 0.03


@dataclass
class SyntheticSpec:
    """Tham số sinh dữ liệu; cùng spec luôn cho cùng corpus."""

    num_images: int = 16
    modalities: Sequence[str] = field(default_factory=lambda: list(DEFAULT_MODALITIES))
    shapes: Sequence[str] = field(default_factory=lambda: list(SHAPES))
    noise_seed: int = 0
    image_size: int = 32

    def __post_init__(self):
        if self.num_images < 1:
            raise ConfigurationError(f"num_images phải >= 1, nhận: {self.num_images}")
        if not self.modalities:
            raise ConfigurationError("Cần ít nhất một modality")
        unknown = [s for s in self.shapes if s not in SHAPES]
        if unknown or not self.shapes:
            raise ConfigurationError(f"Shape không hợp lệ: {unknown}, hỗ trợ {list(SHAPES)}")
        if self.image_size < 8:
            raise ConfigurationError(f"image_size quá nhỏ: {self.image_size}")

    @classmethod
    def from_json(cls, path) -> "SyntheticSpec":
        try:
            with open(path, "r", encoding="utf-8") as f:
                data = json.load(f)
        except OSError as exc:
            raise StorageError(f"Không đọc được spec {path}: {exc}") from exc
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"Key lạ trong synthetic spec: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> Dict:
        data = asdict(self)
        data["modalities"] = list(self.modalities)
        data["shapes"] = list(self.shapes)
        return data


def _texture(modality: str, size: int) -> np.ndarray:
    """Nền đặc trưng cho từng họ modality, giá trị trong [0, 0.5]."""
    yy, xx = np.mgrid[0:size, 0:size] / float(size)
    family = zlib.crc32(modality.encode("utf-8"))
    kind = family % 3
    freq = 2 + (family >> 3) % 4
    if kind == 0:
        base = np.hypot(xx - 0.5, yy - 0.5) * 1.4           # radial
    elif kind == 1:
        base = 0.5 + 0.5 * np.sin(2 * np.pi * freq * yy)     # stripes
    else:
        base = 0.5 + 0.5 * np.cos(2 * np.pi * freq * (xx + yy) / 2)  # diagonal waves
    return 0.5 * np.clip(base, 0.0, 1.0)


def _draw_shape(canvas: np.ndarray, shape: str, rng: np.random.Generator):
    size = canvas.shape[0]
    radius = int(rng.integers(size // 8, size // 4 + 1))
    cy, cx = (int(v) for v in rng.integers(radius + 1, size - radius - 1, size=2))
    yy, xx = np.mgrid[0:size, 0:size]
    if shape == "circle":
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius ** 2
    elif shape == "square":
        mask = (np.abs(yy - cy) <= radius) & (np.abs(xx - cx) <= radius)
    else:
        arm = max(1, radius // 3)
        mask = ((np.abs(yy - cy) <= arm) & (np.abs(xx - cx) <= radius)) | (
            (np.abs(xx - cx) <= arm) & (np.abs(yy - cy) <= radius)
        )
    canvas[mask] = 0.9


def render_image(spec: SyntheticSpec, index: int, modality: str, shape: str) -> np.ndarray:
    rng = np.random.default_rng([spec.noise_seed, index])
    canvas = _texture(modality, spec.image_size)
    _draw_shape(canvas, shape, rng)
    canvas = canvas + rng.normal(0.0, NOISE_STD, size=canvas.shape)
    return quantize(np.clip(canvas, 0.0, 1.0))


def generate_synthetic(spec: SyntheticSpec) -> Tuple[List[VQARecord], Dict[str, np.ndarray]]:
    """Sinh ảnh và record: mỗi ảnh một câu open và một câu yes/no.

    Shape được gán round-robin nên mỗi shape xuất hiện ⌊N/k⌋ hoặc ⌈N/k⌉ lần.

    Returns:
        (records, {image_path: pixels})
    """
    records: List[VQARecord] = []
    images: Dict[str, np.ndarray] = {}
    shapes = list(spec.shapes)
    modalities = list(spec.modalities)
    for i in range(spec.num_images):
        shape = shapes[i % len(shapes)]
        modality = modalities[(i // len(shapes)) % len(modalities)]
        image_path = f"images/syn_{i:05d}.png"
        images[image_path] = render_image(spec, i, modality, shape)
        asked = shape if i % 2 == 0 or len(shapes) == 1 else shapes[(i + 1) % len(shapes)]
        records.append(VQARecord(
            question_id=f"syn-{i:05d}-open",
            image_path=image_path,
            question=OPEN_QUESTION,
            gt_answer=shape,
            modality=modality,
        ))
        records.append(VQARecord(
            question_id=f"syn-{i:05d}-yesno",
            image_path=image_path,
            question=YESNO_TEMPLATE.format(shape=asked),
            gt_answer="yes" if asked == shape else "no",
            modality=modality,
        ))
    return records, images


def write_synthetic(spec: SyntheticSpec, out_dir) -> List[VQARecord]:
    """Ghi ảnh PNG và ``dataset.json`` vào ``out_dir``."""
    out_dir = Path(out_dir)
    records, images = generate_synthetic(spec)
    for image_path, pixels in images.items():
        save_image(pixels, out_dir / image_path)
    save_dataset(records, out_dir / "dataset.json")
    logger.info("🧪 Đã sinh %d ảnh, %d record vào %s", len(images), len(records), out_dir)
    return records
