"""Dataset - Record VQA, đọc/ghi JSON, reformulation, split 70:30, batching."""

import json
import logging
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Tuple

import numpy as np
from PIL import Image

from engine.errors import DanglingAnswerError, DatasetParseError, SchemaError, StorageError
from application.normalization import classify_answer

logger = logging.getLogger(__name__)

REQUIRED_FIELDS = ("question_id", "image_path", "question", "gt_answer")
KNOWN_FIELDS = REQUIRED_FIELDS + ("options", "modality")
DEFAULT_MODALITY = "unknown"
TRAIN_RATIO = 0.70


@dataclass
class VQARecord:
    """Một mẫu image-question-answer."""

    question_id: str
    image_path: str
    question: str
    gt_answer: str
    options: Optional[Dict[str, str]] = None
    modality: str = DEFAULT_MODALITY
    extra: Dict[str, Any] = field(default_factory=dict)

    @property
    def question_type(self) -> str:
        """'yesno' nếu gt_answer chuẩn hóa là yes/no, ngược lại 'open'."""
        return classify_answer(self.gt_answer)

    @property
    def is_open_ended(self) -> bool:
        return not self.options

    def to_dict(self) -> Dict[str, Any]:
        data: Dict[str, Any] = {
            "question_id": self.question_id,
            "image_path": self.image_path,
            "question": self.question,
        }
        if self.options is not None:
            data["options"] = dict(self.options)
        data["gt_answer"] = self.gt_answer
        data["modality"] = self.modality
        data.update(self.extra)
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any], index: int = 0) -> "VQARecord":
        """Dựng record từ object JSON, kiểm tra field bắt buộc.

        Raises:
            SchemaError: nếu thiếu field hoặc sai kiểu
        """
        if not isinstance(data, dict):
            raise SchemaError(f"Record #{index} không phải object JSON")
        qid = data.get("question_id", f"#{index}")
        for key in REQUIRED_FIELDS:
            if key not in data:
                raise SchemaError(f"Record '{qid}' thiếu field bắt buộc '{key}'")
            if not isinstance(data[key], str):
                raise SchemaError(f"Record '{qid}': field '{key}' phải là string")
        options = data.get("options")
        if options is not None:
            if not isinstance(options, dict) or not all(
                isinstance(k, str) and isinstance(v, str) for k, v in options.items()
            ):
                raise SchemaError(f"Record '{qid}': 'options' phải là object letter -> text")
        modality = data.get("modality", DEFAULT_MODALITY)
        if not isinstance(modality, str):
            raise SchemaError(f"Record '{qid}': field 'modality' phải là string")
        extra = {k: v for k, v in data.items() if k not in KNOWN_FIELDS}
        return cls(
            question_id=data["question_id"],
            image_path=data["image_path"],
            question=data["question"],
            gt_answer=data["gt_answer"],
            options=dict(options) if options is not None else None,
            modality=modality,
            extra=extra,
        )


@dataclass
class DatasetSplit:
    train: List[VQARecord]
    test: List[VQARecord]
    seed: int
    ratio: float = TRAIN_RATIO


def load_dataset(path) -> List[VQARecord]:
    """Đọc file JSON array các record.

    Raises:
        StorageError: nếu không đọc được file
        DatasetParseError: nếu JSON sai cú pháp (kèm byte offset)
        SchemaError: nếu thiếu field bắt buộc
    """
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise StorageError(f"Không đọc được dataset {path}: {exc}") from exc
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise DatasetParseError(f"{path} không phải UTF-8 hợp lệ: {exc.reason}", exc.start) from exc
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as exc:
        offset = len(text[:exc.pos].encode("utf-8"))
        raise DatasetParseError(f"JSON không hợp lệ trong {path}: {exc.msg}", offset) from exc
    if not isinstance(payload, list):
        raise SchemaError(f"{path}: dataset phải là JSON array")
    records = [VQARecord.from_dict(item, i) for i, item in enumerate(payload)]
    logger.debug("📂 Đã đọc %d record từ %s", len(records), path)
    return records


def save_dataset(records: List[VQARecord], path):
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump([r.to_dict() for r in records], f, ensure_ascii=False, indent=2)
            f.write("\n")
    except OSError as exc:
        raise StorageError(f"Không ghi được dataset {path}: {exc}") from exc


def reformulate(record: VQARecord) -> VQARecord:
    """Chuyển câu hỏi multiple-choice thành open-ended.

    Bỏ options và thay gt_answer (chữ cái) bằng nội dung option.
    Record đã open-ended được trả về nguyên vẹn; gt_answer đã là nội dung
    của một option cũng được chấp nhận.

    Raises:
        DanglingAnswerError: nếu gt_answer không trỏ tới option nào
    """
    if record.is_open_ended:
        return record
    options = record.options
    key = record.gt_answer.strip()
    if key in options:
        answer = options[key]
    elif record.gt_answer in options.values():
        answer = record.gt_answer
    else:
        raise DanglingAnswerError(
            f"Record '{record.question_id}': gt_answer '{record.gt_answer}' "
            f"không có trong options {sorted(options)}"
        )
    return replace(record, options=None, gt_answer=answer)


def reformulate_all(records: List[VQARecord]) -> Tuple[List[VQARecord], int, int]:
    """Reformulate cả danh sách.

    Returns:
        (records mới, số record đã chuyển, số record giữ nguyên)
    """
    converted = sum(1 for r in records if not r.is_open_ended)
    return [reformulate(r) for r in records], converted, len(records) - converted


def _closest_subset(sizes: List[int], target: int) -> List[bool]:
    """Chọn các nhóm (theo thứ tự cho sẵn) để tổng gần ``target`` nhất.

    Bitset các tổng đạt được của phần đuôi cho phép duyệt tuần tự: mỗi
    nhóm được lấy nếu sau khi lấy vẫn đạt được đúng tổng tốt nhất.
    """
    suffix = [1] * (len(sizes) + 1)
    for i in range(len(sizes) - 1, -1, -1):
        suffix[i] = suffix[i + 1] | (suffix[i + 1] << sizes[i])
    reachable = [s for s in range(sum(sizes) + 1) if suffix[0] >> s & 1]
    remaining = min(reachable, key=lambda s: (abs(s - target), s))
    chosen = []
    for i, size in enumerate(sizes):
        take = size <= remaining and bool(suffix[i + 1] >> (remaining - size) & 1)
        chosen.append(take)
        if take:
            remaining -= size
    return chosen


def split(records: List[VQARecord], ratio: float = TRAIN_RATIO, seed: int = 0) -> DatasetSplit:
    """Chia train/test theo ảnh, phân tầng theo modality.

    Các record cùng image_path luôn nằm cùng một phía. Mỗi tầng được
    xáo trộn bằng generator có seed; phía train nhận tổng số record gần
    round(ratio · số record) nhất mà các nhóm ảnh cho phép đạt được.
    """
    if not records:
        raise SchemaError("split cần ít nhất một record")
    groups: Dict[str, List[VQARecord]] = defaultdict(list)
    for record in records:
        groups[record.image_path].append(record)
    strata: Dict[str, List[str]] = defaultdict(list)
    for image_path, members in groups.items():
        strata[members[0].modality].append(image_path)

    rng = np.random.default_rng(seed)
    train: List[VQARecord] = []
    test: List[VQARecord] = []
    for modality in sorted(strata):
        images = sorted(strata[modality])
        ordered = [groups[images[idx]] for idx in rng.permutation(len(images))]
        total = sum(len(members) for members in ordered)
        target = math.floor(ratio * total + 0.5)
        chosen = _closest_subset([len(members) for members in ordered], target)
        for members, take in zip(ordered, chosen):
            (train if take else test).extend(members)
    logger.info("✂️ Split seed=%d: %d train / %d test", seed, len(train), len(test))
    return DatasetSplit(train=train, test=test, seed=seed, ratio=ratio)


def batch_iterator(records: List[VQARecord], batch_size: int, seed: int,
                   epoch: int) -> Iterator[List[VQARecord]]:
    """Batch theo thứ tự xáo trộn là hàm thuần của (seed, epoch); giữ batch cuối ngắn."""
    if batch_size < 1:
        raise SchemaError(f"batch_size phải >= 1, nhận: {batch_size}")
    order = np.random.default_rng([seed, epoch]).permutation(len(records))
    for start in range(0, len(records), batch_size):
        yield [records[i] for i in order[start:start + batch_size]]


def dataset_summary(records: List[VQARecord]) -> Dict[str, Any]:
    """Đếm record theo modality và loại câu hỏi."""
    return {
        "total": len(records),
        "images": len({r.image_path for r in records}),
        "by_modality": dict(sorted(Counter(r.modality for r in records).items())),
        "by_type": dict(sorted(Counter(r.question_type for r in records).items())),
    }


# --------------------------------------------------------------------------- #
# Images
# --------------------------------------------------------------------------- #
def load_image(path) -> np.ndarray:
    """Đọc ảnh grayscale 8-bit (PNG hoặc PGM) thành array float64 trong [0, 1]."""
    try:
        with Image.open(path) as img:
            pixels = np.asarray(img.convert("L"), dtype=np.float64)
    except OSError as exc:
        raise StorageError(f"Không đọc được ảnh {path}: {exc}") from exc
    return pixels / 255.0


def save_image(pixels: np.ndarray, path):
    """Ghi array [0, 1] thành PNG grayscale 8-bit."""
    data = np.clip(np.rint(np.asarray(pixels) * 255.0), 0, 255).astype(np.uint8)
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(data).save(path, format="PNG")
    except OSError as exc:
        raise StorageError(f"Không ghi được ảnh {path}: {exc}") from exc


def quantize(pixels: np.ndarray) -> np.ndarray:
    """Lượng tử hóa về lưới 8-bit như khi lưu PNG."""
    return np.clip(np.rint(np.asarray(pixels) * 255.0), 0, 255) / 255.0


class ImageCache:
    """Cache ảnh theo image_path, tương đối với thư mục gốc của dataset."""

    def __init__(self, root=None, preloaded: Optional[Dict[str, np.ndarray]] = None):
        self.root = Path(root) if root is not None else None
        self._images: Dict[str, np.ndarray] = dict(preloaded or {})

    def get(self, image_path: str) -> np.ndarray:
        if image_path not in self._images:
            path = Path(image_path)
            if not path.is_absolute() and self.root is not None:
                path = self.root / path
            self._images[image_path] = load_image(path)
        return self._images[image_path]

    def __len__(self) -> int:
        return len(self._images)
