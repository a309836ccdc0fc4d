"""Checkpoint - Manifest JSON + blob float32 little-endian.

Layout thư mục:
    manifest.json   metadata, bảng name -> (shape, offset, dtype)
    params.bin      parameter theo thứ tự manifest
    optim.bin       (tùy chọn) moment AdamW, tên ``<param>.m`` / ``<param>.v``,
                    kèm tensor trainable nằm ngoài model (vd. head phân loại stage 1)
"""

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from engine.errors import IntegrityError, MigrationError, StorageError
from engine.lora import LoRAConfig
from engine.optim import AdamW
from application.vlm_model import LMConfig, VisionConfig, VLMModel

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
STORAGE_DTYPE = "<f4"
MANIFEST_FILE = "manifest.json"
PARAMS_FILE = "params.bin"
OPTIM_FILE = "optim.bin"


@dataclass
class Checkpoint:
    """Nội dung checkpoint đã kiểm tra tính toàn vẹn."""

    manifest: Dict[str, Any]
    blob: bytes
    optim_blob: Optional[bytes] = None

    @property
    def stage(self) -> Optional[str]:
        return self.manifest.get("training", {}).get("stage")

    @property
    def step(self) -> int:
        return int(self.manifest.get("training", {}).get("step", 0))

    @property
    def training(self) -> Dict[str, Any]:
        return self.manifest.get("training", {})

    def parameters(self) -> Dict[str, np.ndarray]:
        return _unpack(self.manifest["parameters"], self.blob)

    def optimizer_tensors(self) -> Dict[str, np.ndarray]:
        if self.optim_blob is None:
            return {}
        return _unpack(self.manifest["optimizer"]["tensors"], self.optim_blob)


def _pack(named: List[Tuple[str, np.ndarray]], extra: Optional[Dict[str, Dict]] = None
          ) -> Tuple[List[Dict[str, Any]], bytes]:
    table: List[Dict[str, Any]] = []
    chunks: List[bytes] = []
    offset = 0
    for name, array in named:
        raw = np.ascontiguousarray(array, dtype=STORAGE_DTYPE).tobytes()
        entry = {"name": name, "shape": list(array.shape), "offset": offset,
                 "dtype": "float32"}
        if extra and name in extra:
            entry.update(extra[name])
        table.append(entry)
        chunks.append(raw)
        offset += len(raw)
    return table, b"".join(chunks)


def _verify_table(table: List[Dict[str, Any]], blob: bytes, label: str):
    """Offset không chồng lấn và phủ kín blob.

    Raises:
        IntegrityError: nếu offset/size không khớp
    """
    expected = 0
    for entry in table:
        size = int(np.prod(entry["shape"], dtype=np.int64)) * 4
        if entry.get("dtype") != "float32" or entry["offset"] != expected:
            raise IntegrityError(f"{label}: entry '{entry['name']}' sai offset/dtype")
        expected += size
    if expected != len(blob):
        raise IntegrityError(f"{label}: blob dài {len(blob)} byte, manifest cần {expected}")


def _unpack(table: List[Dict[str, Any]], blob: bytes) -> Dict[str, np.ndarray]:
    out: Dict[str, np.ndarray] = {}
    for entry in table:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        values = np.frombuffer(blob, dtype=STORAGE_DTYPE, count=count, offset=entry["offset"])
        out[entry["name"]] = values.astype(np.float64).reshape(entry["shape"])
    return out


def _write_atomic(path: Path, data: bytes):
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def save_checkpoint(model: VLMModel, optimizer: Optional[AdamW], path,
                    training: Optional[Dict[str, Any]] = None) -> Checkpoint:
    """Ghi model (và optimizer nếu có) vào thư mục ``path``.

    Args:
        model: VLMModel
        optimizer: AdamW hoặc None
        path: Thư mục checkpoint
        training: Metadata huấn luyện (stage, step, epoch, schedule, hyper, ...)

    Returns:
        Checkpoint vừa ghi

    Raises:
        StorageError: nếu không ghi được
    """
    path = Path(path)
    named = [(name, t.data) for name, t in model.named_parameters()]
    flags = {name: {"trainable": t.requires_grad} for name, t in model.named_parameters()}
    table, blob = _pack(named, flags)
    manifest: Dict[str, Any] = {
        "format_version": FORMAT_VERSION,
        "architecture": model.architecture(),
        "parameters": table,
        "training": dict(training or {}),
        "seed": model.seed,
    }
    optim_blob = None
    if optimizer is not None:
        state = optimizer.state_dict()
        model_names = {name for name, _ in model.named_parameters()}
        for name, tensor in optimizer.params.items():
            if name not in model_names:
                state[name] = tensor.data
        optim_table, optim_blob = _pack(sorted(state.items()))
        manifest["optimizer"] = {
            "name": "adamw",
            "hyperparameters": optimizer.state.hyperparameters(),
            "clip_norm": optimizer.clip_norm,
            "step_count": optimizer.state.step_count,
            "tensors": optim_table,
        }
    try:
        path.mkdir(parents=True, exist_ok=True)
        _write_atomic(path / PARAMS_FILE, blob)
        if optim_blob is not None:
            _write_atomic(path / OPTIM_FILE, optim_blob)
        elif (path / OPTIM_FILE).exists():
            (path / OPTIM_FILE).unlink()
        text = json.dumps(manifest, indent=2, sort_keys=True) + "\n"
        _write_atomic(path / MANIFEST_FILE, text.encode("utf-8"))
    except OSError as exc:
        raise StorageError(f"Không ghi được checkpoint {path}: {exc}") from exc
    logger.info("💾 Đã lưu checkpoint %s (%d tensor, %d byte)", path, len(table), len(blob))
    return Checkpoint(manifest, blob, optim_blob)


def read_checkpoint(path) -> Checkpoint:
    """Đọc và kiểm tra checkpoint, chưa dựng model.

    Raises:
        StorageError: nếu thiếu file
        MigrationError: nếu format_version không hỗ trợ
        IntegrityError: nếu blob không khớp manifest
    """
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST_FILE).read_text(encoding="utf-8"))
        blob = (path / PARAMS_FILE).read_bytes()
        optim_blob = (path / OPTIM_FILE).read_bytes() if "optimizer" in manifest else None
    except OSError as exc:
        raise StorageError(f"Không đọc được checkpoint {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise IntegrityError(f"{path}/{MANIFEST_FILE} không phải JSON hợp lệ") from exc
    if not isinstance(manifest, dict):
        raise IntegrityError(f"{path}/{MANIFEST_FILE} phải là object JSON")
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise MigrationError(
            f"Manifest format_version={version} không được hỗ trợ (cần {FORMAT_VERSION})")
    try:
        _verify_table(manifest["parameters"], blob, PARAMS_FILE)
        if optim_blob is not None:
            _verify_table(manifest["optimizer"]["tensors"], optim_blob, OPTIM_FILE)
        for key in ("vision", "lm"):
            manifest["architecture"][key]
    except (KeyError, TypeError) as exc:
        raise IntegrityError(f"{path}/{MANIFEST_FILE} thiếu hoặc sai field: {exc}") from exc
    return Checkpoint(manifest, blob, optim_blob)


def build_model(checkpoint: Checkpoint) -> VLMModel:
    """Dựng model từ checkpoint đã đọc; không trả model dở dang.

    Raises:
        IntegrityError: nếu tập tên/shape parameter không khớp kiến trúc
    """
    arch = checkpoint.manifest["architecture"]
    try:
        model = VLMModel(VisionConfig(**arch["vision"]), LMConfig(**arch["lm"]),
                         seed=int(arch.get("seed", 0)))
        if "lora" in arch:
            model.attach_lora(LoRAConfig(**arch["lora"]))
    except TypeError as exc:
        raise IntegrityError(f"Kiến trúc trong manifest không hợp lệ: {exc}") from exc
    stored = checkpoint.parameters()
    flags = {e["name"]: e.get("trainable", True) for e in checkpoint.manifest["parameters"]}
    named = dict(model.named_parameters())
    if set(named) != set(stored):
        missing = sorted(set(named) - set(stored))
        unexpected = sorted(set(stored) - set(named))
        raise IntegrityError(f"Tên parameter không khớp: thiếu {missing}, thừa {unexpected}")
    for name, tensor in named.items():
        if tuple(stored[name].shape) != tensor.shape:
            raise IntegrityError(f"'{name}': shape {stored[name].shape} != {tensor.shape}")
    for name, tensor in named.items():
        tensor.data = stored[name].copy()
        tensor.requires_grad = bool(flags[name])
    return model


def load_checkpoint(path) -> Tuple[VLMModel, Checkpoint]:
    """Đọc checkpoint và dựng lại model."""
    checkpoint = read_checkpoint(path)
    model = build_model(checkpoint)
    logger.info("📂 Đã nạp checkpoint %s (stage=%s, step=%d)",
                path, checkpoint.stage, checkpoint.step)
    return model, checkpoint


def restore_optimizer(optimizer: AdamW, checkpoint: Checkpoint):
    """Nạp moment, step_count và tensor ngoài model vào optimizer."""
    if "optimizer" not in checkpoint.manifest:
        return
    tensors = checkpoint.optimizer_tensors()
    optimizer.load_state_dict(tensors, int(checkpoint.manifest["optimizer"]["step_count"]))
    for name, tensor in optimizer.params.items():
        if name in tensors:
            tensor.data = tensors[name].copy()


def snap_to_storage(model: VLMModel, optimizer: Optional[AdamW] = None):
    """Làm tròn state trong bộ nhớ về float32 giống như khi lưu.

    Sau khi gọi, tiếp tục huấn luyện cho kết quả trùng với việc nạp lại
    checkpoint vừa lưu.
    """
    for _, tensor in model.named_parameters():
        tensor.data = tensor.data.astype(np.float32).astype(np.float64)
    if optimizer is not None:
        for tensor in optimizer.params.values():
            tensor.data = tensor.data.astype(np.float32).astype(np.float64)
        for name in list(optimizer.state.m):
            optimizer.state.m[name] = optimizer.state.m[name].astype(np.float32).astype(np.float64)
            optimizer.state.v[name] = optimizer.state.v[name].astype(np.float32).astype(np.float64)
