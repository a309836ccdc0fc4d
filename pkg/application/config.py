"""Run configuration - Mặc định → file JSON → override ``key=value``."""

import copy
import json
import logging
from dataclasses import asdict
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional

from engine.errors import ConfigurationError, StorageError
from engine.lora import DEFAULT_TARGETS, LoRAConfig
from engine.optim import AdamWConfig, TrainHyperparams
from application.normalization import NormalizationRules
from application.trainer import STAGE_ORDER, StagePlan, plans_for
from application.vlm_model import GenerationParams, LMConfig, VisionConfig

logger = logging.getLogger(__name__)

RESOLVED_FILE = "config.resolved.json"


def default_config() -> Dict[str, Any]:
    return {
        "seed": 0,
        "output_dir": "runs/default",
        "model": {
            "vision": asdict(VisionConfig()),
            "lm": asdict(LMConfig()),
        },
        "lora": {"rank": 8, "alpha": 32.0, "target_selectors": list(DEFAULT_TARGETS)},
        "optim": {
            "base_lr": 1e-4,
            "warmup_steps": 100,
            "min_lr": 0.0,
            "beta1": 0.9,
            "beta2": 0.999,
            "eps": 1e-8,
            "weight_decay": 0.01,
            "clip_norm": None,
        },
        "data": {
            "train": "train.json",
            "test": "test.json",
            "image_root": None,
            "ratio": 0.70,
        },
        "train": {
            "batch_size": 8,
            "grad_accum_steps": 1,
            "steps": {"vision_pretrain": 100, "text_lora": 100, "joint_finetune": 300},
            "checkpoint_every": None,
            "log_every": 10,
            "progress": True,
        },
        "eval": {
            "max_new_tokens": 16,
            "workers": 1,
            "rules": asdict(NormalizationRules()),
        },
    }


def _check_type(dotted: str, default: Any, value: Any):
    """Giá trị phải cùng kiểu với mặc định; default None nhận mọi giá trị."""
    if default is None:
        return
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif isinstance(default, (list, tuple)):
        ok = isinstance(value, list) and all(isinstance(v, str) for v in value)
    else:
        ok = isinstance(value, type(default))
    if not ok:
        raise ConfigurationError(
            f"'{dotted}' cần kiểu {type(default).__name__}, nhận {value!r}")


def _merge(base: Dict[str, Any], update: Dict[str, Any], prefix: str = "",
           defaults: Optional[Dict[str, Any]] = None):
    defaults = default_config() if defaults is None else defaults
    for key, value in update.items():
        dotted = f"{prefix}{key}"
        if key not in base:
            raise ConfigurationError(f"Key cấu hình không hợp lệ: '{dotted}'")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigurationError(f"'{dotted}' phải là object")
            _merge(base[key], value, dotted + ".", defaults[key])
        else:
            _check_type(dotted, defaults[key], value)
            base[key] = value


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


class RunConfig:
    """Cấu hình đầy đủ cho một lần chạy, namespace theo module."""

    def __init__(self, values: Optional[Dict[str, Any]] = None):
        self.values = default_config()
        if values:
            _merge(self.values, values)

    @classmethod
    def load(cls, path=None, overrides: Iterable[str] = ()) -> "RunConfig":
        """Đọc file JSON (nếu có) rồi áp các override ``a.b.c=value``.

        Raises:
            StorageError: nếu không đọc được file
            ConfigurationError: nếu có key lạ hoặc JSON sai
        """
        config = cls()
        if path is not None:
            try:
                data = json.loads(Path(path).read_text(encoding="utf-8"))
            except OSError as exc:
                raise StorageError(f"Không đọc được config {path}: {exc}") from exc
            except json.JSONDecodeError as exc:
                raise ConfigurationError(f"Config {path} không phải JSON hợp lệ: {exc.msg}") from exc
            if not isinstance(data, dict):
                raise ConfigurationError(f"Config {path} phải là object JSON")
            _merge(config.values, data)
        for item in overrides:
            config.set(item)
        return config

    def set(self, assignment: str):
        if "=" not in assignment:
            raise ConfigurationError(f"Override phải có dạng key=value, nhận '{assignment}'")
        key, raw = assignment.split("=", 1)
        nested: Any = _parse_value(raw)
        for part in reversed(key.strip().split(".")):
            nested = {part: nested}
        _merge(self.values, nested)

    def get(self, key: str) -> Any:
        node: Any = self.values
        for part in key.split("."):
            if not isinstance(node, dict) or part not in node:
                raise ConfigurationError(f"Key cấu hình không tồn tại: '{key}'")
            node = node[part]
        return node

    @property
    def seed(self) -> int:
        return int(self.values["seed"])

    @property
    def output_dir(self) -> Path:
        return Path(self.values["output_dir"])

    # Builders --------------------------------------------------------- #
    def vision_config(self) -> VisionConfig:
        return VisionConfig(**self.values["model"]["vision"])

    def lm_config(self) -> LMConfig:
        return LMConfig(**self.values["model"]["lm"])

    def lora_config(self) -> LoRAConfig:
        return LoRAConfig(**self.values["lora"])

    def adamw_config(self) -> AdamWConfig:
        o = self.values["optim"]
        return AdamWConfig(o["beta1"], o["beta2"], o["eps"], o["weight_decay"])

    def hyperparams(self) -> TrainHyperparams:
        t = self.values["train"]
        return TrainHyperparams(batch_size=t["batch_size"], grad_accum_steps=t["grad_accum_steps"],
                                seed=self.seed, clip_norm=self.values["optim"]["clip_norm"])

    def stage_plans(self, selection: str) -> List[StagePlan]:
        steps = self.values["train"]["steps"]
        o = self.values["optim"]
        if selection != "all" and selection not in ("vision", "text", "joint") + STAGE_ORDER:
            raise ConfigurationError(f"Stage không hợp lệ: {selection}")
        return plans_for(selection, steps, o["base_lr"], o["warmup_steps"], o["min_lr"])

    def generation_params(self) -> GenerationParams:
        return GenerationParams(max_new_tokens=self.values["eval"]["max_new_tokens"])

    def rules(self) -> NormalizationRules:
        return NormalizationRules(**self.values["eval"]["rules"])

    def to_dict(self) -> Dict[str, Any]:
        return copy.deepcopy(self.values)

    def write_resolved(self, out_dir=None) -> Path:
        """Ghi cấu hình hiệu lực vào ``config.resolved.json``."""
        path = Path(out_dir if out_dir is not None else self.output_dir) / RESOLVED_FILE
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(json.dumps(self.values, indent=2, sort_keys=True) + "\n",
                            encoding="utf-8")
        except OSError as exc:
            raise StorageError(f"Không ghi được {path}: {exc}") from exc
        logger.debug("Đã ghi %s", path)
        return path
