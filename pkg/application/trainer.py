"""Trainer - Điều phối huấn luyện theo stage, đóng băng parameter, checkpoint, log loss.

Ba stage chạy theo thứ tự vision → text → joint:
    vision_pretrain  phân loại shape từ feature ảnh mean-pooled qua head tạm
    text_lora        next-token loss câu hỏi → câu trả lời, chỉ train LoRA
    joint_finetune   fused VQA loss, train vision + projector + LoRA
"""

import csv
import logging
from abc import ABC, abstractmethod
from dataclasses import asdict, dataclass, field
from fnmatch import fnmatch
from itertools import islice
from pathlib import Path
from typing import Any, Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from engine import functional as F
from engine.errors import ConfigurationError, EmptyObjectiveError, StorageError
from engine.layers import LinearMap
from engine.lora import LoRAConfig
from engine.optim import (AdamW, AdamWConfig, ScheduleConfig, TrainHyperparams,
                          accumulate_and_step, lr_at_step)
from engine.tensor import Tensor, no_grad
from application.checkpoint import (Checkpoint, restore_optimizer, save_checkpoint,
                                    snap_to_storage)
from application.dataset import ImageCache, VQARecord, batch_iterator
from application.normalization import normalize
from application.vlm_model import VLMModel, encode_image, sample_loss

logger = logging.getLogger(__name__)

STAGE_VISION = "vision_pretrain"
STAGE_TEXT = "text_lora"
STAGE_JOINT = "joint_finetune"
STAGE_ORDER = (STAGE_VISION, STAGE_TEXT, STAGE_JOINT)
STAGE_ALIASES = {"vision": STAGE_VISION, "text": STAGE_TEXT, "joint": STAGE_JOINT}

OBJECTIVES = {
    STAGE_VISION: "image_classification",
    STAGE_TEXT: "text_qa",
    STAGE_JOINT: "fused_vqa",
}

LORA_TENSORS = ["*.lora_a", "*.lora_b"]
BASE_LM = ["lm.tok", "lm.pos", "lm.*.weight", "lm.*.gain", "lm.*.bias"]
VISION_HEAD = "head.vision_cls"


@dataclass
class StagePlan:
    """Một stage huấn luyện: selector trainable/frozen, objective, số step, lịch lr.

    Mỗi parameter của model phải khớp đúng một trong hai selector.
    """

    stage: str
    trainable: List[str]
    frozen: List[str]
    objective: str
    steps: int
    schedule: ScheduleConfig

    def __post_init__(self):
        if self.stage not in STAGE_ORDER:
            raise ConfigurationError(f"Stage không hợp lệ: {self.stage}, hỗ trợ {STAGE_ORDER}")
        if self.objective != OBJECTIVES[self.stage]:
            raise ConfigurationError(
                f"Stage {self.stage} cần objective {OBJECTIVES[self.stage]}, nhận {self.objective}")
        if self.steps < 0:
            raise ConfigurationError(f"steps không được âm: {self.steps}")

    @property
    def needs_lora(self) -> bool:
        return self.stage in (STAGE_TEXT, STAGE_JOINT)

    def resolve(self, model: VLMModel) -> Tuple[List[str], List[str]]:
        """Chia tên parameter thành (trainable, frozen).

        Raises:
            ConfigurationError: nếu parameter khớp cả hai hoặc không khớp selector nào
        """
        trainable: List[str] = []
        frozen: List[str] = []
        for name, _ in model.named_parameters():
            in_train = any(fnmatch(name, p) for p in self.trainable)
            in_frozen = any(fnmatch(name, p) for p in self.frozen)
            if in_train and in_frozen:
                raise ConfigurationError(f"{self.stage}: '{name}' khớp cả trainable lẫn frozen")
            if not in_train and not in_frozen:
                raise ConfigurationError(f"{self.stage}: '{name}' không khớp selector nào")
            (trainable if in_train else frozen).append(name)
        if self.steps > 0 and not trainable:
            raise ConfigurationError(f"{self.stage}: không có parameter trainable nào")
        return trainable, frozen


def _schedule(steps: int, base_lr: float, warmup_steps: int, min_lr: float) -> ScheduleConfig:
    total = max(steps, 1)
    return ScheduleConfig(total_steps=total, base_lr=base_lr,
                          warmup_steps=min(warmup_steps, total), min_lr=min_lr)


def make_plan(stage: str, steps: int, base_lr: float = 1e-4, warmup_steps: int = 100,
              min_lr: float = 0.0) -> StagePlan:
    """Dựng StagePlan chuẩn cho ``stage`` (nhận cả alias vision/text/joint)."""
    stage = STAGE_ALIASES.get(stage, stage)
    if stage == STAGE_VISION:
        trainable, frozen = ["vision.*"], ["projector.*"] + BASE_LM + LORA_TENSORS
    elif stage == STAGE_TEXT:
        trainable, frozen = list(LORA_TENSORS), ["vision.*", "projector.*"] + BASE_LM
    elif stage == STAGE_JOINT:
        trainable, frozen = ["vision.*", "projector.*"] + LORA_TENSORS, list(BASE_LM)
    else:
        raise ConfigurationError(f"Stage không hợp lệ: {stage}")
    return StagePlan(stage, trainable, frozen, OBJECTIVES[stage], steps,
                     _schedule(steps, base_lr, warmup_steps, min_lr))


def plans_for(selection: str, steps: Dict[str, int], base_lr: float = 1e-4,
              warmup_steps: int = 100, min_lr: float = 0.0) -> List[StagePlan]:
    """Danh sách plan cho lệnh ``train --stage``; ``all`` chạy đủ ba stage."""
    stages = list(STAGE_ORDER) if selection == "all" else [STAGE_ALIASES.get(selection, selection)]
    return [make_plan(s, int(steps.get(s, 0)), base_lr, warmup_steps, min_lr) for s in stages]


# --------------------------------------------------------------------------- #
# Log + observers
# --------------------------------------------------------------------------- #
@dataclass
class StepRow:
    stage: str
    step: int
    lr: float
    loss: float


@dataclass
class EpochRow:
    stage: str
    epoch: int
    train_loss: float
    test_loss: Optional[float]


class TrainObserver(ABC):
    """Observer nhận sự kiện từ Trainer."""

    @abstractmethod
    def on_step(self, row: StepRow):
        pass

    @abstractmethod
    def on_epoch(self, row: EpochRow):
        pass

    def on_stage_end(self, stage: str, steps: int):
        pass


@dataclass(eq=False)
class TrainLog(TrainObserver):
    """Log theo step và theo epoch; epoch đánh số liên tục qua các stage."""

    steps: List[StepRow] = field(default_factory=list)
    epochs: List[EpochRow] = field(default_factory=list)

    def on_step(self, row: StepRow):
        self.steps.append(row)

    def on_epoch(self, row: EpochRow):
        self.epochs.append(row)

    @property
    def next_epoch(self) -> int:
        return len(self.epochs) + 1

    def is_empty(self) -> bool:
        return not self.steps and not self.epochs

    def for_stage(self, stage: str) -> "TrainLog":
        return TrainLog([r for r in self.steps if r.stage == stage],
                        [r for r in self.epochs if r.stage == stage])

    def to_dict(self) -> Dict[str, Any]:
        return {"steps": [asdict(r) for r in self.steps],
                "epochs": [asdict(r) for r in self.epochs]}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TrainLog":
        return cls([StepRow(**r) for r in data.get("steps", [])],
                   [EpochRow(**r) for r in data.get("epochs", [])])


class ConsoleObserver(TrainObserver):
    """Ghi log mỗi ``log_every`` step và mỗi epoch."""

    def __init__(self, log_every: int = 10):
        self.log_every = max(1, log_every)

    def on_step(self, row: StepRow):
        if (row.step + 1) % self.log_every == 0:
            logger.info("📉 [%s] step %d lr=%.3e loss=%.4f", row.stage, row.step + 1,
                        row.lr, row.loss)

    def on_epoch(self, row: EpochRow):
        test = "n/a" if row.test_loss is None else f"{row.test_loss:.4f}"
        logger.info("📉 [%s] epoch %d train=%.4f test=%s", row.stage, row.epoch,
                    row.train_loss, test)

    def on_stage_end(self, stage: str, steps: int):
        logger.info("✅ Stage %s xong sau %d step", stage, steps)


def emit_loss_csv(log: TrainLog, path):
    """Ghi loss theo epoch: header ``epoch,train_loss,test_loss``."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(["epoch", "train_loss", "test_loss"])
            for row in log.epochs:
                test = "" if row.test_loss is None else repr(row.test_loss)
                writer.writerow([row.epoch, repr(row.train_loss), test])
    except OSError as exc:
        raise StorageError(f"Không ghi được {path}: {exc}") from exc


# --------------------------------------------------------------------------- #
# Data for objectives
# --------------------------------------------------------------------------- #
@dataclass
class StageData:
    """Split train/test cùng nguồn ảnh."""

    train: List[VQARecord]
    test: List[VQARecord]
    images: ImageCache


def shape_classes(records: Sequence[VQARecord]) -> List[str]:
    """Nhãn phân loại stage 1: đáp án open-ended đã chuẩn hóa, sắp xếp."""
    return sorted({normalize(r.gt_answer) for r in records if r.question_type == "open"})


def build_samples(model: VLMModel, objective: str, records: Sequence[VQARecord],
                  classes: Sequence[str]) -> List[Tuple]:
    """Chuyển record thành mẫu cho objective.

    image_classification: (image_path, class_index), mỗi ảnh một mẫu
    text_qa:              (None, question_ids, answer_ids)
    fused_vqa:            (image_path, question_ids, answer_ids)
    """
    tokenizer = model.tokenizer
    if objective == "image_classification":
        index = {name: i for i, name in enumerate(classes)}
        seen: Dict[str, int] = {}
        for record in records:
            label = normalize(record.gt_answer)
            if record.question_type == "open" and label in index:
                seen.setdefault(record.image_path, index[label])
        return sorted(seen.items())
    samples = []
    for record in records:
        if not record.is_open_ended:
            raise ConfigurationError(
                f"Record '{record.question_id}' còn options, cần reformulate trước")
        image_key = None if objective == "text_qa" else record.image_path
        samples.append((image_key, tokenizer.tokenize(record.question),
                        tokenizer.encode_answer(record.gt_answer)))
    return samples


# --------------------------------------------------------------------------- #
# Trainer
# --------------------------------------------------------------------------- #
class Trainer:
    """Chạy StagePlan trên một model; notify observer sau mỗi step/epoch.

    Một Trainer sở hữu model và optimizer của nó trong suốt quá trình chạy.
    """

    def __init__(self, model: VLMModel, hyper: Optional[TrainHyperparams] = None,
                 adamw: Optional[AdamWConfig] = None, lora: Optional[LoRAConfig] = None,
                 out_dir=None, checkpoint_every: Optional[int] = None,
                 progress: bool = False):
        """Khởi tạo trainer.

        Args:
            model: VLMModel cần huấn luyện
            hyper: Batch size, accumulation, seed, clip_norm
            adamw: Hyperparameter AdamW
            lora: Cấu hình LoRA, gắn khi stage text/joint chạy lần đầu
            out_dir: Thư mục ghi checkpoint ``ckpt-<stage>-<step>/`` (None = không ghi)
            checkpoint_every: Ghi checkpoint giữa stage mỗi N step
            progress: Hiện thanh tiến độ tqdm
        """
        self.model = model
        self.hyper = hyper or TrainHyperparams()
        self.adamw = adamw or AdamWConfig()
        self.lora = lora or LoRAConfig()
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.checkpoint_every = checkpoint_every
        self.progress = progress
        self.log = TrainLog()
        self.observers: List[TrainObserver] = [self.log]
        self.last_checkpoint: Optional[Path] = None

    def register_observer(self, observer: TrainObserver):
        if observer not in self.observers:
            self.observers.append(observer)

    def unregister_observer(self, observer: TrainObserver):
        if observer in self.observers and observer is not self.log:
            self.observers.remove(observer)

    def _notify_step(self, row: StepRow):
        for observer in self.observers:
            observer.on_step(row)

    def _notify_epoch(self, row: EpochRow):
        for observer in self.observers:
            observer.on_epoch(row)

    # ------------------------------------------------------------------ #
    def _prepare(self, plan: StagePlan) -> List[Tuple[str, Tensor]]:
        if plan.needs_lora and self.model.lora_config is None:
            count = self.model.attach_lora(self.lora)
            logger.info("🔗 Đã gắn LoRA vào %d linear map (rank=%d)", count, self.lora.rank)
        trainable, frozen = plan.resolve(self.model)
        named = dict(self.model.named_parameters())
        for name in trainable:
            named[name].requires_grad = True
        for name in frozen:
            named[name].requires_grad = False
        return [(name, named[name]) for name in trainable]

    def _head(self, classes: Sequence[str]) -> LinearMap:
        rng = np.random.default_rng([self.hyper.seed, 2])
        head = LinearMap.create(VISION_HEAD, self.model.vision_cfg.embed_dim, len(classes), rng)
        return head

    def _loss_fn(self, objective: str, images: ImageCache,
                 head: Optional[LinearMap]) -> Callable[[List[Tuple]], Tensor]:
        model = self.model

        def classification(batch: List[Tuple]) -> Tensor:
            total = None
            for image_path, label in batch:
                features = encode_image(model, images.get(image_path))
                pooled = F.reshape(F.mean(features, axis=0), (1, features.shape[1]))
                loss = F.cross_entropy(head(pooled), [label])
                total = loss if total is None else F.add(total, loss)
            return F.scale(total, 1.0 / len(batch))

        def sequence(batch: List[Tuple]) -> Tensor:
            total = None
            for image_key, question_ids, answer_ids in batch:
                image = None if image_key is None else images.get(image_key)
                loss = sample_loss(model, image, question_ids, answer_ids)
                total = loss if total is None else F.add(total, loss)
            return F.scale(total, 1.0 / len(batch))

        return classification if objective == "image_classification" else sequence

    def _test_loss(self, objective: str, samples: List[Tuple], images: ImageCache,
                   head: Optional[LinearMap]) -> Optional[float]:
        """Loss trên tập test, cùng cách gộp với train: trung bình loss của từng mẫu."""
        if not samples:
            return None
        loss_fn = self._loss_fn(objective, images, head)
        with no_grad():
            return float(np.mean([loss_fn([s]).item() for s in samples]))

    def _checkpoint(self, plan: StagePlan, optimizer: AdamW, state: Dict[str, Any]):
        if self.out_dir is None:
            return
        step = state["step"]
        path = self.out_dir / f"ckpt-{plan.stage}-{step}"
        training = {
            "stage": plan.stage,
            "step": step,
            "stage_steps": plan.steps,
            "epoch": state["epoch"],
            "epoch_step": state["epoch_step"],
            "epoch_losses": list(state["epoch_losses"]),
            "schedule": asdict(plan.schedule),
            "hyper": asdict(self.hyper),
            "log": self.log.to_dict(),
        }
        save_checkpoint(self.model, optimizer, path, training)
        snap_to_storage(self.model, optimizer)
        self.last_checkpoint = path

    # ------------------------------------------------------------------ #
    def run_stage(self, plan: StagePlan, data: StageData,
                  resume: Optional[Checkpoint] = None) -> TrainLog:
        """Chạy một stage; trả về phần log của stage này.

        Raises:
            ConfigurationError: nếu selector không khớp tập parameter
            EmptyObjectiveError: nếu dữ liệu không tạo ra mẫu nào
        """
        if plan.steps == 0:
            plan.resolve(self.model)
            logger.info("⚠️ Stage %s có 0 step, bỏ qua", plan.stage)
            return TrainLog()
        named = self._prepare(plan)

        classes = shape_classes(data.train + data.test)
        head = self._head(classes) if plan.objective == "image_classification" else None
        if head is not None:
            named = named + list(head.named_parameters())
        train_samples = build_samples(self.model, plan.objective, data.train, classes)
        test_samples = build_samples(self.model, plan.objective, data.test, classes)
        if not train_samples:
            raise EmptyObjectiveError(f"Stage {plan.stage}: không có mẫu huấn luyện")

        optimizer = AdamW.from_config(named, self.adamw, self.hyper.clip_norm)
        state: Dict[str, Any] = {"step": 0, "epoch": 0, "epoch_step": 0, "epoch_losses": []}
        if resume is not None:
            self.log = TrainLog.from_dict(resume.training.get("log", {}))
            self.observers[0] = self.log
            restore_optimizer(optimizer, resume)
            for key in state:
                state[key] = resume.training.get(key, state[key])
            logger.info("⏩ Tiếp tục %s từ step %d", plan.stage, state["step"])

        loss_fn = self._loss_fn(plan.objective, data.images, head)
        bar = tqdm(total=plan.steps, initial=state["step"], desc=plan.stage,
                   disable=not self.progress, leave=False)

        def on_step(step: int, lr: float, loss: float):
            state["step"] += 1
            state["epoch_step"] += 1
            state["epoch_losses"].append(loss)
            self._notify_step(StepRow(plan.stage, step, lr, loss))
            bar.update(1)
            if self.checkpoint_every and state["step"] % self.checkpoint_every == 0 \
                    and state["step"] < plan.steps:
                self._checkpoint(plan, optimizer, state)

        def lr_fn(step: int) -> float:
            return lr_at_step(plan.schedule, step)

        accum = self.hyper.grad_accum_steps
        while state["step"] < plan.steps or state["epoch_losses"]:
            remaining = plan.steps - state["step"]
            if remaining > 0:
                batches: Iterator = batch_iterator(train_samples, self.hyper.batch_size,
                                                   self.hyper.seed, state["epoch"])
                batches = islice(batches, state["epoch_step"] * accum, None)
                accumulate_and_step(batches, loss_fn, optimizer, lr_fn, accum,
                                    on_step=on_step, max_steps=remaining)
            train_loss = float(np.mean(state["epoch_losses"]))
            test_loss = self._test_loss(plan.objective, test_samples, data.images, head)
            self._notify_epoch(EpochRow(plan.stage, self.log.next_epoch, train_loss, test_loss))
            state["epoch"] += 1
            state["epoch_step"] = 0
            state["epoch_losses"] = []
        bar.close()

        self._checkpoint(plan, optimizer, state)
        for observer in self.observers:
            observer.on_stage_end(plan.stage, state["step"])
        return self.log.for_stage(plan.stage)

    def run(self, plans: Sequence[StagePlan], data: StageData,
            resume: Optional[Checkpoint] = None) -> TrainLog:
        """Chạy các plan theo thứ tự; ``resume`` bỏ qua các stage đã xong."""
        start = 0
        if resume is not None:
            stages = [p.stage for p in plans]
            if resume.stage not in stages:
                raise ConfigurationError(
                    f"Checkpoint ở stage {resume.stage}, không thuộc {stages}")
            start = stages.index(resume.stage)
            if resume.step >= plans[start].steps:
                start += 1
                self.log = TrainLog.from_dict(resume.training.get("log", {}))
                self.observers[0] = self.log
                resume = None
        for i, plan in enumerate(plans[start:]):
            self.run_stage(plan, data, resume if i == 0 else None)
        return self.log


def run_stage(model: VLMModel, plan: StagePlan, data: StageData,
              hyper: Optional[TrainHyperparams] = None, **kwargs) -> TrainLog:
    """Chạy một StagePlan trên model (model được cập nhật tại chỗ)."""
    return Trainer(model, hyper, **kwargs).run_stage(plan, data)
