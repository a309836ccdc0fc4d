"""Evaluator - Exact-match accuracy theo loại câu hỏi và theo modality.

Sinh câu trả lời greedy cho từng record, so khớp sau chuẩn hóa, rồi gộp
thành bảng open / yes-no và bảng theo modality. Có thể chia record cho
nhiều worker thread; kết quả luôn gộp theo thứ tự question_id.
"""

import logging
import threading
from dataclasses import asdict, dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from typing import Any, Dict, List, Optional, Sequence, Tuple

from engine.errors import ContractError, SchemaError
from application.dataset import ImageCache, VQARecord
from application.normalization import (DEFAULT_RULES, NormalizationRules, classify_answer,
                                       exact_match, normalize)
from application.vlm_model import GenerationParams, VLMModel, generate

logger = logging.getLogger(__name__)

QUESTION_TYPES = ("open", "yesno")

# Phần trăm in trong bảng kết quả theo modality đã công bố: total, correct, printed %
PUBLISHED_MODALITY_TABLE: Dict[str, Tuple[int, int, float]] = {
    "X-Ray": (1562, 1172, 75.7),
    "Dermoscopy": (1395, 1000, 72.4),
    "MRI": (6314, 4325, 69.2),
    "OCT": (925, 709, 77.3),
    "CT": (3144, 2383, 75.8),
    "Microscopy Images": (1136, 884, 78.5),
    "Ultrasound": (2185, 1672, 77.2),
    "Fundus Photography": (1131, 798, 71.3),
}

# Bảng open / yes-no đã công bố: correct, incorrect
PUBLISHED_TYPE_TABLE: Dict[str, Tuple[int, int]] = {
    "open": (3441, 1429),
    "yesno": (3046, 916),
}


def accuracy_pct(correct: int, total: int) -> float:
    """correct/total theo phần trăm, làm tròn half-away-from-zero 1 chữ số.

    Raises:
        ContractError: nếu total = 0 (accuracy không xác định)
    """
    if total <= 0:
        raise ContractError("Accuracy không xác định khi total = 0")
    exact = Decimal(correct * 100) / Decimal(total)
    return float(exact.quantize(Decimal("0.1"), rounding=ROUND_HALF_UP))


@dataclass
class Tally:
    total: int = 0
    correct: int = 0

    @property
    def incorrect(self) -> int:
        return self.total - self.correct

    @property
    def accuracy_pct(self) -> Optional[float]:
        return accuracy_pct(self.correct, self.total) if self.total else None

    def add(self, is_correct: bool):
        self.total += 1
        self.correct += int(is_correct)

    def to_dict(self) -> Dict[str, Any]:
        return {"total": self.total, "correct": self.correct,
                "incorrect": self.incorrect, "accuracy_pct": self.accuracy_pct}


@dataclass
class Verdict:
    question_id: str
    prediction: str
    gt: str
    correct: bool
    question_type: str
    modality: str


@dataclass
class EvalReport:
    """Kết quả đánh giá: tổng, theo loại câu hỏi, theo modality, verdict từng câu."""

    overall: Tally
    by_type: Dict[str, Tally]
    by_modality: Dict[str, Tally]
    verdicts: List[Verdict] = field(default_factory=list)
    notes: List[str] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        data = {
            "overall": self.overall.to_dict(),
            "by_type": {k: v.to_dict() for k, v in self.by_type.items()},
            "by_modality": {k: v.to_dict() for k, v in self.by_modality.items()},
            "verdicts": [asdict(v) for v in self.verdicts],
        }
        if self.notes:
            data["notes"] = list(self.notes)
        return data


def aggregate(verdicts: Sequence[Verdict]) -> EvalReport:
    """Gộp verdict thành EvalReport; thứ tự verdict theo question_id.

    Raises:
        ContractError: nếu không có verdict nào
    """
    if not verdicts:
        raise ContractError("Không có record nào để đánh giá")
    ordered = sorted(verdicts, key=lambda v: v.question_id)
    overall = Tally()
    by_type = {t: Tally() for t in QUESTION_TYPES}
    by_modality: Dict[str, Tally] = {}
    for verdict in ordered:
        overall.add(verdict.correct)
        by_type[verdict.question_type].add(verdict.correct)
        by_modality.setdefault(verdict.modality, Tally()).add(verdict.correct)
    return EvalReport(overall, by_type, dict(sorted(by_modality.items())), list(ordered))


def score_record(record: VQARecord, prediction: str,
                 rules: NormalizationRules = DEFAULT_RULES) -> Verdict:
    return Verdict(
        question_id=record.question_id,
        prediction=prediction,
        gt=record.gt_answer,
        correct=exact_match(prediction, record.gt_answer, rules),
        question_type=classify_answer(record.gt_answer, rules),
        modality=record.modality,
    )


class _EvalWorker(threading.Thread):
    """Sinh câu trả lời cho một phần record; lỗi được giữ lại cho thread gọi."""

    def __init__(self, index: int, model: VLMModel, records: Sequence[VQARecord],
                 images: ImageCache, rules: NormalizationRules, params: GenerationParams,
                 sink: Dict[str, Verdict], lock: threading.Lock):
        super().__init__(name=f"eval-worker-{index}", daemon=True)
        self.model = model
        self.records = records
        self.images = images
        self.rules = rules
        self.params = params
        self.sink = sink
        self.lock = lock
        self.error: Optional[BaseException] = None

    def run(self):
        try:
            for record in self.records:
                with self.lock:
                    image = self.images.get(record.image_path)
                prediction = self.model.tokenizer.detokenize(generate(
                    self.model, image, self.model.tokenizer.tokenize(record.question),
                    self.params))
                verdict = score_record(record, prediction, self.rules)
                with self.lock:
                    self.sink[record.question_id] = verdict
        except BaseException as exc:  # noqa: BLE001 - re-raised on the caller thread
            self.error = exc


def evaluate(model: VLMModel, records: Sequence[VQARecord], images: ImageCache,
             rules: NormalizationRules = DEFAULT_RULES,
             gen_params: Optional[GenerationParams] = None, workers: int = 1) -> EvalReport:
    """Sinh và chấm từng record, gộp theo loại câu hỏi và modality.

    Args:
        model: VLMModel (chỉ đọc)
        records: Record đã reformulate
        images: Nguồn ảnh theo image_path
        rules: Luật chuẩn hóa
        gen_params: Tham số sinh
        workers: Số worker thread chia record theo kiểu round-robin

    Raises:
        ContractError: nếu records rỗng hoặc còn record có options
    """
    if not records:
        raise ContractError("Không có record nào để đánh giá")
    for record in records:
        if not record.is_open_ended:
            raise ContractError(
                f"Record '{record.question_id}' còn options, chạy reformulate trước")
    ids = [r.question_id for r in records]
    if len(set(ids)) != len(ids):
        raise SchemaError("question_id bị trùng trong tập đánh giá")
    params = gen_params or GenerationParams()
    workers = max(1, min(workers, len(records)))
    sink: Dict[str, Verdict] = {}
    lock = threading.Lock()
    threads = [_EvalWorker(i, model, records[i::workers], images, rules, params, sink, lock)
               for i in range(workers)]
    logger.info("⏰ Đánh giá %d record với %d worker", len(records), workers)
    for thread in threads:
        thread.start()
    for thread in threads:
        thread.join()
    for thread in threads:
        if thread.error is not None:
            raise thread.error
    report = aggregate(list(sink.values()))
    logger.info("✅ Accuracy %.1f%% (%d/%d)", report.overall.accuracy_pct,
                report.overall.correct, report.overall.total)
    return report


# --------------------------------------------------------------------------- #
# Precomputed counts
# --------------------------------------------------------------------------- #
def _tally_from(entry: Dict[str, Any], where: str) -> Tally:
    try:
        correct = int(entry["correct"])
        if "total" in entry:
            total = int(entry["total"])
        else:
            total = correct + int(entry["incorrect"])
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"{where}: cần 'correct' và 'total' hoặc 'incorrect'") from exc
    if not 0 <= correct <= total:
        raise SchemaError(f"{where}: correct={correct} ngoài [0, {total}]")
    return Tally(total, correct)


def modality_divergences(by_modality: Dict[str, Tally]) -> List[str]:
    """So phần trăm tính lại với phần trăm đã in trong bảng công bố."""
    notes = []
    for name, tally in by_modality.items():
        published = PUBLISHED_MODALITY_TABLE.get(name)
        if published is None or (published[0], published[1]) != (tally.total, tally.correct):
            continue
        printed = published[2]
        if tally.total and tally.accuracy_pct != printed:
            notes.append(f"{name}: in {printed:.1f}%, tính lại "
                         f"{tally.correct}/{tally.total} = {tally.accuracy_pct:.1f}%")
    return notes


def score_counts(counts: Dict[str, Any]) -> EvalReport:
    """Dựng EvalReport từ bảng đếm có sẵn (không cần model).

    ``counts`` có dạng::

        {"by_type": {"open": {"correct": 3441, "incorrect": 1429}, ...},
         "by_modality": {"CT": {"total": 3144, "correct": 2383}, ...}}

    Overall lấy từ by_type nếu có, ngược lại từ by_modality. Khi hai bảng
    không cùng tổng, report ghi chú thay vì báo lỗi.

    Raises:
        SchemaError: nếu bảng đếm sai dạng hoặc rỗng
    """
    by_type = {k: _tally_from(v, f"by_type.{k}") for k, v in counts.get("by_type", {}).items()}
    unknown = set(by_type) - set(QUESTION_TYPES)
    if unknown:
        raise SchemaError(f"Loại câu hỏi lạ: {sorted(unknown)}")
    by_modality = {k: _tally_from(v, f"by_modality.{k}")
                   for k, v in sorted(counts.get("by_modality", {}).items())}
    source = list(by_type.values()) or list(by_modality.values())
    if not source:
        raise SchemaError("Bảng đếm cần 'by_type' hoặc 'by_modality'")
    overall = Tally(sum(t.total for t in source), sum(t.correct for t in source))
    if overall.total == 0:
        raise ContractError("Accuracy không xác định khi total = 0")
    notes = modality_divergences(by_modality)
    if by_type and by_modality:
        modality_total = sum(t.total for t in by_modality.values())
        modality_correct = sum(t.correct for t in by_modality.values())
        if (modality_total, modality_correct) != (overall.total, overall.correct):
            notes.append(f"Tổng theo modality ({modality_correct}/{modality_total}) khác "
                         f"tổng theo loại câu hỏi ({overall.correct}/{overall.total})")
    for name in QUESTION_TYPES:
        by_type.setdefault(name, Tally())
    return EvalReport(overall, by_type, by_modality, [], notes)


def score_verdicts(entries: Sequence[Dict[str, Any]],
                   rules: NormalizationRules = DEFAULT_RULES) -> EvalReport:
    """Chấm lại file verdict (question_id, prediction, gt, modality)."""
    verdicts = []
    for i, entry in enumerate(entries):
        try:
            qid, prediction, gt = entry["question_id"], entry["prediction"], entry["gt"]
        except (KeyError, TypeError) as exc:
            raise SchemaError(f"Verdict #{i} thiếu question_id/prediction/gt") from exc
        verdicts.append(Verdict(qid, prediction, gt, exact_match(prediction, gt, rules),
                                classify_answer(gt, rules), entry.get("modality", "unknown")))
    return aggregate(verdicts)


def published_counts() -> Dict[str, Any]:
    """Bảng đếm đã công bố, dạng nhận bởi ``score_counts``."""
    return {
        "by_type": {k: {"correct": c, "incorrect": i} for k, (c, i) in PUBLISHED_TYPE_TABLE.items()},
        "by_modality": {k: {"total": t, "correct": c}
                        for k, (t, c, _) in PUBLISHED_MODALITY_TABLE.items()},
    }


# --------------------------------------------------------------------------- #
# Repetition audit
# --------------------------------------------------------------------------- #
@dataclass
class RepetitionAudit:
    """Tỉ lệ record test có cặp (câu hỏi, đáp án) đã xuất hiện trong train."""

    overall: Tally
    by_modality: Dict[str, Tally]

    def to_dict(self) -> Dict[str, Any]:
        return {"overall": self.overall.to_dict(),
                "by_modality": {k: v.to_dict() for k, v in self.by_modality.items()}}


def repetition_audit(train: Sequence[VQARecord], test: Sequence[VQARecord],
                     rules: NormalizationRules = DEFAULT_RULES) -> RepetitionAudit:
    """``correct`` trong mỗi Tally là số record test bị lặp lại từ train."""
    seen = {(normalize(r.question, rules), normalize(r.gt_answer, rules)) for r in train}
    overall = Tally()
    by_modality: Dict[str, Tally] = {}
    for record in test:
        repeated = (normalize(record.question, rules), normalize(record.gt_answer, rules)) in seen
        overall.add(repeated)
        by_modality.setdefault(record.modality, Tally()).add(repeated)
    return RepetitionAudit(overall, dict(sorted(by_modality.items())))
