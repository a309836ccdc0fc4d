"""Reports - Ghi EvalReport ra JSON/CSV và in bảng tóm tắt ra stdout."""

import csv
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, TextIO

from engine.errors import ContractError, StorageError
from application.evaluator import EvalReport, RepetitionAudit, accuracy_pct
from application.diagnostics import GRADCHECK_THRESHOLD, CheckResult

logger = logging.getLogger(__name__)

BANNER = "=" * 60
TYPE_LABELS = {"open": "Open-end Questions", "yesno": "Yes/No Questions"}
REPORT_FILE = "report.json"


def _fmt_pct(value: Optional[float]) -> str:
    return "" if value is None else f"{value:.1f}"


def type_table_rows(report: EvalReport) -> List[List[str]]:
    """Bảng open / yes-no: Question Type, Correct, Incorrect, Accuracy (%), thêm dòng Total."""
    rows = [["Question Type", "Correct", "Incorrect", "Accuracy (%)"]]
    for key, label in TYPE_LABELS.items():
        tally = report.by_type[key]
        rows.append([label, str(tally.correct), str(tally.incorrect), _fmt_pct(tally.accuracy_pct)])
    overall = report.overall
    rows.append(["Total", str(overall.correct), str(overall.incorrect),
                 _fmt_pct(overall.accuracy_pct)])
    return rows


def modality_table_rows(report: EvalReport) -> List[List[str]]:
    """Bảng theo modality: Modality, Total, Correct, Accuracy (%)."""
    rows = [["Modality", "Total", "Correct", "Accuracy (%)"]]
    for name, tally in report.by_modality.items():
        rows.append([name, str(tally.total), str(tally.correct), _fmt_pct(tally.accuracy_pct)])
    return rows


def _write_csv(rows: Sequence[Sequence[str]], path: Path):
    with open(path, "w", encoding="utf-8", newline="") as f:
        csv.writer(f, lineterminator="\n").writerows(rows)


def emit_report(report: EvalReport, path, fmt: str = "json") -> List[Path]:
    """Ghi report.

    json: một file theo schema {overall, by_type, by_modality, verdicts}.
    csv: ``<stem>_by_type.csv`` và ``<stem>_by_modality.csv`` cạnh ``path``.

    Returns:
        Danh sách file đã ghi

    Raises:
        ContractError: nếu format không hỗ trợ
        StorageError: nếu không ghi được
    """
    path = Path(path)
    if fmt not in ("json", "csv"):
        raise ContractError(f"Format không hỗ trợ: {fmt}")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        if fmt == "json":
            text = json.dumps(report.to_dict(), indent=2, ensure_ascii=False)
            path.write_text(text + "\n", encoding="utf-8")
            written = [path]
        else:
            by_type = path.with_name(f"{path.stem}_by_type.csv")
            by_modality = path.with_name(f"{path.stem}_by_modality.csv")
            _write_csv(type_table_rows(report), by_type)
            _write_csv(modality_table_rows(report), by_modality)
            written = [by_type, by_modality]
    except OSError as exc:
        raise StorageError(f"Không ghi được report {path}: {exc}") from exc
    for item in written:
        logger.info("💾 Đã ghi %s", item)
    return written


def _print_rows(rows: Sequence[Sequence[str]], out: TextIO):
    widths = [max(len(row[i]) for row in rows) for i in range(len(rows[0]))]
    for index, row in enumerate(rows):
        cells = [row[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(row[1:], widths[1:])]
        print("  " + "  ".join(cells), file=out)
        if index == 0:
            print("  " + "-" * (sum(widths) + 2 * (len(widths) - 1)), file=out)


def print_summary(report: EvalReport, out: Optional[TextIO] = None):
    """In bảng open / yes-no, bảng modality và ghi chú chênh lệch."""
    print("\n" + BANNER, file=out)
    print("        KẾT QUẢ ĐÁNH GIÁ", file=out)
    print(BANNER, file=out)
    _print_rows(type_table_rows(report), out)
    if report.by_modality:
        print("", file=out)
        _print_rows(modality_table_rows(report), out)
    for note in report.notes:
        print(f"  ⚠️ {note}", file=out)
    print(BANNER + "\n", file=out)


def print_gradcheck_table(results: Sequence[CheckResult], out: Optional[TextIO] = None):
    print("\n" + BANNER, file=out)
    print(f"        GRADIENT CHECK (ngưỡng {GRADCHECK_THRESHOLD:.0e})", file=out)
    print(BANNER, file=out)
    for result in results:
        mark = "✅" if result.passed else "❌"
        print(f"  {mark} {result.component:<28} {result.max_relative_error:.3e}", file=out)
    print(BANNER + "\n", file=out)


def print_dataset_stats(summary: Dict[str, Any], audit: Optional[RepetitionAudit] = None,
                        out: Optional[TextIO] = None):
    print("\n" + BANNER, file=out)
    print("        THỐNG KÊ DATASET", file=out)
    print(BANNER, file=out)
    print(f"Tổng số record: {summary['total']}", file=out)
    print(f"Số ảnh: {summary['images']}", file=out)
    for key, count in summary["by_type"].items():
        print(f"  - {TYPE_LABELS.get(key, key)}: {count}", file=out)
    for key, count in summary["by_modality"].items():
        print(f"  - {key}: {count}", file=out)
    if audit is not None and audit.overall.total:
        share = accuracy_pct(audit.overall.correct, audit.overall.total)
        print(f"Lặp lại từ train: {audit.overall.correct}/{audit.overall.total} ({share:.1f}%)",
              file=out)
        for name, tally in audit.by_modality.items():
            print(f"  - {name}: {tally.correct}/{tally.total} ({_fmt_pct(tally.accuracy_pct)}%)",
                  file=out)
    print(BANNER + "\n", file=out)


def print_model_summary(counts: Dict[str, Any], out: Optional[TextIO] = None):
    print("\n" + BANNER, file=out)
    print("        THÔNG TIN MODEL", file=out)
    print(BANNER, file=out)
    for name, count in counts.items():
        print(f"  {name:<10} total={count.total:>10,}  trainable={count.trainable:>10,}", file=out)
    print(BANNER + "\n", file=out)
