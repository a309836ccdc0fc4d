"""Answer normalization - Chuẩn hóa chuỗi trả lời trước khi so khớp."""

import re
from dataclasses import dataclass

_WHITESPACE = re.compile(r"\s+")

YES_NO = ("yes", "no")


@dataclass(frozen=True)
class NormalizationRules:
    """Các luật chuẩn hóa; thứ tự áp dụng cố định: trim, collapse, lowercase, strip period."""

    lowercase: bool = True
    trim: bool = True
    collapse_whitespace: bool = True
    strip_terminal_period: bool = True


DEFAULT_RULES = NormalizationRules()


def normalize(text: str, rules: NormalizationRules = DEFAULT_RULES) -> str:
    """Chuẩn hóa chuỗi; idempotent với mọi bộ luật.

    Args:
        text: Chuỗi gốc
        rules: Bộ luật

    Returns:
        Chuỗi đã chuẩn hóa
    """
    out = text
    # Lặp tới điểm bất động: bỏ dấu chấm có thể lộ ra khoảng trắng/dấu chấm mới
    while True:
        previous = out
        if rules.trim:
            out = out.strip()
        if rules.collapse_whitespace:
            out = _WHITESPACE.sub(" ", out)
        if rules.lowercase:
            out = out.lower()
        if rules.strip_terminal_period and out.endswith("."):
            out = out[:-1]
        if out == previous:
            return out


def exact_match(prediction: str, gt: str, rules: NormalizationRules = DEFAULT_RULES) -> bool:
    return normalize(prediction, rules) == normalize(gt, rules)


def classify_answer(gt_answer: str, rules: NormalizationRules = DEFAULT_RULES) -> str:
    """'yesno' nếu gt chuẩn hóa là yes/no, ngược lại 'open'."""
    return "yesno" if normalize(gt_answer, rules) in YES_NO else "open"
