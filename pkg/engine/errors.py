"""Errors - Cây exception chung cho toàn bộ framework.

Mỗi lớp lỗi mang ``exit_code`` để CLI map ra mã thoát:
1 = lỗi validation/contract, 2 = lỗi I/O.
"""


class MedVQAError(Exception):
    """Base class cho tất cả lỗi của framework."""

    exit_code = 1


class ContractError(MedVQAError):
    """Vi phạm contract hoặc dữ liệu đầu vào không hợp lệ."""

    exit_code = 1


class ShapeError(ContractError):
    """Shape của tensor không khớp với phép toán."""


class NumericDomainError(ContractError):
    """Đầu vào chứa NaN hoặc Inf."""


class TokenIndexError(ContractError, IndexError):
    """Token id nằm ngoài bảng embedding."""


class EmptyObjectiveError(ContractError):
    """Không còn vị trí nào tham gia vào hàm loss."""


class ContextLengthError(ContractError):
    """Chuỗi vượt quá context length của model."""


class ConfigurationError(ContractError):
    """Cấu hình sai: selector không khớp, key lạ, giá trị ngoài miền."""


class LoRAStateError(ContractError):
    """Adapter ở sai trạng thái (VD: merge hai lần)."""


class SchemaError(ContractError):
    """Record thiếu field bắt buộc hoặc field sai kiểu."""


class DanglingAnswerError(ContractError):
    """gt_answer trỏ tới option không tồn tại."""


class DatasetParseError(ContractError):
    """File dataset không phải JSON hợp lệ."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class MissingGradientError(ContractError):
    """Parameter trainable chưa có gradient khi optimizer step."""


class ScheduleRangeError(ContractError):
    """Step nằm ngoài [0, total_steps]."""


class StorageError(MedVQAError):
    """Lỗi I/O khi đọc/ghi artifact."""

    exit_code = 2


class IntegrityError(StorageError):
    """Checkpoint blob bị hỏng hoặc không khớp manifest."""


class MigrationError(StorageError):
    """Phiên bản manifest không được hỗ trợ."""
