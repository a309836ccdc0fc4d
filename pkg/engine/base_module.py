"""Base Module - Abstract base class cho mọi khối có parameter."""

from abc import ABC, abstractmethod
from typing import Any, Dict, Iterator, List, Tuple

from .tensor import Tensor


class BaseModule(ABC):
    """Abstract base class cho tất cả module (layer, encoder, model).

    Sử dụng Template Method Pattern: subclass chỉ cần khai báo
    ``own_parameters`` và ``children``, còn việc duyệt tên, đóng băng,
    đếm parameter được định nghĩa một lần ở đây.
    """

    def __init__(self, name: str):
        """Khởi tạo module.

        Args:
            name: Đường dẫn tên duy nhất trong model (VD: "lm.blocks.0.attn")
        """
        self.name = name

    @abstractmethod
    def own_parameters(self) -> Dict[str, Tensor]:
        """Các tensor do chính module này sở hữu.

        Returns:
            Dictionary {tên cục bộ: Tensor}
        """

    def children(self) -> List["BaseModule"]:
        """Các module con (mặc định: không có)."""
        return []

    def named_parameters(self) -> Iterator[Tuple[str, Tensor]]:
        """Duyệt (tên đầy đủ, tensor) theo thứ tự cố định, trước con sau."""
        for local, tensor in self.own_parameters().items():
            yield f"{self.name}.{local}", tensor
        for child in self.children():
            yield from child.named_parameters()

    def parameters(self) -> List[Tensor]:
        return [tensor for _, tensor in self.named_parameters()]

    def freeze(self):
        """Đóng băng toàn bộ parameter của module."""
        for tensor in self.parameters():
            tensor.requires_grad = False

    def unfreeze(self):
        for tensor in self.parameters():
            tensor.requires_grad = True

    def reset_grad(self):
        for tensor in self.parameters():
            tensor.reset_grad()

    def num_parameters(self, trainable_only: bool = False) -> int:
        return int(
            sum(t.size for t in self.parameters() if t.requires_grad or not trainable_only)
        )

    def get_status(self) -> Dict[str, Any]:
        """Thông tin tóm tắt của module."""
        return {
            "name": self.name,
            "type": self.__class__.__name__,
            "total_parameters": self.num_parameters(),
            "trainable_parameters": self.num_parameters(trainable_only=True),
        }

    def __repr__(self) -> str:
        return f"{self.__class__.__name__}(name={self.name}, params={self.num_parameters()})"
