"""Tensor - Dense float64 tensor với reverse-mode autodiff."""

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ContractError, ShapeError

BackwardRule = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_state = threading.local()


def is_grad_enabled() -> bool:
    """Kiểm tra thread hiện tại có đang ghi graph hay không."""
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Tắt việc ghi graph trong block (dùng cho generate/eval/gradcheck)."""
    previous = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


class Tensor:
    """N-dimensional array float64 có gradient tùy chọn.

    ``data`` là numpy array row-major; shape cố định sau khi tạo.
    Gradient chỉ được cộng dồn, muốn xóa phải gọi ``reset_grad()``.
    """

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        """Khởi tạo tensor.

        Args:
            data: Giá trị ban đầu (list, số, hoặc numpy array)
            requires_grad: True nếu cần tính gradient cho tensor này
            name: Tên dùng khi checkpoint (VD: "lm.blocks.0.attn.q.weight")
        """
        array = np.array(data, dtype=np.float64)
        if any(dim < 1 for dim in array.shape):
            raise ShapeError(f"Shape phải gồm các chiều dương, nhận: {array.shape}")
        self.data = array
        self.requires_grad = requires_grad
        self.name = name
        self.grad: Optional[np.ndarray] = None
        self._node: Optional["Node"] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def frozen(self) -> bool:
        """Tensor bị đóng băng = không nhận gradient."""
        return not self.requires_grad

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(f"item() chỉ dùng cho tensor 1 phần tử, shape={self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def reset_grad(self):
        """Xóa gradient đã cộng dồn."""
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, name=self.name)

    def backward(self):
        """Chạy backward từ tensor scalar này (xem ``backward``)."""
        backward(self)

    # Operators dispatch sang engine.functional
    def __add__(self, other):
        from . import functional as F
        return F.add(self, other)

    def __radd__(self, other):
        return self.__add__(other)

    def __sub__(self, other):
        from . import functional as F
        return F.sub(self, other)

    def __mul__(self, other):
        from . import functional as F
        if isinstance(other, Tensor):
            return F.mul(self, other)
        return F.scale(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        from . import functional as F
        return F.scale(self, -1.0)

    def __matmul__(self, other):
        from . import functional as F
        return F.matmul(self, other)

    def __getitem__(self, index):
        from . import functional as F
        return F.take(self, index)

    def reshape(self, *shape) -> "Tensor":
        from . import functional as F
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return F.reshape(self, shape)

    def __repr__(self) -> str:
        label = f", name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"


@dataclass(eq=False)
class Node:
    """Một phép toán đã ghi: inputs, output và luật backward."""

    inputs: Tuple[Tensor, ...]
    output: Tensor
    rule: BackwardRule
    op: str = ""


def make_result(data: np.ndarray, inputs: Sequence[Tensor], rule: BackwardRule, op: str) -> Tensor:
    """Tạo tensor kết quả và ghi node nếu có input cần gradient.

    Args:
        data: Giá trị forward
        inputs: Các tensor đầu vào theo thứ tự mà ``rule`` trả gradient
        rule: Hàm nhận upstream gradient, trả gradient cho từng input
        op: Tên phép toán (debug)

    Returns:
        Tensor kết quả
    """
    out = Tensor.__new__(Tensor)
    out.data = data
    out.name = None
    out.grad = None
    out._node = None
    out.requires_grad = is_grad_enabled() and any(t.requires_grad for t in inputs)
    if out.requires_grad:
        out._node = Node(inputs=tuple(inputs), output=out, rule=rule, op=op)
    return out


@dataclass
class Tape:
    """Danh sách node theo thứ tự topo, chỉ append.

    Mỗi node đứng sau tất cả node sinh ra input của nó; backward
    duyệt ngược đúng một lần mỗi node.
    """

    nodes: List[Node] = field(default_factory=list)

    @classmethod
    def record(cls, root: Tensor) -> "Tape":
        """Dựng tape từ các node có thể tới được từ ``root``."""
        tape = cls()
        visited = set()
        stack: List[Tuple[Tensor, bool]] = [(root, False)]
        while stack:
            tensor, expanded = stack.pop()
            node = tensor._node
            if node is None:
                continue
            if expanded:
                tape.nodes.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((tensor, True))
            for parent in node.inputs:
                if parent._node is not None and id(parent._node) not in visited:
                    stack.append((parent, False))
        return tape

    def run_backward(self, root: Tensor, seed: np.ndarray):
        """Lan truyền gradient ngược qua tape và cộng dồn vào ``.grad``."""
        grads: Dict[int, np.ndarray] = {id(root): seed}
        touched: Dict[int, Tensor] = {id(root): root}
        for node in reversed(self.nodes):
            upstream = grads.pop(id(node.output), None)
            if upstream is None:
                continue
            for parent, grad in zip(node.inputs, node.rule(upstream)):
                if grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + grad
                else:
                    grads[key] = grad
                touched[key] = parent
        # Leaf còn lại trong grads (không có node) nhận gradient cuối cùng
        for key, grad in grads.items():
            tensor = touched[key]
            if tensor.grad is None:
                tensor.grad = np.array(grad, dtype=np.float64).reshape(tensor.shape)
            else:
                tensor.grad = tensor.grad + grad


def backward(loss: Tensor):
    """Tính gradient của ``loss`` theo mọi tensor requires_grad là leaf.

    Gọi hai lần mà không reset sẽ cộng dồn gradient.

    Raises:
        ContractError: nếu loss không phải scalar
    """
    if loss.size != 1:
        raise ContractError(f"backward cần loss scalar, nhận shape {loss.shape}")
    if not loss.requires_grad:
        return
    seed = np.ones_like(loss.data)
    if loss._node is None:
        loss.grad = seed if loss.grad is None else loss.grad + seed
        return
    Tape.record(loss).run_backward(loss, seed)
