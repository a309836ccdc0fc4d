"""Gradient check - So sánh gradient analytic với sai phân trung tâm."""

from typing import Callable

import numpy as np

from .tensor import Tensor, backward, no_grad

RELATIVE_FLOOR = 1e-8


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| / max(1e-8, |a| + |n|) trên mọi tọa độ."""
    denom = np.maximum(RELATIVE_FLOOR, np.abs(analytic) + np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom))


def numeric_gradient(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> np.ndarray:
    """Sai phân trung tâm (f(x+εeᵢ) − f(x−εeᵢ)) / 2ε cho từng tọa độ của x.

    ``x.data`` được sửa tại chỗ rồi khôi phục, nên f có thể là closure
    dùng x như một parameter của model.
    """
    flat = x.data.reshape(-1)
    grad = np.zeros_like(flat)
    with no_grad():
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + eps
            plus = f(x).item()
            flat[i] = original - eps
            minus = f(x).item()
            flat[i] = original
            grad[i] = (plus - minus) / (2.0 * eps)
    return grad.reshape(x.shape)


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Trả về sai số tương đối lớn nhất giữa gradient analytic và numeric.

    Args:
        f: Hàm trả về tensor scalar
        x: Tensor cần kiểm tra (sẽ được bật requires_grad)
        eps: Bước sai phân

    Returns:
        max relative error; caller tự assert ngưỡng
    """
    x.requires_grad = True
    x.reset_grad()
    backward(f(x))
    analytic = np.zeros(x.shape) if x.grad is None else x.grad.copy()
    x.reset_grad()
    return relative_error(analytic, numeric_gradient(f, x, eps))
