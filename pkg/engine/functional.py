"""Functional ops - Các phép toán khả vi trên Tensor.

Mỗi op tính forward bằng numpy và đăng ký một backward rule qua
``make_result``. Broadcasting chỉ hỗ trợ scalar.
"""

import math
from typing import Optional, Sequence, Union

import numpy as np

from .errors import EmptyObjectiveError, NumericDomainError, ShapeError, TokenIndexError
from .tensor import Tensor, make_result

NORM_EPSILON = 1e-5
GELU_COEFF = 0.044715
_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)

Scalar = Union[int, float]


def _is_scalar(value) -> bool:
    if isinstance(value, Tensor):
        return value.ndim == 0
    return isinstance(value, (int, float, np.floating, np.integer))


def _sum_to_scalar(grad: np.ndarray) -> np.ndarray:
    return np.asarray(grad.sum(), dtype=np.float64)


# --------------------------------------------------------------------------- #
# Linear algebra
# --------------------------------------------------------------------------- #
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Nhân ma trận ``a @ b``.

    Hỗ trợ a[..., m, k] @ b[k, n] và batched a[B..., m, k] @ b[B..., k, n]
    khi hai toán hạng có cùng leading dims.

    Raises:
        ShapeError: nếu inner dimension không khớp
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul không khớp shape: {a.shape} x {b.shape}")
    batched = b.ndim > 2
    if batched and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul không khớp batch dims: {a.shape} x {b.shape}")
    a_data, b_data = a.data, b.data

    def rule(g):
        grad_a = g @ np.swapaxes(b_data, -1, -2)
        if batched:
            grad_b = np.swapaxes(a_data, -1, -2) @ g
        else:
            grad_b = a_data.reshape(-1, a_data.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return grad_a, grad_b

    return make_result(a_data @ b_data, (a, b), rule, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """y = x @ Wᵀ + b với W[d_out × d_in]."""
    d_out, d_in = weight.shape
    if x.shape[-1] != d_in:
        raise ShapeError(f"linear: input {x.shape} không khớp weight {weight.shape}")
    if bias is not None and bias.shape != (d_out,):
        raise ShapeError(f"linear: bias {bias.shape} không khớp d_out={d_out}")
    x_data, w_data = x.data, weight.data
    out = x_data @ w_data.T
    if bias is not None:
        out = out + bias.data

    def rule(g):
        g2 = g.reshape(-1, d_out)
        grad_x = g @ w_data
        grad_w = g2.T @ x_data.reshape(-1, d_in)
        grads = [grad_x, grad_w]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, inputs, rule, "linear")


# --------------------------------------------------------------------------- #
# Elementwise
# --------------------------------------------------------------------------- #
def elementwise(op: str, a: Tensor, b: Union[Tensor, Scalar]) -> Tensor:
    """Phép toán từng phần tử: add | sub | mul | scale.

    Args:
        op: Tên phép toán
        a: Tensor đầu vào
        b: Tensor cùng shape, hoặc scalar (số hoặc tensor 0-d)

    Raises:
        ShapeError: nếu b không phải scalar và khác shape với a
    """
    if op == "scale":
        if isinstance(b, Tensor):
            raise ShapeError("scale nhận hệ số là số thực, không phải Tensor")
        factor = float(b)
        return make_result(a.data * factor, (a,), lambda g: (g * factor,), "scale")

    if not isinstance(b, Tensor):
        if not _is_scalar(b):
            raise ShapeError(f"{op}: toán hạng thứ hai phải là Tensor hoặc scalar")
        value = float(b)
        if op == "add":
            return make_result(a.data + value, (a,), lambda g: (g,), "add")
        if op == "sub":
            return make_result(a.data - value, (a,), lambda g: (g,), "sub")
        if op == "mul":
            return make_result(a.data * value, (a,), lambda g: (g * value,), "mul")
        raise ShapeError(f"Phép toán không hợp lệ: {op}")

    scalar_b = b.ndim == 0 and a.ndim != 0
    if not scalar_b and a.shape != b.shape:
        raise ShapeError(f"{op}: shape không khớp {a.shape} vs {b.shape}")
    a_data, b_data = a.data, b.data
    reduce_b = _sum_to_scalar if scalar_b else (lambda g: g)

    if op == "add":
        return make_result(a_data + b_data, (a, b), lambda g: (g, reduce_b(g)), "add")
    if op == "sub":
        return make_result(a_data - b_data, (a, b), lambda g: (g, reduce_b(-g)), "sub")
    if op == "mul":
        return make_result(
            a_data * b_data, (a, b), lambda g: (g * b_data, reduce_b(g * a_data)), "mul"
        )
    raise ShapeError(f"Phép toán không hợp lệ: {op}")


def add(a: Tensor, b) -> Tensor:
    return elementwise("add", a, b)


def sub(a: Tensor, b) -> Tensor:
    return elementwise("sub", a, b)


def mul(a: Tensor, b) -> Tensor:
    return elementwise("mul", a, b)


def scale(a: Tensor, factor: Scalar) -> Tensor:
    return elementwise("scale", a, factor)


# --------------------------------------------------------------------------- #
# Shape ops
# --------------------------------------------------------------------------- #
def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    original = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape {original} -> {tuple(shape)} không hợp lệ") from exc
    return make_result(out, (x,), lambda g: (g.reshape(original),), "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return make_result(
        np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),), "transpose"
    )


def take(x: Tensor, index) -> Tensor:
    """Indexing/slicing kiểu numpy; backward scatter-add về vị trí gốc."""
    shape = x.shape
    out = np.array(x.data[index], dtype=np.float64)

    def rule(g):
        full = np.zeros(shape, dtype=np.float64)
        np.add.at(full, index, g)
        return (full,)

    return make_result(out, (x,), rule, "take")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Nối các tensor dọc theo ``axis``."""
    if not tensors:
        raise ShapeError("concat cần ít nhất một tensor")
    sizes = [t.shape[axis] for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: shape không khớp {[t.shape for t in tensors]}") from exc
    boundaries = np.cumsum(sizes)[:-1]

    def rule(g):
        return np.split(g, boundaries, axis=axis)

    return make_result(out, tuple(tensors), rule, "concat")


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    return make_result(
        np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum"
    )


def mean(x: Tensor, axis: Optional[int] = None) -> Tensor:
    """Trung bình toàn bộ (axis=None) hoặc theo một trục."""
    shape = x.shape
    if axis is None:
        count = x.size
        return make_result(
            np.asarray(x.data.mean()),
            (x,),
            lambda g: (np.full(shape, float(g) / count),),
            "mean",
        )
    count = shape[axis]

    def rule(g):
        return (np.broadcast_to(np.expand_dims(g, axis) / count, shape).copy(),)

    return make_result(x.data.mean(axis=axis), (x,), rule, "mean")


# --------------------------------------------------------------------------- #
# Softmax / normalization / activations
# --------------------------------------------------------------------------- #
def _check_finite(x: Tensor, op: str):
    if not np.all(np.isfinite(x.data)):
        raise NumericDomainError(f"{op}: đầu vào chứa NaN/Inf")


def softmax(x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """Softmax theo trục cuối, có trừ max để ổn định số học.

    Args:
        x: Tensor [..., n]
        mask: Boolean array broadcast được với x; False = vị trí bị loại
            (xác suất 0, tương đương score -inf)

    Raises:
        NumericDomainError: nếu x chứa NaN/Inf
    """
    _check_finite(x, "softmax")
    scores = x.data
    if mask is not None:
        mask = np.broadcast_to(mask, scores.shape)
        scores = np.where(mask, scores, -np.inf)
    shifted = scores - scores.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=-1, keepdims=True)

    def rule(g):
        return (probs * (g - (g * probs).sum(axis=-1, keepdims=True)),)

    return make_result(probs, (x,), rule, "softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """LayerNorm theo trục cuối: (x - mean) / sqrt(var + eps) * gain + bias."""
    d = x.shape[-1]
    if gain.shape != (d,) or (bias is not None and bias.shape != (d,)):
        raise ShapeError(f"layer_norm: gain/bias phải có shape ({d},)")
    data = x.data
    mu = data.mean(axis=-1, keepdims=True)
    centered = data - mu
    inv_std = 1.0 / np.sqrt((centered ** 2).mean(axis=-1, keepdims=True) + NORM_EPSILON)
    xhat = centered * inv_std
    out = xhat * gain.data
    if bias is not None:
        out = out + bias.data
    gain_data = gain.data

    def rule(g):
        dxhat = g * gain_data
        dx = inv_std * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        grads = [dx, (g * xhat).reshape(-1, d).sum(axis=0)]
        if bias is not None:
            grads.append(g.reshape(-1, d).sum(axis=0))
        return grads

    inputs = (x, gain) if bias is None else (x, gain, bias)
    return make_result(out, inputs, rule, "layer_norm")


def rms_norm(x: Tensor, gain: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """RMSNorm theo trục cuối: x / sqrt(mean(x²) + eps) * gain (+ bias)."""
    d = x.shape[-1]
    if gain.shape != (d,) or (bias is not None and bias.shape != (d,)):
        raise ShapeError(f"rms_norm: gain/bias phải có shape ({d},)")
    data = x.data
    inv_rms = 1.0 / np.sqrt((data ** 2).mean(axis=-1, keepdims=True) + NORM_EPSILON)
    normed = data * inv_rms
    out = normed * gain.data
    if bias is not None:
        out = out + bias.data
    gain_data = gain.data

    def rule(g):
        gg = g * gain_data
        dx = inv_rms * gg - data * (inv_rms ** 3) * (gg * data).mean(axis=-1, keepdims=True)
        grads = [dx, (g * normed).reshape(-1, d).sum(axis=0)]
        if bias is not None:
            grads.append(g.reshape(-1, d).sum(axis=0))
        return grads

    inputs = (x, gain) if bias is None else (x, gain, bias)
    return make_result(out, inputs, rule, "rms_norm")


def norm(kind: str, x: Tensor, gain: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Dispatch theo ``kind``: layer_norm | rms_norm."""
    if kind == "layer_norm":
        return layer_norm(x, gain, bias)
    if kind == "rms_norm":
        return rms_norm(x, gain, bias)
    raise ShapeError(f"norm_kind không hợp lệ: {kind}")


def gelu(x: Tensor) -> Tensor:
    """GELU xấp xỉ tanh."""
    data = x.data
    inner = _SQRT_2_OVER_PI * (data + GELU_COEFF * data ** 3)
    t = np.tanh(inner)
    out = 0.5 * data * (1.0 + t)

    def rule(g):
        d_inner = _SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEFF * data ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * data * (1.0 - t ** 2) * d_inner),)

    return make_result(out, (x,), rule, "gelu")


def silu(x: Tensor) -> Tensor:
    """SiLU: x * sigmoid(x)."""
    data = x.data
    sig = 0.5 * (1.0 + np.tanh(0.5 * data))
    out = data * sig

    def rule(g):
        return (g * (sig + data * sig * (1.0 - sig)),)

    return make_result(out, (x,), rule, "silu")


def activation(kind: str, x: Tensor) -> Tensor:
    if kind == "gelu":
        return gelu(x)
    if kind == "silu":
        return silu(x)
    raise ShapeError(f"activation không hợp lệ: {kind}")


# --------------------------------------------------------------------------- #
# Embedding / loss
# --------------------------------------------------------------------------- #
def embedding_lookup(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Gather các hàng của ``table``; backward scatter-add gradient vào hàng.

    Raises:
        TokenIndexError: nếu có id ngoài [0, V)
    """
    vocab = table.shape[0]
    index = np.asarray(list(ids), dtype=np.int64)
    for token in index:
        if not 0 <= token < vocab:
            raise TokenIndexError(f"Token id {int(token)} nằm ngoài vocab V={vocab}")
    shape = table.shape

    def rule(g):
        full = np.zeros(shape, dtype=np.float64)
        np.add.at(full, index, g)
        return (full,)

    return make_result(table.data[index], (table,), rule, "embedding")


def cross_entropy(logits: Tensor, targets: Sequence[int], mask: Optional[Sequence[bool]] = None) -> Tensor:
    """Mean negative log-likelihood trên các vị trí không bị mask.

    Args:
        logits: Tensor [T × V]
        targets: T token id đích
        mask: T giá trị bool; True = vị trí tham gia loss (mặc định: tất cả)

    Raises:
        ShapeError: nếu độ dài không khớp
        EmptyObjectiveError: nếu mọi vị trí đều bị mask
    """
    steps, vocab = logits.shape
    target_ids = np.asarray(list(targets), dtype=np.int64)
    weights = np.ones(steps, dtype=bool) if mask is None else np.asarray(list(mask), dtype=bool)
    if target_ids.shape != (steps,) or weights.shape != (steps,):
        raise ShapeError(
            f"cross_entropy: logits {logits.shape}, targets {target_ids.shape}, mask {weights.shape}"
        )
    count = int(weights.sum())
    if count == 0:
        raise EmptyObjectiveError("cross_entropy: tất cả vị trí đều bị mask")
    _check_finite(logits, "cross_entropy")
    active_targets = np.where(weights, target_ids, 0)
    if np.any((active_targets < 0) | (active_targets >= vocab)):
        raise TokenIndexError(f"cross_entropy: target ngoài vocab V={vocab}")

    data = logits.data
    shifted = data - data.max(axis=-1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    log_probs = shifted - log_z
    rows = np.arange(steps)
    picked = log_probs[rows, active_targets]
    loss = -(picked * weights).sum() / count

    def rule(g):
        probs = np.exp(log_probs)
        probs[rows, active_targets] -= 1.0
        probs *= (weights[:, None] / count)
        return (probs * float(g),)

    return make_result(np.asarray(loss), (logits,), rule, "cross_entropy")
