"""
自動微分のプリミティブ演算

2つのトランスフォーマー構成を表現するのに必要な演算だけを提供する。
各演算は出力 Tensor を返し、記録中のテープがあればノードとして登録される。
"""
import math
from typing import Optional, Sequence, Tuple

import numpy as np

from src.tensorcore.tensor import Tensor, default_dtype
from src.utils.error_handler import ShapeMismatchError

MASK_FILL = -1e9
IGNORE_INDEX = -100
_GELU_C = math.sqrt(2.0 / math.pi)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """ブロードキャストで拡張された軸を総和して元の形状に戻す"""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(primitive: str, a: Tensor, b: Tensor) -> Tuple[int, ...]:
    try:
        return tuple(np.broadcast_shapes(a.shape, b.shape))
    except ValueError:
        raise ShapeMismatchError(primitive, a.shape, b.shape)


def _result(values: np.ndarray, parents: Sequence[Tensor], op: str, backward) -> Tensor:
    needs_grad = any(p.requires_grad for p in parents)
    return Tensor(values, requires_grad=needs_grad, parents=tuple(parents),
                  op=op, backward=backward if needs_grad else None)


def constant(values) -> Tensor:
    """勾配を追跡しない定数テンソル"""
    return Tensor(values, requires_grad=False)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    行列積（先頭軸はバッチとしてブロードキャスト）

    Args:
        a: (..., m, k)
        b: (..., k, n)

    Returns:
        Tensor: (..., m, n)
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatchError("matmul", a.shape, b.shape)
    try:
        out = np.matmul(a.values, b.values)
    except ValueError:
        raise ShapeMismatchError("matmul", a.shape, b.shape)

    def _backward(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.values, -1, -2)), a.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(a.values, -1, -2), g), b.shape)
        return ga, gb

    return _result(out, (a, b), "matmul", _backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("add", a, b)

    def _backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.values + b.values, (a, b), "add", _backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("sub", a, b)

    def _backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.values - b.values, (a, b), "sub", _backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """要素積"""
    _broadcast_shape("mul", a, b)

    def _backward(g):
        return (_unbroadcast(g * b.values, a.shape),
                _unbroadcast(g * a.values, b.shape))

    return _result(a.values * b.values, (a, b), "mul", _backward)


def scale(a: Tensor, factor: float) -> Tensor:
    """定数倍"""
    def _backward(g):
        return (g * factor,)

    return _result(a.values * factor, (a,), "scale", _backward)


def gelu(x: Tensor) -> Tensor:
    """GELU（tanh 近似）"""
    v = x.values
    inner = _GELU_C * (v + 0.044715 * v ** 3)
    t = np.tanh(inner)
    out = 0.5 * v * (1.0 + t)

    def _backward(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * v ** 2)
        local = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t ** 2) * d_inner
        return (g * local,)

    return _result(out, (x,), "gelu", _backward)


def softmax(x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """
    最終軸に沿ったソフトマックス

    Args:
        x: ロジット
        mask: True が参照可能な位置を表すブール配列（x にブロードキャスト可能）

    Returns:
        Tensor: 確率
    """
    logits = x.values
    if mask is not None:
        try:
            np.broadcast_shapes(np.shape(mask), x.shape)
        except ValueError:
            raise ShapeMismatchError("softmax", x.shape, np.shape(mask))
        logits = logits + np.where(mask, 0.0, MASK_FILL).astype(logits.dtype)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    out = exp / exp.sum(axis=-1, keepdims=True)

    def _backward(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - inner),)

    return _result(out, (x,), "softmax", _backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """最終軸のレイヤー正規化"""
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise ShapeMismatchError("layer_norm", x.shape, gain.shape, bias.shape)
    v = x.values
    n = v.shape[-1]
    mu = v.mean(axis=-1, keepdims=True)
    centered = v - mu
    var = (centered ** 2).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = xhat * gain.values + bias.values

    def _backward(g):
        lead_axes = tuple(range(g.ndim - 1))
        g_gain = (g * xhat).sum(axis=lead_axes)
        g_bias = g.sum(axis=lead_axes)
        g_xhat = g * gain.values
        g_x = (inv_std / n) * (
            n * g_xhat
            - g_xhat.sum(axis=-1, keepdims=True)
            - xhat * (g_xhat * xhat).sum(axis=-1, keepdims=True)
        )
        return g_x, g_gain, g_bias

    return _result(out, (x, gain, bias), "layer_norm", _backward)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """
    埋め込み参照

    Args:
        table: (vocab, d)
        ids: 整数 ID 配列

    Returns:
        Tensor: ids.shape + (d,)
    """
    ids = np.asarray(ids)
    if table.ndim != 2 or not np.issubdtype(ids.dtype, np.integer):
        raise ShapeMismatchError("embedding", table.shape, ids.shape)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeMismatchError("embedding", table.shape, ids.shape)

    def _backward(g):
        g_table = np.zeros_like(table.values)
        np.add.at(g_table, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (g_table,)

    return _result(table.values[ids], (table,), "embedding", _backward)


def cross_entropy(logits: Tensor, targets: np.ndarray,
                  ignore_index: int = IGNORE_INDEX) -> Tensor:
    """
    無視インデックス付きの平均クロスエントロピー

    Args:
        logits: (..., C)
        targets: logits の先頭形状と同じ整数配列
        ignore_index: 損失から除外するターゲット値

    Returns:
        Tensor: スカラー損失（有効位置が無い場合は 0）
    """
    targets = np.asarray(targets)
    if targets.shape != logits.shape[:-1]:
        raise ShapeMismatchError("cross_entropy", logits.shape, targets.shape)

    n_classes = logits.shape[-1]
    flat = logits.values.reshape(-1, n_classes)
    flat_targets = targets.reshape(-1)
    valid = flat_targets != ignore_index
    n_valid = int(valid.sum())

    shifted = flat - flat.max(axis=-1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    log_probs = shifted - log_z
    safe_targets = np.where(valid, flat_targets, 0)
    if n_valid and (safe_targets.min() < 0 or safe_targets.max() >= n_classes):
        raise ShapeMismatchError("cross_entropy", logits.shape, targets.shape)

    picked = log_probs[np.arange(flat.shape[0]), safe_targets]
    loss = -(picked * valid).sum() / n_valid if n_valid else 0.0

    def _backward(g):
        if not n_valid:
            return (np.zeros_like(logits.values),)
        grad = np.exp(log_probs)
        grad[np.arange(flat.shape[0]), safe_targets] -= 1.0
        grad *= valid[:, None] / n_valid
        return ((grad * g).reshape(logits.shape),)

    return _result(np.asarray(loss, dtype=default_dtype()), (logits,), "cross_entropy", _backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.values.reshape(shape)
    except ValueError:
        raise ShapeMismatchError("reshape", x.shape, tuple(shape))

    def _backward(g):
        return (g.reshape(x.shape),)

    return _result(out, (x,), "reshape", _backward)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeMismatchError("transpose", x.shape, axes)
    inverse = tuple(np.argsort(axes))

    def _backward(g):
        return (np.transpose(g, inverse),)

    return _result(np.transpose(x.values, axes), (x,), "transpose", _backward)


def total(x: Tensor) -> Tensor:
    """全要素の総和（スカラー）"""
    def _backward(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(np.asarray(x.values.sum()), (x,), "sum", _backward)
