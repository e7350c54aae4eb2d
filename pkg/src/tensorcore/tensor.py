import threading
from contextlib import contextmanager
from typing import Callable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from src.utils.error_handler import NonScalarLossError

# 勾配関数: 出力勾配を受け取り、親ごとの勾配（不要なら None）を返す
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_state = threading.local()


def default_dtype() -> type:
    """現在のスレッドの計算精度（既定は32bit）"""
    return getattr(_state, "dtype", np.float32)


def current_tape() -> Optional["ComputationTape"]:
    """記録中のテープ（無ければ None）"""
    return getattr(_state, "tape", None)


@contextmanager
def shadow_precision(dtype: type = np.float64) -> Iterator[None]:
    """
    一時的に計算精度を切り替える（勾配チェック用の64bitシャドウモード）

    Args:
        dtype: 使用する浮動小数点型
    """
    previous = default_dtype()
    _state.dtype = dtype
    try:
        yield
    finally:
        _state.dtype = previous


@contextmanager
def recording(tape: "ComputationTape") -> Iterator["ComputationTape"]:
    """
    ブロック内で生成された演算ノードをテープに記録する

    Args:
        tape: 記録先テープ

    Yields:
        ComputationTape: 記録先テープ
    """
    previous = current_tape()
    _state.tape = tape
    try:
        yield tape
    finally:
        _state.tape = previous


class Tensor:
    """勾配を追跡できる密な実数テンソル"""

    __slots__ = ("values", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, values, requires_grad: bool = False,
                 parents: Tuple["Tensor", ...] = (), op: str = "leaf",
                 backward: Optional[BackwardFn] = None):
        self.values = np.asarray(values, dtype=default_dtype())
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents = parents
        self._backward = backward

        tape = current_tape()
        if tape is not None and parents and requires_grad:
            tape.record(self)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return int(self.values.size)

    def item(self) -> float:
        """スカラー値を Python の float で取得"""
        return float(self.values.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.values

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, grad: np.ndarray) -> None:
        grad = np.asarray(grad, dtype=self.values.dtype)
        if self.grad is None:
            self.grad = grad.copy()
        else:
            self.grad = self.grad + grad

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"


class ComputationTape:
    """生成順（＝トポロジカル順）に演算ノードを保持するテープ"""

    def __init__(self):
        self.nodes: List[Tensor] = []

    def record(self, node: Tensor) -> None:
        self.nodes.append(node)

    def __len__(self) -> int:
        return len(self.nodes)

    def clear(self) -> None:
        self.nodes.clear()


def backward(tape: ComputationTape, loss: Tensor) -> None:
    """
    テープを逆順にたどって全追跡テンソルに勾配を蓄積

    Args:
        tape: 順伝播を記録したテープ
        loss: スカラー損失

    Raises:
        NonScalarLossError: 損失がスカラーでない場合
    """
    if loss.size != 1:
        raise NonScalarLossError(f"損失はスカラーである必要があります: shape={loss.shape}")

    loss.grad = np.ones_like(loss.values)
    for node in reversed(tape.nodes):
        if node.grad is None or node._backward is None:
            continue
        parent_grads = node._backward(node.grad)
        for parent, grad in zip(node._parents, parent_grads):
            if grad is None or not parent.requires_grad:
                continue
            parent._accumulate(grad)
