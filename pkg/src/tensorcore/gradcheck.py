from typing import Callable, List, Optional, Sequence

import numpy as np

from src.tensorcore import ops
from src.tensorcore.tensor import ComputationTape, Tensor, backward, recording, shadow_precision


def numerical_grad(fn: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-3,
                   indices: Optional[Sequence[int]] = None) -> np.ndarray:
    """
    中心差分による数値勾配

    Args:
        fn: 平坦化された入力からスカラーを返す関数
        x: 評価点（平坦化済み）
        h: 差分幅
        indices: 評価する座標（None なら全座標）

    Returns:
        np.ndarray: indices 順の数値勾配
    """
    coords = range(x.size) if indices is None else indices
    out = np.empty(len(coords), dtype=np.float64)
    for i, idx in enumerate(coords):
        plus = x.copy()
        minus = x.copy()
        plus[idx] += h
        minus[idx] -= h
        out[i] = (fn(plus) - fn(minus)) / (2.0 * h)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """ベクトル相対誤差 ‖a−n‖ / max(‖a‖+‖n‖, tiny)"""
    analytic = np.asarray(analytic, dtype=np.float64).reshape(-1)
    numeric = np.asarray(numeric, dtype=np.float64).reshape(-1)
    denom = max(np.linalg.norm(analytic) + np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / denom)


def check_primitive(build: Callable[[List[Tensor]], Tensor], inputs: Sequence[np.ndarray],
                    h: float = 1e-3, seed: int = 0) -> float:
    """
    プリミティブの解析勾配を64bitシャドウモードの中心差分と比較

    出力はランダムな固定重みとの内積でスカラーに縮約する。

    Args:
        build: 入力テンソルから出力テンソルを作る関数
        inputs: 各入力の値
        h: 差分幅
        seed: 縮約重みの乱数シード

    Returns:
        float: 入力ごとの相対誤差の最大値
    """
    rng = np.random.default_rng(seed)
    with shadow_precision(np.float64):
        probe = build([Tensor(x) for x in inputs])
        weights = rng.standard_normal(probe.shape)

        def scalar(values: List[np.ndarray]) -> float:
            out = build([Tensor(v) for v in values])
            return float((out.values * weights).sum())

        tape = ComputationTape()
        with recording(tape):
            leaves = [Tensor(np.array(x, dtype=np.float64), requires_grad=True) for x in inputs]
            out = build(leaves)
            loss = ops.total(ops.mul(out, ops.constant(weights)))
        backward(tape, loss)

        worst = 0.0
        for position, leaf in enumerate(leaves):
            base = [np.array(x, dtype=np.float64) for x in inputs]

            def along(flat: np.ndarray, position=position, base=base) -> float:
                values = list(base)
                values[position] = flat.reshape(base[position].shape)
                return scalar(values)

            numeric = numerical_grad(along, base[position].reshape(-1), h)
            analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.values)
            worst = max(worst, relative_error(analytic, numeric))
    return worst
