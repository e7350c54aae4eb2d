from dataclasses import dataclass, replace
from typing import Dict, Mapping, Tuple

import numpy as np

from src.tensorcore import NamedParams
from src.utils.error_handler import NonFiniteError

# 再クリップで値が変わらないための相対許容幅
_CLIP_TOLERANCE = 1e-6


def decays(name: str, value: np.ndarray) -> bool:
    """減衰対象か（2次元以上の重み行列と埋め込み。LN とバイアスは除外）"""
    return value.ndim >= 2


@dataclass
class OptState:
    """AdamW の状態"""
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.98
    weight_decay: float = 1.0
    eps: float = 1e-8
    clip_norm: float = 1.0

    @classmethod
    def create(cls, params: NamedParams, lr: float, weight_decay: float,
               beta1: float = 0.9, beta2: float = 0.98, eps: float = 1e-8,
               clip_norm: float = 1.0) -> "OptState":
        """ゼロモーメントで初期化"""
        zeros = {name: np.zeros_like(value) for name, value in params.items()}
        return cls(m=zeros, v={k: z.copy() for k, z in zeros.items()}, step=0, lr=lr,
                   beta1=beta1, beta2=beta2, weight_decay=weight_decay, eps=eps,
                   clip_norm=clip_norm)


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    """全勾配を連結したベクトルの L2 ノルム（64bit で集計）"""
    total = 0.0
    for value in grads.values():
        total += float(np.sum(np.square(value, dtype=np.float64)))
    return float(np.sqrt(total))


def clip_global(grads: Mapping[str, np.ndarray], max_norm: float = 1.0,
                step=None) -> Tuple[Dict[str, np.ndarray], float]:
    """
    大域ノルムによる勾配クリッピング

    Args:
        grads: パラメータ名→勾配
        max_norm: 上限ノルム
        step: 診断用のステップ番号

    Returns:
        Tuple[Dict[str, np.ndarray], float]: (クリップ後の勾配, クリップ前のノルム)

    Raises:
        NonFiniteError: 勾配に非有限値が含まれる場合
    """
    norm = global_norm(grads)
    if not np.isfinite(norm):
        raise NonFiniteError("勾配", step=step)
    if norm <= max_norm * (1.0 + _CLIP_TOLERANCE):
        return dict(grads), norm
    factor = max_norm / norm
    return {name: (value * factor).astype(value.dtype) for name, value in grads.items()}, norm


def adamw_step(params: NamedParams, grads: Mapping[str, np.ndarray], state: OptState
               ) -> Tuple[NamedParams, OptState]:
    """
    バイアス補正付き Adam 更新と分離型重み減衰

    θ ← θ − η·(m̂ / (√v̂ + ε) + λ·θ)（λ は減衰対象の行列のみ）

    Args:
        params: パラメータ
        grads: クリップ済み勾配
        state: 最適化状態

    Returns:
        Tuple[NamedParams, OptState]: 更新後のパラメータと状態（入力は変更しない）
    """
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    correction1 = 1.0 - b1 ** t
    correction2 = 1.0 - b2 ** t

    new_params = {}
    new_m = {}
    new_v = {}
    for name, theta in params.items():
        g = grads[name]
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        update = (m / correction1) / (np.sqrt(v / correction2) + state.eps)
        if decays(name, theta) and state.weight_decay:
            update = update + state.weight_decay * theta
        new_params[name] = (theta - state.lr * update).astype(theta.dtype)
        new_m[name] = m.astype(theta.dtype)
        new_v[name] = v.astype(theta.dtype)

    return NamedParams(new_params), replace(state, m=new_m, v=new_v, step=t)
