"""
トランスフォーマーの共通部品

パラメータは "<prefix>.<role>" 形式の名前で葉テンソル辞書から参照する。
"""
import math
from typing import Dict, Optional

import numpy as np

from src.tensorcore import Tensor, ops

Leaves = Dict[str, Tensor]

ATTENTION_ROLES = ("W_Q", "W_K", "W_V", "W_O")
MLP_ROLES = ("W_up", "W_down")


def uniform_init(rng: np.random.Generator, shape, d_model: int) -> np.ndarray:
    """±1/√d_model の一様分布で初期化"""
    bound = 1.0 / math.sqrt(d_model)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def init_layer_norm(params: Dict[str, np.ndarray], prefix: str, d_model: int) -> None:
    params[f"{prefix}.gain"] = np.ones(d_model, dtype=np.float32)
    params[f"{prefix}.bias"] = np.zeros(d_model, dtype=np.float32)


def init_attention(params: Dict[str, np.ndarray], prefix: str, d_model: int,
                   rng: np.random.Generator) -> None:
    # 注意射影はバイアスなし
    for role in ATTENTION_ROLES:
        params[f"{prefix}.{role}"] = uniform_init(rng, (d_model, d_model), d_model)


def init_mlp(params: Dict[str, np.ndarray], prefix: str, d_model: int, d_ff: int,
             rng: np.random.Generator) -> None:
    params[f"{prefix}.W_up"] = uniform_init(rng, (d_model, d_ff), d_model)
    params[f"{prefix}.b_up"] = np.zeros(d_ff, dtype=np.float32)
    params[f"{prefix}.W_down"] = uniform_init(rng, (d_ff, d_model), d_model)
    params[f"{prefix}.b_down"] = np.zeros(d_model, dtype=np.float32)


def layer_norm(leaves: Leaves, prefix: str, x: Tensor) -> Tensor:
    return ops.layer_norm(x, leaves[f"{prefix}.gain"], leaves[f"{prefix}.bias"])


def causal_mask(length: int) -> np.ndarray:
    """(1, 1, T, T) の下三角マスク（True が参照可能）"""
    return np.tril(np.ones((length, length), dtype=bool))[None, None]


def key_mask(valid: np.ndarray) -> np.ndarray:
    """(B, S) の有効位置から (B, 1, 1, S) のキーマスクを作る"""
    return np.asarray(valid, dtype=bool)[:, None, None, :]


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    batch, length, d_model = x.shape
    x = ops.reshape(x, (batch, length, n_heads, d_model // n_heads))
    return ops.transpose(x, (0, 2, 1, 3))


def attention(leaves: Leaves, prefix: str, x_q: Tensor, x_kv: Tensor, n_heads: int,
              mask: Optional[np.ndarray] = None) -> Tensor:
    """
    マルチヘッド注意

    Args:
        leaves: パラメータ
        prefix: 例 "layer0.attn"
        x_q: クエリ側入力 (B, Tq, d)
        x_kv: キー・バリュー側入力 (B, Tk, d)
        n_heads: ヘッド数
        mask: (B|1, 1, Tq|1, Tk) のブールマスク

    Returns:
        Tensor: (B, Tq, d)
    """
    batch, length, d_model = x_q.shape
    head_dim = d_model // n_heads
    q = _split_heads(ops.matmul(x_q, leaves[f"{prefix}.W_Q"]), n_heads)
    k = _split_heads(ops.matmul(x_kv, leaves[f"{prefix}.W_K"]), n_heads)
    v = _split_heads(ops.matmul(x_kv, leaves[f"{prefix}.W_V"]), n_heads)

    scores = ops.scale(ops.matmul(q, ops.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(head_dim))
    weights = ops.softmax(scores, mask)
    context = ops.transpose(ops.matmul(weights, v), (0, 2, 1, 3))
    context = ops.reshape(context, (batch, length, d_model))
    return ops.matmul(context, leaves[f"{prefix}.W_O"])


def mlp(leaves: Leaves, prefix: str, x: Tensor) -> Tensor:
    hidden = ops.gelu(ops.add(ops.matmul(x, leaves[f"{prefix}.W_up"]), leaves[f"{prefix}.b_up"]))
    return ops.add(ops.matmul(hidden, leaves[f"{prefix}.W_down"]), leaves[f"{prefix}.b_down"])


def embed(leaves: Leaves, prefix: str, ids: np.ndarray) -> Tensor:
    """トークン埋め込み + 学習済み絶対位置埋め込み"""
    positions = np.arange(ids.shape[1])
    return ops.add(ops.embedding(leaves[f"{prefix}tok_embed"], ids),
                   ops.embedding(leaves[f"{prefix}pos_embed"], positions))


def matrix_group(name: str) -> str:
    """行列名を attention / mlp / other に分類"""
    role = name.rsplit(".", 1)[-1]
    if role in ATTENTION_ROLES:
        return "attention"
    if role in MLP_ROLES:
        return "mlp"
    return "other"
