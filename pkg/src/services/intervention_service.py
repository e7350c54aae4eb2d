import logging
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from src.models.experiment_config import Condition, InterventionSpec
from src.utils.error_handler import MissingBasisError

logger = logging.getLogger(__name__)

Grads = Dict[str, np.ndarray]


def kick_direction(deltas: Sequence[np.ndarray]) -> Optional[np.ndarray]:
    """
    δ 標本を列に並べた行列の第1左特異ベクトル（最初の δ と同じ向きに揃える）

    Returns:
        Optional[np.ndarray]: 単位ベクトル（全て0なら None）
    """
    stack = np.stack([np.asarray(d, dtype=np.float64) for d in deltas], axis=1)
    if not np.any(stack):
        return None
    u, _, _ = np.linalg.svd(stack, full_matrices=False)
    direction = u[:, 0]
    if float(direction @ stack[:, 0]) < 0:
        direction = -direction
    return direction


def apply_kick(theta: np.ndarray, deltas: Sequence[np.ndarray], strength: float
               ) -> Tuple[np.ndarray, bool]:
    """
    交換子の主方向への1回きりの摂動 θ ← θ + κ·‖θ‖·u

    Args:
        theta: 平坦パラメータ
        deltas: トリガーステップでの δ 標本
        strength: κ

    Returns:
        Tuple[np.ndarray, bool]: (新しい θ, 適用したか)
    """
    if strength == 0 or not deltas:
        return theta, False
    direction = kick_direction(deltas)
    if direction is None:
        logger.warning("δ が全て0のためキックを適用しません")
        return theta, False
    norm = float(np.linalg.norm(np.asarray(theta, dtype=np.float64)))
    kicked = np.asarray(theta, dtype=np.float64) + strength * norm * direction
    return kicked.astype(theta.dtype), True


def orthogonal_noise(grad: np.ndarray, lr: float, strength: float, rng: np.random.Generator
                     ) -> Tuple[np.ndarray, bool]:
    """
    勾配に直交するガウス雑音（ノルム ν·‖η g‖）

    Returns:
        Tuple[np.ndarray, bool]: (雑音, 勾配が0で素のガウス雑音を使ったか)
    """
    g = np.asarray(grad, dtype=np.float64)
    noise = rng.standard_normal(g.shape)
    g_norm_sq = float(g @ g)
    if g_norm_sq == 0.0:
        return noise, True
    noise -= (float(noise @ g) / g_norm_sq) * g
    target = strength * lr * np.sqrt(g_norm_sq)
    noise *= target / float(np.linalg.norm(noise))
    return noise, False


def apply_noise(theta: np.ndarray, grad: np.ndarray, step: int, period: int, lr: float,
                strength: float, rng: np.random.Generator) -> Tuple[np.ndarray, bool]:
    """
    period ステップごとにオプティマイザ更新後のパラメータへ直交雑音を加える

    Args:
        theta: 更新後の平坦パラメータ
        grad: そのステップの平坦勾配
        step: 実行したステップ番号（0始まり）
        period: 注入周期
        lr: 学習率 η
        strength: ν
        rng: 雑音の乱数

    Returns:
        Tuple[np.ndarray, bool]: (新しい θ, 勾配0フラグ)
    """
    if strength == 0 or (step + 1) % period:
        return theta, False
    noise, raw = orthogonal_noise(grad, lr, strength, rng)
    if raw:
        logger.warning(f"step {step}: 勾配が0のため素のガウス雑音を注入しました")
    return (np.asarray(theta, dtype=np.float64) + noise).astype(theta.dtype), raw


def _project(grad: np.ndarray, basis: np.ndarray) -> np.ndarray:
    flat = np.asarray(grad, dtype=np.float64).reshape(-1)
    return (basis @ (basis.T @ flat)).reshape(grad.shape)


def apply_project(grads: Mapping[str, np.ndarray], bases: Mapping[str, np.ndarray],
                  targets: Sequence[str]) -> Grads:
    """
    対象行列の勾配を学習部分空間へ射影 g ← B Bᵀ g

    Raises:
        MissingBasisError: 対象行列の基底が無い
    """
    out = dict(grads)
    for name in targets:
        if name not in bases:
            raise MissingBasisError(f"行列 {name} の基底がありません")
        out[name] = _project(grads[name], bases[name]).astype(grads[name].dtype)
    return out


def apply_penalty(grads: Mapping[str, np.ndarray], bases: Mapping[str, np.ndarray],
                  targets: Sequence[str], strength: float) -> Grads:
    """
    直交成分の縮小 g ← g_∥ + (1 − s)·g_⊥

    s = 0 は入力をそのまま返し、s = 1 は apply_project と同じ結果になる。
    """
    if strength == 0:
        return dict(grads)
    out = dict(grads)
    for name in targets:
        if name not in bases:
            raise MissingBasisError(f"行列 {name} の基底がありません")
        g = np.asarray(grads[name], dtype=np.float64)
        parallel = _project(g, bases[name])
        out[name] = (parallel + (1.0 - strength) * (g - parallel)).astype(grads[name].dtype)
    return out


class InterventionHooks:
    """学習ループに差し込む介入（勾配フック・更新後フック・キック）"""

    def __init__(self, spec: InterventionSpec, bases: Optional[Mapping[str, np.ndarray]] = None):
        """初期化

        Args:
            spec: 介入条件
            bases: 1B 条件で使う行列名→基底
        """
        spec.validate()
        self.spec = spec
        self.bases = dict(bases or {})
        if spec.condition.needs_basis and spec.is_active and not self.bases:
            raise MissingBasisError(f"{spec.condition.value} に基底が与えられていません")
        self.kick_applied = False

    @property
    def targets(self) -> List[str]:
        return list(self.bases)

    def gradient_hook(self, grads: Mapping[str, np.ndarray]) -> Grads:
        """クリップ前に勾配を変更（1B 条件）"""
        strength = self.spec.effective_strength
        if not self.spec.is_active:
            return dict(grads)
        if self.spec.condition == Condition.PROJECT_1B:
            return apply_project(grads, self.bases, self.targets)
        if self.spec.condition == Condition.PENALTY_1B:
            return apply_penalty(grads, self.bases, self.targets, strength)
        return dict(grads)

    def wants_noise(self) -> bool:
        return self.spec.is_active and self.spec.condition == Condition.NOISE_1A

    def wants_kick(self, step: int) -> bool:
        return (self.spec.is_active and self.spec.condition == Condition.KICK_1A
                and not self.kick_applied and self.spec.trigger_step is not None
                and step == self.spec.trigger_step)


def summarize_interventions(df: pd.DataFrame) -> pd.DataFrame:
    """
    条件・強度ごとの平均グロッキングステップとベースライン比の高速化率

    Args:
        df: condition, strength, seed, grok_step を含む用量反応表

    Returns:
        pd.DataFrame: condition, strength, mean_grok, n_grokked, n_runs, speedup
            （speedup = (baseline − mean) / baseline、負は遅延）
    """
    baseline = df[df["condition"] == Condition.BASELINE.value]["grok_step"].mean()
    grouped = df.groupby(["condition", "strength"]).agg(
        mean_grok=("grok_step", "mean"),
        n_grokked=("grok_step", "count"),
        n_runs=("seed", "count"),
    ).reset_index()
    if pd.isna(baseline) or baseline == 0:
        grouped["speedup"] = None
    else:
        grouped["speedup"] = (baseline - grouped["mean_grok"]) / baseline
    return grouped
