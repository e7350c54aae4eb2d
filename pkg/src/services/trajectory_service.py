import logging
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np
import pandas as pd

from src.interfaces.snapshot_store import ISnapshotStore
from src.models.measurements import NullModelResult, PcaResult, TurnoverResult
from src.networks.layers import matrix_group
from src.tensorcore import NamedParams
from src.utils.error_handler import AnalysisPreconditionError

logger = logging.getLogger(__name__)

# 転換点判定: ピークから何ポイント下がったら減少とみなすか
TURNOVER_DROP = 2.0


def record_snapshot(params: NamedParams, step: int, archive: ISnapshotStore,
                    matrices: Sequence[str]) -> None:
    """
    設定された行列のスナップショットを追記

    Args:
        params: パラメータ
        step: 学習ステップ
        archive: 保存先
        matrices: 対象行列名
    """
    archive.record(step, {name: params[name] for name in matrices})


def displacement_rows(rows: np.ndarray) -> np.ndarray:
    """各行を vec(W_τ − W_0) に変換（64bit）"""
    rows = np.asarray(rows, dtype=np.float64)
    return rows - rows[0]


def center_columns(x: np.ndarray) -> np.ndarray:
    return x - x.mean(axis=0, keepdims=True)


def trajectory_matrix(archive: ISnapshotStore, name: str, through_step: Optional[int] = None
                      ) -> np.ndarray:
    """
    列中心化した軌跡行列 X（行は τ ≤ t の vec(W_τ − W_0)）

    Raises:
        UnknownMatrixError: 未知の行列名
        AnalysisPreconditionError: スナップショットが2未満
    """
    _, rows = archive.read_matrix(name, through_step)
    if rows.shape[0] < 2:
        raise AnalysisPreconditionError(
            f"{name}: 軌跡行列には2つ以上のスナップショットが必要です ({rows.shape[0]})"
        )
    return center_columns(displacement_rows(rows))


def pca(x: np.ndarray, k: int = 5, window_end_step: int = 0) -> Optional[PcaResult]:
    """
    薄い SVD による PCA

    Args:
        x: (スナップショット数, 次元) の中心化済み行列
        k: 保持する基底の次元
        window_end_step: 窓の終端ステップ

    Returns:
        Optional[PcaResult]: 全分散が0なら None
    """
    _, s, vt = np.linalg.svd(x, full_matrices=False)
    energy = s ** 2
    total = float(energy.sum())
    if total <= 0.0:
        return None
    return PcaResult(explained_ratios=energy / total, window_end_step=window_end_step,
                     basis=vt[:k].T.copy())


def pc1_percent_of(rows: np.ndarray) -> Optional[float]:
    """生のスナップショット行（W_τ）から PC1% を計算"""
    result = pca(center_columns(displacement_rows(rows)), k=1)
    return None if result is None else result.pc1_percent


def expanding_pc1(archive: ISnapshotStore, name: str, k: int = 5, min_snapshots: int = 3
                  ) -> List[Optional[PcaResult]]:
    """
    拡張窓 PC1（各スナップショットまでの軌跡で PCA）

    Returns:
        List[Optional[PcaResult]]: 窓ごとの結果（縮退した窓は None）
    """
    steps, rows = archive.read_matrix(name)
    if len(steps) < min_snapshots:
        raise AnalysisPreconditionError(
            f"{name}: 拡張窓 PCA には {min_snapshots} 以上のスナップショットが必要です ({len(steps)})"
        )
    disp = displacement_rows(rows)
    results: List[Optional[PcaResult]] = []
    for end in range(min_snapshots, len(steps) + 1):
        results.append(pca(center_columns(disp[:end]), k=k, window_end_step=steps[end - 1]))
    return results


def pc1_frame(results: Sequence[Optional[PcaResult]], steps: Sequence[int]) -> pd.DataFrame:
    """拡張窓の結果を step, pc1_percent の表にする"""
    values = [None if r is None else r.pc1_percent for r in results]
    return pd.DataFrame({"step": list(steps), "pc1_percent": values})


def detect_turnover(steps: Sequence[int], values: Sequence[Optional[float]],
                    grok_step: Optional[int] = None, drop: float = TURNOVER_DROP
                    ) -> TurnoverResult:
    """
    PC1% の転換点（ピーク − drop を下回り、以後ピークを再び超えない最初のステップ）

    Args:
        steps: 窓終端ステップ
        values: PC1%（欠損は None）
        grok_step: グロッキングステップ（先行量の計算用）
        drop: 減少とみなす低下幅（ポイント）

    Returns:
        TurnoverResult: ピークと転換点
    """
    pairs = [(s, v) for s, v in zip(steps, values) if v is not None]
    if not pairs:
        return TurnoverResult(None, None, None)
    vals = np.array([v for _, v in pairs], dtype=np.float64)
    peak_value = vals[0]
    peak_step = pairs[0][0]
    for i, (step, value) in enumerate(pairs):
        if value > peak_value:
            peak_value, peak_step = value, step
        elif value < peak_value - drop and vals[i:].max() <= peak_value:
            lead = None if grok_step is None else int(grok_step - step)
            return TurnoverResult(peak_step, float(peak_value), int(step), lead)
    return TurnoverResult(peak_step, float(peak_value), None)


def null_displacements(norms: Sequence[float], dim: int, rng: np.random.Generator
                       ) -> np.ndarray:
    """
    各ステップの変位ノルムを保ったまま方向を一様ランダムにした変位列

    Returns:
        np.ndarray: (len(norms), dim)
    """
    directions = rng.standard_normal((len(norms), dim))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    return directions * np.asarray(norms, dtype=np.float64)[:, None]


def random_walk_null(archive: ISnapshotStore, name: str, n_null: int = 20, seed: int = 0
                     ) -> NullModelResult:
    """
    ランダムウォーク帰無モデルに対する PC1% の z スコア

    Args:
        archive: スナップショット
        name: 行列名
        n_null: 帰無軌跡の本数
        seed: 乱数シード

    Returns:
        NullModelResult: 帰無分布の平均・標準偏差と観測値
    """
    steps, rows = archive.read_matrix(name)
    if len(steps) < 3:
        raise AnalysisPreconditionError(f"{name}: 帰無モデルには3以上のスナップショットが必要です")
    return null_model_from_rows(rows, n_null, np.random.default_rng(seed))


def null_model_from_rows(rows: np.ndarray, n_null: int, rng: np.random.Generator
                         ) -> NullModelResult:
    rows = np.asarray(rows, dtype=np.float64)
    observed = pc1_percent_of(rows) or 0.0
    norms = np.linalg.norm(np.diff(rows, axis=0), axis=1)
    null_values = []
    for _ in range(n_null):
        walk = np.vstack([np.zeros(rows.shape[1]),
                          np.cumsum(null_displacements(norms, rows.shape[1], rng), axis=0)])
        null_values.append(pc1_percent_of(walk) or 0.0)
    std = float(np.std(null_values, ddof=1)) if n_null >= 2 else 0.0
    return NullModelResult(observed_pc1=float(observed), null_mean=float(np.mean(null_values)),
                           null_std=std, n_null=n_null, null_values=null_values)


def final_pc1(archive: ISnapshotStore, name: str) -> Optional[float]:
    """全軌跡（最終窓）の PC1%"""
    result = pca(trajectory_matrix(archive, name), k=1)
    return None if result is None else result.pc1_percent


def spectral_split(archive: ISnapshotStore, matrices: Optional[Sequence[str]] = None
                   ) -> pd.DataFrame:
    """
    最終窓 PC1% を attention / mlp / other の群に分けて集計

    Returns:
        pd.DataFrame: matrix, group, pc1_percent の行と、群平均を group_mean 列に持つ表
    """
    names = list(matrices) if matrices is not None else archive.matrix_names()
    df = pd.DataFrame({
        "matrix": names,
        "group": [matrix_group(n) for n in names],
        "pc1_percent": [final_pc1(archive, n) for n in names],
    })
    df["group_mean"] = df.groupby("group")["pc1_percent"].transform("mean")
    return df


def group_means(split: pd.DataFrame) -> Dict[str, float]:
    return split.groupby("group")["pc1_percent"].mean().to_dict()


def eigenspectrum(archive: ISnapshotStore, top: int = 5,
                  matrices: Optional[Sequence[str]] = None) -> pd.DataFrame:
    """行列ごとの上位 top 成分の寄与率"""
    rows = []
    for name in (matrices or archive.matrix_names()):
        result = pca(trajectory_matrix(archive, name), k=top)
        ratios = [] if result is None else result.explained_ratios[:top]
        for i, ratio in enumerate(ratios, start=1):
            rows.append({"matrix": name, "component": i, "ratio": float(ratio)})
    return pd.DataFrame(rows, columns=["matrix", "component", "ratio"])


def execution_basis(archive: ISnapshotStore, name: str, k: int = 5,
                    through_step: Optional[int] = None) -> np.ndarray:
    """
    実行多様体の基底 V_K（全軌跡の上位 K 主成分、行列要素座標）

    Raises:
        AnalysisPreconditionError: 軌跡が縮退している
    """
    result = pca(trajectory_matrix(archive, name, through_step), k=k)
    if result is None:
        raise AnalysisPreconditionError(f"{name}: 軌跡が縮退しており基底を作れません")
    return result.basis


def execution_bases(archive: ISnapshotStore, matrices: Sequence[str], k: int = 5
                    ) -> Dict[str, np.ndarray]:
    return {name: execution_basis(archive, name, k) for name in matrices}


def analyze_pc1(archive: ISnapshotStore, matrices: Sequence[str], grok_step: Optional[int],
                k: int = 5) -> Mapping[str, Dict[str, object]]:
    """行列ごとに拡張窓 PC1 表と転換点をまとめて計算"""
    out = {}
    steps = archive.steps()
    for name in matrices:
        results = expanding_pc1(archive, name, k=k)
        frame = pc1_frame(results, steps[2:])
        turnover = detect_turnover(frame["step"].tolist(), frame["pc1_percent"].tolist(), grok_step)
        out[name] = {"frame": frame, "turnover": turnover}
        logger.debug(f"{name}: peak={turnover.peak_step} turnover={turnover.turnover_step}")
    return out
