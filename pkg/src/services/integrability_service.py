import logging
from collections import defaultdict
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from src.models.measurements import BasisKind, BasisResult, Phase, PhaseLabel, PhaseSample
from src.models.run_record import RunRecord
from src.services.probe_service import exec_random_ratio
from src.utils.error_handler import AnalysisPreconditionError

logger = logging.getLogger(__name__)

MEMORIZED_TRAIN = 0.99
UNGENERALIZED_TEST = 0.5
EARLY_TRAIN = 0.5


def _svd_directions(matrix: np.ndarray, k: int) -> np.ndarray:
    """上位 k 個の vec(u_i v_iᵀ)（フロベニウス内積で正規直交）を列に並べる"""
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim == 1:
        m = m[:, None]
    u, s, vt = np.linalg.svd(m, full_matrices=False)
    if s.size == 0 or s[0] == 0.0:
        return np.zeros((m.size, 0))
    tol = max(m.shape) * np.finfo(np.float64).eps * s[0]
    rank = int(min(k, np.sum(s > tol)))
    cols = [np.outer(u[:, i], vt[i]).reshape(-1) for i in range(rank)]
    if not cols:
        return np.zeros((m.size, 0))
    return np.stack(cols, axis=1)


def build_basis(kind: BasisKind, k: int, weight: Optional[np.ndarray] = None,
                initial: Optional[np.ndarray] = None,
                grad_accum: Optional[np.ndarray] = None) -> BasisResult:
    """
    行列座標上の基底を作成

    Args:
        kind: weight_svd は W(t)、delta_w_svd は W(t) − W(0)、grad_svd は累積勾配
        k: 要求ランク
        weight: W(t)
        initial: W(0)
        grad_accum: 累積勾配行列

    Returns:
        BasisResult: 行列のランクが k 未満なら列数を減らし truncated を立てる

    Raises:
        AnalysisPreconditionError: 必要な行列が無い
    """
    if k < 1:
        raise ValueError(f"k は1以上である必要があります: {k}")
    if kind == BasisKind.WEIGHT_SVD:
        source = weight
    elif kind == BasisKind.DELTA_W_SVD:
        source = None if weight is None or initial is None else \
            np.asarray(weight, dtype=np.float64) - np.asarray(initial, dtype=np.float64)
    else:
        source = grad_accum
    if source is None:
        raise AnalysisPreconditionError(f"{kind.value} の元になる行列がありません")
    basis = _svd_directions(source, k)
    return BasisResult(kind=kind, basis=basis, requested_rank=k, truncated=basis.shape[1] < k)


def assign_phases(record: RunRecord) -> List[PhaseLabel]:
    """
    評価ステップごとにフェーズを決めて連続区間にまとめる

    優先度は post_grok > pre_grok > memorization > early。どれにも該当しない
    ステップは直前のフェーズを延長する。各区間は [開始, 次の区間の開始)、
    最後の区間は最終ステップ + 1 で閉じる。

    Args:
        record: 検出済みのランの記録

    Returns:
        List[PhaseLabel]: 時間順の区間（存在しないフェーズは含まない）
    """
    metrics = sorted(record.metrics, key=lambda m: m.step)
    if not metrics:
        return []
    first_fit = next((m.step for m in metrics if m.train_acc > EARLY_TRAIN), None)
    grok, onset = record.grok_step, record.onset_step

    labels: List[Phase] = []
    for m in metrics:
        if grok is not None and m.step >= grok:
            phase: Optional[Phase] = Phase.POST_GROK
        elif grok is not None and onset is not None and onset <= m.step < grok:
            phase = Phase.PRE_GROK
        elif m.train_acc >= MEMORIZED_TRAIN and m.test_acc < UNGENERALIZED_TEST:
            phase = Phase.MEMORIZATION
        elif first_fit is None or m.step < first_fit:
            phase = Phase.EARLY
        else:
            phase = labels[-1] if labels else Phase.EARLY
        labels.append(phase)

    ranges: List[PhaseLabel] = []
    for m, phase in zip(metrics, labels):
        if ranges and ranges[-1].phase == phase:
            continue
        if ranges:
            ranges[-1].end = m.step
        ranges.append(PhaseLabel(phase=phase, start=m.step, end=m.step))
    ranges[-1].end = metrics[-1].step + 1
    return ranges


def phase_ratios(samples: Sequence[PhaseSample], n_rand: int = 5, seed: int = 0
                 ) -> pd.DataFrame:
    """
    (フェーズ, 基底種類) ごとの exec/random 比の平均

    Args:
        samples: 交換子ブロックと基底の標本
        n_rand: ランダム基底の数
        seed: 乱数シード

    Returns:
        pd.DataFrame: phase, basis, ratio, n_samples（全フェーズ×全基底、空セルは ratio 欠損）
    """
    rng = np.random.default_rng(seed)
    cells: Dict = defaultdict(list)
    for sample in samples:
        ratio = exec_random_ratio(sample.delta, sample.basis, n_rand, rng)
        if ratio is not None:
            cells[(sample.phase, sample.kind)].append(ratio)

    rows = []
    for phase in Phase:
        for kind in BasisKind:
            values = cells.get((phase, kind), [])
            rows.append({
                "phase": phase.value,
                "basis": kind.value,
                "ratio": float(np.mean(values)) if values else None,
                "n_samples": len(values),
            })
    return pd.DataFrame(rows, columns=["phase", "basis", "ratio", "n_samples"])


def ratio_table(df: pd.DataFrame) -> pd.DataFrame:
    """phase × basis の横持ち表"""
    return df.pivot(index="phase", columns="basis", values="ratio")
