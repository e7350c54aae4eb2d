from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Tuple

import numpy as np


class Phase(Enum):
    """学習フェーズ"""
    EARLY = "early"
    MEMORIZATION = "memorization"
    PRE_GROK = "pre_grok"
    POST_GROK = "post_grok"

    @property
    def precedence(self) -> int:
        """重なりを解消するときの優先度（後のフェーズほど高い）"""
        order = [self.EARLY, self.MEMORIZATION, self.PRE_GROK, self.POST_GROK]
        return order.index(self)


class BasisKind(Enum):
    """可積分性解析に使う基底の種類"""
    WEIGHT_SVD = "weight_svd"
    DELTA_W_SVD = "delta_w_svd"
    GRAD_SVD = "grad_svd"


@dataclass
class CommutatorSample:
    """1組のバッチ (A, B) に対する交換子測定"""
    defect: Optional[float]
    delta: Optional[np.ndarray]
    step_norm_a: float  # ‖η g_A‖
    step_norm_b: float  # ‖η g_B‖
    eta: float
    degenerate: bool = False

    @property
    def delta_norm(self) -> Optional[float]:
        return None if self.delta is None else float(np.linalg.norm(self.delta))


@dataclass
class DefectMeasurement:
    """あるステップでのプローブ結果（K_meas 組の集約）"""
    step: int
    defects: List[float] = field(default_factory=list)
    median: Optional[float] = None
    q25: Optional[float] = None
    q75: Optional[float] = None
    delta_norms: List[float] = field(default_factory=list)
    step_norms_a: List[float] = field(default_factory=list)
    step_norms_b: List[float] = field(default_factory=list)
    pair_ids: List[Tuple[List[int], List[int]]] = field(default_factory=list)
    etas: List[float] = field(default_factory=list)
    deltas: List[np.ndarray] = field(default_factory=list)
    n_skipped: int = 0

    @property
    def missing(self) -> bool:
        """全測定が縮退して値が無い"""
        return self.median is None


@dataclass
class ProjectionResult:
    """交換子ベクトルの基底への射影"""
    rho: Optional[float]
    parallel_norm: float
    residual_norm: float
    basis_dim: int
    ambient_dim: int
    exec_random_ratio: Optional[float] = None
    n_rand: int = 5

    @property
    def parallel_fraction(self) -> Optional[float]:
        total = np.hypot(self.parallel_norm, self.residual_norm)
        return None if total == 0 else float(self.parallel_norm / total)


@dataclass
class PcaResult:
    """軌跡行列の PCA"""
    explained_ratios: np.ndarray
    window_end_step: int
    basis: Optional[np.ndarray] = None

    @property
    def pc1_percent(self) -> float:
        return float(100.0 * self.explained_ratios[0])


@dataclass
class NullModelResult:
    """ランダムウォーク帰無モデルとの比較"""
    observed_pc1: float
    null_mean: float
    null_std: float
    n_null: int
    null_values: List[float] = field(default_factory=list)

    @property
    def z_score(self) -> Optional[float]:
        if self.null_std <= 0:
            return None
        return float((self.observed_pc1 - self.null_mean) / self.null_std)


@dataclass
class TurnoverResult:
    """PC1% 系列のピークと転換点"""
    peak_step: Optional[int]
    peak_value: Optional[float]
    turnover_step: Optional[int]
    lead_vs_grok: Optional[int] = None


@dataclass
class BasisResult:
    """行列座標上の正規直交基底"""
    kind: BasisKind
    basis: np.ndarray
    requested_rank: int
    truncated: bool = False

    @property
    def rank(self) -> int:
        return int(self.basis.shape[1])


@dataclass
class PhaseLabel:
    """フェーズとそのステップ範囲 [start, end)"""
    phase: Phase
    start: int
    end: int

    def contains(self, step: int) -> bool:
        return self.start <= step < self.end


@dataclass
class PhaseSample:
    """フェーズ別比率計算の1標本（行列ブロックの交換子と基底）"""
    phase: Phase
    kind: BasisKind
    delta: np.ndarray
    basis: np.ndarray
    matrix: str = ""
    step: int = 0


def phase_of(step: int, phases: List[PhaseLabel]) -> Optional[Phase]:
    """ステップが属するフェーズ（どれにも属さなければ None）"""
    for label in phases:
        if label.contains(step):
            return label.phase
    return None


def phase_table(phases: List[PhaseLabel]) -> Dict[str, Tuple[int, int]]:
    return {label.phase.value: (label.start, label.end) for label in phases}
