import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.interfaces.task_model import ITaskModel, TaskDataset
from src.models.measurements import CommutatorSample, DefectMeasurement, ProjectionResult
from src.models.task_data import TaskBatch
from src.tensorcore import NamedParams, ParamView
from src.utils.error_handler import ConfigValidationError

logger = logging.getLogger(__name__)

# θ（平坦ベクトル）とバッチから平坦な勾配を返す関数
GradFn = Callable[[np.ndarray, TaskBatch], np.ndarray]

# 適応スケーリング: ‖η·g‖ がこれ未満なら η を10倍ずつ
ADAPTIVE_TRIGGER = 1e-6
ADAPTIVE_TARGET = 1e-5
MAX_RESCALES = 12


@dataclass
class DefectProbeConfig:
    """交換子プローブ設定"""
    eta: float = 1e-3
    k_meas: int = 5
    batch_size: int = 16
    interval: int = 100

    def validate(self) -> None:
        if self.eta <= 0:
            raise ConfigValidationError(f"eta は正である必要があります: {self.eta}")
        if self.k_meas < 1:
            raise ConfigValidationError(f"k_meas は1以上である必要があります: {self.k_meas}")
        if self.batch_size < 1:
            raise ConfigValidationError(f"batch_size は1以上である必要があります: {self.batch_size}")


def measure_defect(theta: np.ndarray, grad_fn: GradFn, batch_a: TaskBatch, batch_b: TaskBatch,
                   eta: float) -> CommutatorSample:
    """
    交換子欠損 D = ‖θ_AB − θ_BA‖ / (‖η g_A‖·‖η g_B‖)

    θ_AB は A, B の順、θ_BA は逆順の素の SGD 2段更新。ちょうど4回の順逆伝播で
    δ = η·((g_B(θ) + g_A(θ−ηg_B)) − (g_A(θ) + g_B(θ−ηg_A))) を求める。
    A と B を入れ替えると δ は厳密に符号反転する。

    Args:
        theta: 凍結されたパラメータ（平坦、変更しない）
        grad_fn: 勾配関数
        batch_a: バッチ A
        batch_b: バッチ B
        eta: プローブ step size

    Returns:
        CommutatorSample: 測定値（勾配が消えていれば degenerate）
    """
    theta = np.array(theta, copy=True)
    g_a0 = np.asarray(grad_fn(theta, batch_a), dtype=np.float64)
    g_b0 = np.asarray(grad_fn(theta, batch_b), dtype=np.float64)
    norm_ga = float(np.linalg.norm(g_a0))
    norm_gb = float(np.linalg.norm(g_b0))

    if norm_ga == 0.0 or norm_gb == 0.0:
        return CommutatorSample(defect=None, delta=None, step_norm_a=0.0, step_norm_b=0.0,
                                eta=eta, degenerate=True)

    rescales = 0
    if min(eta * norm_ga, eta * norm_gb) < ADAPTIVE_TRIGGER:
        while min(eta * norm_ga, eta * norm_gb) < ADAPTIVE_TARGET and rescales < MAX_RESCALES:
            eta *= 10.0
            rescales += 1
        logger.debug(f"勾配ノルムが小さいため η_comm を {eta:g} に拡大しました")
        if min(eta * norm_ga, eta * norm_gb) < ADAPTIVE_TARGET:
            logger.debug(f"η_comm を {eta:g} まで拡大しても更新幅が足りないため縮退として扱います")
            return CommutatorSample(defect=None, delta=None, step_norm_a=eta * norm_ga,
                                    step_norm_b=eta * norm_gb, eta=eta, degenerate=True)

    theta_after_b = (theta - eta * g_b0).astype(theta.dtype)
    theta_after_a = (theta - eta * g_a0).astype(theta.dtype)
    g_a1 = np.asarray(grad_fn(theta_after_b, batch_a), dtype=np.float64)
    g_b1 = np.asarray(grad_fn(theta_after_a, batch_b), dtype=np.float64)

    delta = eta * ((g_b0 + g_a1) - (g_a0 + g_b1))
    step_a = eta * norm_ga
    step_b = eta * norm_gb
    defect = float(np.linalg.norm(delta) / (step_a * step_b))
    return CommutatorSample(defect=defect, delta=delta, step_norm_a=step_a,
                            step_norm_b=step_b, eta=eta)


def sample_pair_indices(n_examples: int, batch_size: int, rng: np.random.Generator
                        ) -> Tuple[np.ndarray, np.ndarray]:
    """
    非復元抽出でバッチ A, B の例番号を選ぶ（A と B は共通要素なし）

    例数が 2·batch_size に満たなければ半分ずつに分ける。
    """
    size = min(batch_size, n_examples // 2)
    if size < 1:
        raise ConfigValidationError(f"プローブには2例以上が必要です: {n_examples}")
    chosen = rng.choice(n_examples, size=2 * size, replace=False)
    return np.sort(chosen[:size]), np.sort(chosen[size:])


def summarize_samples(step: int, samples: Sequence[CommutatorSample],
                      pair_ids: Sequence[Tuple[List[int], List[int]]],
                      retain: int = 0) -> DefectMeasurement:
    """測定値の中央値と四分位を集約（縮退した組は除外して数える）"""
    valid = [s for s in samples if not s.degenerate]
    measurement = DefectMeasurement(step=step, pair_ids=list(pair_ids),
                                    n_skipped=len(samples) - len(valid))
    if not valid:
        return measurement
    values = np.array([s.defect for s in valid], dtype=np.float64)
    measurement.defects = values.tolist()
    measurement.median = float(np.median(values))
    measurement.q25, measurement.q75 = (float(q) for q in np.percentile(values, [25, 75]))
    measurement.delta_norms = [s.delta_norm for s in valid]
    measurement.step_norms_a = [s.step_norm_a for s in valid]
    measurement.step_norms_b = [s.step_norm_b for s in valid]
    measurement.etas = [s.eta for s in valid]
    measurement.deltas = [s.delta for s in valid[:retain]]
    return measurement


def probe_at_step(theta: np.ndarray, grad_fn: GradFn, train: TaskDataset,
                  config: DefectProbeConfig, rng: np.random.Generator, step: int = 0,
                  retain: int = 0) -> DefectMeasurement:
    """
    K_meas 組の独立なバッチ対で交換子欠損を測定

    Args:
        theta: 凍結パラメータ（平坦）
        grad_fn: 勾配関数
        train: 学習集合
        config: プローブ設定
        rng: バッチ対を選ぶ乱数
        step: 記録するステップ
        retain: δ ベクトルを保持する組数

    Returns:
        DefectMeasurement: 集約結果（全組縮退なら missing）
    """
    config.validate()
    samples: List[CommutatorSample] = []
    pair_ids = []
    for _ in range(config.k_meas):
        idx_a, idx_b = sample_pair_indices(len(train), config.batch_size, rng)
        pair_ids.append((idx_a.tolist(), idx_b.tolist()))
        samples.append(measure_defect(theta, grad_fn, train.batch(idx_a), train.batch(idx_b),
                                      config.eta))
    measurement = summarize_samples(step, samples, pair_ids, retain=retain)
    if measurement.missing:
        logger.warning(f"step {step}: 全ての交換子測定が縮退しました")
    return measurement


def model_grad_fn(model: ITaskModel, view: ParamView) -> GradFn:
    """モデルの勾配を平坦ベクトル関数として包む"""
    def grad_fn(theta: np.ndarray, batch: TaskBatch) -> np.ndarray:
        _, grads = model.loss_and_grads(view.unflatten(theta), batch)
        return view.flatten(grads, dtype=np.float32)
    return grad_fn


# --- 射影と比率 -----------------------------------------------------------------

def project_commutator(delta: np.ndarray, basis: np.ndarray) -> ProjectionResult:
    """
    δ を基底 B に射影し、残差割合 ρ = ‖δ_⊥‖ / ‖δ‖ を求める

    Args:
        delta: (P,) 交換子ベクトル
        basis: (P, K) 正規直交基底

    Returns:
        ProjectionResult: ‖δ‖ = 0 なら rho は None
    """
    delta = np.asarray(delta, dtype=np.float64)
    basis = np.asarray(basis, dtype=np.float64)
    coeffs = basis.T @ delta
    parallel = basis @ coeffs
    residual = delta - parallel
    total = float(np.linalg.norm(delta))
    par_norm = float(np.linalg.norm(coeffs))
    res_norm = float(np.linalg.norm(residual))
    rho = None if total == 0.0 else float(min(max(res_norm / total, 0.0), 1.0))
    return ProjectionResult(rho=rho, parallel_norm=par_norm, residual_norm=res_norm,
                            basis_dim=basis.shape[1], ambient_dim=basis.shape[0])


def parallel_fraction(delta: np.ndarray, basis: np.ndarray) -> Optional[float]:
    """‖B Bᵀ δ‖ / ‖δ‖"""
    total = float(np.linalg.norm(delta))
    if total == 0.0 or basis.shape[1] == 0:
        return None
    return float(np.linalg.norm(basis.T @ np.asarray(delta, dtype=np.float64)) / total)


def random_orthonormal_basis(ambient_dim: int, k: int, rng: np.random.Generator) -> np.ndarray:
    """ガウス行列の QR 分解による一様ランダムな K 次元正規直交基底"""
    q, r = np.linalg.qr(rng.standard_normal((ambient_dim, k)))
    return q * np.sign(np.diag(r))


def exec_random_ratio(delta: np.ndarray, exec_basis: np.ndarray, n_rand: int,
                      rng: np.random.Generator) -> Optional[float]:
    """
    学習基底への射影割合 / 同次元ランダム基底への射影割合の平均

    Args:
        delta: 交換子ベクトル
        exec_basis: (P, K) 学習基底
        n_rand: ランダム基底の数
        rng: 乱数

    Returns:
        Optional[float]: 比率（‖δ‖ = 0 または基底が空なら None）
    """
    exec_fraction = parallel_fraction(delta, exec_basis)
    if exec_fraction is None:
        return None
    ambient, k = exec_basis.shape
    random_fractions = [
        parallel_fraction(delta, random_orthonormal_basis(ambient, k, rng)) for _ in range(n_rand)
    ]
    mean_random = float(np.mean(random_fractions))
    return None if mean_random == 0.0 else exec_fraction / mean_random


def invariance_series(deltas: Dict[int, np.ndarray], view: ParamView,
                      bases: Dict[str, np.ndarray], n_rand: int = 5,
                      seed: int = 0) -> List[Dict[str, object]]:
    """
    保持された δ の行列ブロックごとの ρ と exec/random 比

    Args:
        deltas: ステップ→(保持数, P_view) の δ
        view: δ の座標に対応するビュー
        bases: 行列名→(要素数, K) の実行多様体基底
        n_rand: ランダム基底の数
        seed: 乱数シード

    Returns:
        List[Dict[str, object]]: step, matrix, rho, exec_random_ratio の行
    """
    rng = np.random.default_rng(seed)
    rows = []
    for step in sorted(deltas):
        stack = np.atleast_2d(deltas[step])
        for name, basis in bases.items():
            rhos, ratios = [], []
            for delta in stack:
                block = view.block(delta, name)
                result = project_commutator(block, basis)
                if result.rho is not None:
                    rhos.append(result.rho)
                ratio = exec_random_ratio(block, basis, n_rand, rng)
                if ratio is not None:
                    ratios.append(ratio)
            rows.append({
                "step": step,
                "matrix": name,
                "rho": float(np.mean(rhos)) if rhos else None,
                "exec_random_ratio": float(np.mean(ratios)) if ratios else None,
            })
    return rows


class ProbeService:
    """学習中のモデルに対して交換子プローブを実行するサービス"""

    def __init__(self, model: ITaskModel, view: ParamView, config: DefectProbeConfig):
        """初期化

        Args:
            model: タスクモデル
            view: パラメータビュー
            config: プローブ設定
        """
        config.validate()
        self._model = model
        self._view = view
        self._config = config
        self._grad_fn = model_grad_fn(model, view)

    @property
    def config(self) -> DefectProbeConfig:
        return self._config

    def probe(self, params: NamedParams, train: TaskDataset, rng: np.random.Generator,
              step: int, retain: int = 0) -> DefectMeasurement:
        """
        パラメータのコピーに対してプローブを実行（params は変更しない）
        """
        theta = self._view.flatten(params, dtype=np.float32)
        return probe_at_step(theta, self._grad_fn, train, self._config, rng,
                             step=step, retain=retain)
