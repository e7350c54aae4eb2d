import concurrent.futures
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import pandas as pd

from src.models.experiment_config import Condition, ExperimentConfig
from src.models.run_record import RunStatus, ScalingFit
from src.repositories.local_run_repository import LocalRunRepository
from src.services.detection_service import (
    fit_power_law, lr_mean_fit, lr_mean_table, run_points, summarize_table,
)
from src.services.intervention_service import summarize_interventions
from src.services.training_service import TrainingService
from src.utils.error_handler import ConfigValidationError, handle_run_error
from src.utils.logger import log_performance

logger = logging.getLogger(__name__)

RUN_COLUMNS = ["run_id", "lr", "seed", "grok_step", "onset_step", "lead", "lead_fraction",
               "status", "flags"]
DOSE_COLUMNS = ["condition", "strength", "seed", "grok_step", "onset_step", "flags"]

# 介入条件の既定の用量グリッド（ベースラインは別途先に実行する）
INTERVENTION_CONDITIONS = (Condition.KICK_1A, Condition.NOISE_1A, Condition.PROJECT_1B,
                           Condition.PENALTY_1B)


@dataclass
class SweepResult:
    """スイープの結果表と2種類のフィット"""
    table: pd.DataFrame
    fit: ScalingFit
    lr_fit: ScalingFit
    lr_means: pd.DataFrame


@handle_run_error
def run_cell(flat_config: Dict[str, str], seed: int) -> Dict[str, object]:
    """
    1セルを学習してラン表の1行を返す（プロセスプールから呼ぶためトップレベル関数）

    失敗時は handle_run_error により None を返す。
    """
    config = ExperimentConfig.from_flat(flat_config)
    record = TrainingService(LocalRunRepository(config.output_dir)).train_run(config, seed)
    return record.summary_row()


def failed_row(config: ExperimentConfig, seed: int) -> Dict[str, object]:
    return {"run_id": config.run_id(seed), "lr": config.lr, "seed": seed, "grok_step": None,
            "onset_step": None, "lead": None, "lead_fraction": None,
            "status": RunStatus.FAILED.value, "flags": "run_failed"}


def run_cells(cells: Sequence[Tuple[ExperimentConfig, int]], workers: int = 1
              ) -> List[Dict[str, object]]:
    """
    独立したセルを逐次または別プロセスで実行

    Args:
        cells: (設定, シード) の列
        workers: 並列プロセス数（1なら逐次）

    Returns:
        List[Dict[str, object]]: セル順のラン表の行（失敗セルは status=failed）
    """
    rows: List[Optional[Dict[str, object]]] = [None] * len(cells)
    if workers <= 1 or len(cells) <= 1:
        for i, (config, seed) in enumerate(cells):
            rows[i] = run_cell(config.to_flat(), seed)
    else:
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as executor:
            futures = {executor.submit(run_cell, config.to_flat(), seed): i
                       for i, (config, seed) in enumerate(cells)}
            for done, future in enumerate(concurrent.futures.as_completed(futures), start=1):
                i = futures[future]
                try:
                    rows[i] = future.result()
                except Exception as e:
                    logger.error(f"セル {cells[i][0].run_id(cells[i][1])} のプロセスが異常終了しました: {e}")
                logger.info(f"{done}/{len(cells)} セル完了")
    return [row if row is not None else failed_row(config, seed)
            for row, (config, seed) in zip(rows, cells)]


def fit_table(df: pd.DataFrame, method: str = "ols") -> SweepResult:
    """
    ラン表から先行時間を再計算し、ラン単位と学習率平均の両方でべき乗則をフィット

    Args:
        df: lr, seed, grok_step, onset_step を含む表（学習済みスイープまたはフィクスチャ）
        method: "ols" または "nls"

    Returns:
        SweepResult: 要約表・ラン単位フィット・学習率平均フィット・学習率平均表
    """
    table = summarize_table(df)
    fit = fit_power_law(run_points(table), method=method, domain="per_run")
    return SweepResult(table=table, fit=fit, lr_fit=lr_mean_fit(table, method=method),
                       lr_means=lr_mean_table(table))


def write_sweep(result: SweepResult, directory: Path, name: str) -> Path:
    """ラン表・学習率平均表・フィット結果を書き出す"""
    directory.mkdir(parents=True, exist_ok=True)
    result.table.to_csv(directory / f"{name}_runs.csv", index=False)
    result.lr_means.to_csv(directory / f"{name}_lr_means.csv", index=False)
    with open(directory / f"{name}_fit.json", "w", encoding="utf-8") as f:
        json.dump({"per_run": result.fit.to_dict(), "lr_means": result.lr_fit.to_dict()},
                  f, ensure_ascii=False, indent=2)
    return directory / f"{name}_runs.csv"


class SweepService:
    """学習率スイープと介入の用量反応スイープ"""

    def __init__(self, repository: LocalRunRepository):
        """初期化

        Args:
            repository: ラン成果物の保存先（スイープ表はそのルートに置く）
        """
        self.repository = repository

    @log_performance
    def sweep(self, config: ExperimentConfig, lr_grid: Optional[Sequence[float]] = None,
              seeds: Optional[Sequence[int]] = None, workers: Optional[int] = None,
              method: str = "ols") -> SweepResult:
        """
        (学習率, シード) ごとに1ランを学習し、ラン表とスケーリングフィットを返す

        Args:
            config: 設定テンプレート
            lr_grid: 学習率グリッド（None なら config.lr_grid）
            seeds: シード（None なら config.seeds）
            workers: 並列数（None なら config.workers）
            method: フィット手法

        Returns:
            SweepResult: 有効点が3未満ならフィットは insufficient_points
        """
        lr_grid = list(lr_grid if lr_grid is not None else config.lr_grid)
        seeds = list(seeds if seeds is not None else config.seeds)
        if not lr_grid or not seeds:
            raise ConfigValidationError("学習率グリッドとシードは空にできません")
        config = config.replace(output_dir=str(self.repository.root))
        cells = []
        for lr in lr_grid:
            cell_config = config.replace(lr=lr)
            cell_config.validate()
            cells += [(cell_config, seed) for seed in seeds]
        logger.info(f"{config.task.value} スイープ: {len(lr_grid)} 学習率 × {len(seeds)} シード")

        rows = run_cells(cells, workers if workers is not None else config.workers)
        result = fit_table(pd.DataFrame(rows, columns=RUN_COLUMNS), method=method)
        path = write_sweep(result, self.repository.root, f"sweep_{config.task.value}")
        logger.info(f"スイープ結果を保存しました: {path} (α={result.fit.alpha}, "
                    f"R²={result.fit.r_squared}, flags={result.fit.flags})")
        return result

    @staticmethod
    def default_grid(conditions: Optional[Sequence[Condition]] = None
                     ) -> List[Tuple[Condition, float]]:
        """条件ごとの既定強度の (条件, 強度) 列"""
        return [(c, s) for c in (conditions or INTERVENTION_CONDITIONS) for s in c.dose_grid]

    @log_performance
    def dose_response(self, config: ExperimentConfig,
                      grid: Optional[Sequence[Tuple[Condition, float]]] = None,
                      seeds: Optional[Sequence[int]] = None,
                      workers: Optional[int] = None) -> pd.DataFrame:
        """
        介入条件 × 強度 × シードの用量反応表

        各シードのベースラインを先に学習し、そのランを基底（1B）とキック発火ステップ
        （1A-kick、trigger_step 未指定時はオンセット）の参照元にする。全セルは
        ベースラインと同じ初期化から学習する。

        Args:
            config: ベースライン設定
            grid: (条件, 強度) の列（None なら既定グリッド）
            seeds: シード
            workers: 並列数

        Returns:
            pd.DataFrame: condition, strength, seed, grok_step, onset_step, flags
        """
        grid = list(grid) if grid is not None else self.default_grid()
        seeds = list(seeds if seeds is not None else config.seeds)
        if not grid:
            raise ConfigValidationError("用量グリッドが空です")
        workers = workers if workers is not None else config.workers
        base = config.replace(condition=Condition.BASELINE, strength=None,
                              output_dir=str(self.repository.root))

        baseline_rows = run_cells([(base, seed) for seed in seeds], workers)
        cells = []
        labels = []
        for condition, strength in grid:
            for seed in seeds:
                cell = base.replace(condition=condition, strength=strength,
                                    trigger_step=config.trigger_step,
                                    basis_run=config.basis_run or base.run_id(seed))
                cell.validate()
                cells.append((cell, seed))
                labels.append((condition.value, strength, seed))
        cell_rows = run_cells(cells, workers)

        rows = []
        for seed, row in zip(seeds, baseline_rows):
            rows.append(self._dose_row(Condition.BASELINE.value, 0.0, seed, row))
        for (condition, strength, seed), row in zip(labels, cell_rows):
            rows.append(self._dose_row(condition, strength, seed, row))
        df = pd.DataFrame(rows, columns=DOSE_COLUMNS)
        path = self.repository.root / f"dose_response_{config.task.value}.csv"
        df.to_csv(path, index=False)
        summary = summarize_interventions(df)
        summary.to_csv(self.repository.root / f"dose_summary_{config.task.value}.csv", index=False)
        logger.info(f"用量反応表を保存しました: {path}")
        return df

    @staticmethod
    def _dose_row(condition: str, strength: float, seed: int, row: Dict[str, object]
                  ) -> Dict[str, object]:
        return {"condition": condition, "strength": strength, "seed": seed,
                "grok_step": row.get("grok_step"), "onset_step": row.get("onset_step"),
                "flags": row.get("flags", "")}
