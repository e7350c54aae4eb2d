import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from src.interfaces.run_repository import IRunRepository
from src.models.run_record import RunRecord, ScalingFit
from src.services.detection_service import first_crossing, threshold_crossings
from src.utils.error_handler import AnalysisPreconditionError
from src.utils.helpers import moving_average, steps_to_window
from src.utils.logger import log_performance

logger = logging.getLogger(__name__)

# 平滑化窓（ステップ単位）
SMOOTHING_WINDOWS = (200, 500)
FIT_LINE_POINTS = 50


def metrics_frame(record: RunRecord) -> pd.DataFrame:
    return pd.DataFrame([m.to_dict() for m in record.metrics])


def smooth_columns(df: pd.DataFrame, column: str, windows: Sequence[int], eval_interval: int
                   ) -> pd.DataFrame:
    """column の後方移動平均を <column>_smooth_<窓ステップ> 列として追加"""
    out = df.copy()
    for window in windows:
        out[f"{column}_smooth_{window}"] = moving_average(
            out[column].to_numpy(), steps_to_window(window, eval_interval))
    return out


def overlay_frame(record: RunRecord, eval_interval: int = 100,
                  windows: Sequence[int] = SMOOTHING_WINDOWS) -> pd.DataFrame:
    """
    欠損中央値と精度の重ね描き用の系列

    Returns:
        pd.DataFrame: メトリクス列、テスト精度の平滑化列、grok_step / onset_step 列
    """
    df = smooth_columns(metrics_frame(record), "test_acc", windows, eval_interval)
    df["grok_step"] = record.grok_step
    df["onset_step"] = record.onset_step
    return df


def instability_summary(record: RunRecord, eval_interval: int = 100, threshold: float = 0.98,
                        windows: Sequence[int] = SMOOTHING_WINDOWS) -> Dict[str, object]:
    """
    閾値をまたいだ回数（生の系列と各平滑化窓）

    Returns:
        Dict[str, object]: run_id, lr, crossings_raw, crossings_<窓>, first_crossing, grok_step
    """
    steps = record.steps
    raw = record.test_acc
    row: Dict[str, object] = {"run_id": record.run_id, "lr": record.lr, "seed": record.seed,
                              "crossings_raw": threshold_crossings(raw, threshold)}
    for window in windows:
        smoothed = moving_average(raw, steps_to_window(window, eval_interval))
        row[f"crossings_{window}"] = threshold_crossings(smoothed, threshold)
    row["first_crossing"] = first_crossing(steps, raw, threshold)
    row["grok_step"] = record.grok_step
    return row


def scaling_frames(table: pd.DataFrame, fit: ScalingFit, n_points: int = FIT_LINE_POINTS):
    """
    スケーリング散布図とフィット直線

    Args:
        table: lr, seed, grok_step, lead を含むラン表
        fit: べき乗則フィット

    Returns:
        Tuple[pd.DataFrame, pd.DataFrame]: (散布点, 対数等間隔のフィット直線)
    """
    scatter = table.dropna(subset=["grok_step", "lead"])
    scatter = scatter[scatter["lead"] > 0][["lr", "seed", "grok_step", "lead"]].copy()
    if not fit.fitted or scatter.empty:
        return scatter, pd.DataFrame(columns=["grok_step", "lead_fit"])
    grid = np.logspace(np.log10(scatter["grok_step"].min()),
                       np.log10(scatter["grok_step"].max()), n_points)
    line = pd.DataFrame({"grok_step": grid, "lead_fit": [fit.predict(t) for t in grid]})
    return scatter, line


def dose_curve(df: pd.DataFrame) -> pd.DataFrame:
    """条件・強度ごとの平均グロッキングステップ（強度順）"""
    grouped = df.groupby(["condition", "strength"]).agg(
        mean_grok=("grok_step", "mean"),
        std_grok=("grok_step", "std"),
        n_grokked=("grok_step", "count"),
    ).reset_index()
    return grouped.sort_values(["condition", "strength"]).reset_index(drop=True)


class ExportService:
    """保存済みのランと解析表からプロット用の CSV を作成"""

    def __init__(self, repository: IRunRepository):
        """初期化

        Args:
            repository: ラン成果物の保存先
        """
        self.repository = repository

    def _records(self, run_ids: Optional[Sequence[str]]) -> List[RunRecord]:
        records = []
        for run_id in (run_ids or self.repository.list_runs()):
            record = self.repository.load_record(run_id)
            if record is None:
                logger.warning(f"ラン {run_id} の記録が無いため書き出しを省きます")
                continue
            records.append(record)
        return records

    def _eval_interval(self, run_id: str) -> int:
        flat = self.repository.load_config(run_id) or {}
        return int(flat.get("eval_interval") or 100)

    @log_performance
    def export(self, out_dir: str, run_ids: Optional[Sequence[str]] = None,
               run_table: Optional[pd.DataFrame] = None, fit: Optional[ScalingFit] = None,
               dose_table: Optional[pd.DataFrame] = None, threshold: float = 0.98
               ) -> List[Path]:
        """
        プロット用データを書き出す

        ランごとに overlay_<run>.csv と instability_<run>.csv、解析済みなら
        pc1_curves_<run>.csv と phase_ratios_<run>.csv を、全体では
        instability_summary.csv、スケーリング散布図とフィット直線、用量反応曲線を作る。

        Args:
            out_dir: 出力ディレクトリ
            run_ids: 対象ラン（None なら全て）
            run_table: スケーリング図に使うラン表
            fit: run_table に対するフィット
            dose_table: 用量反応表
            threshold: 不安定性の閾値

        Returns:
            List[Path]: 書き出したファイル

        Raises:
            AnalysisPreconditionError: 書き出す対象が1つも無い
        """
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        written: List[Path] = []

        def save(df: pd.DataFrame, name: str) -> None:
            path = out / f"{name}.csv"
            df.to_csv(path, index=False)
            written.append(path)

        summaries = []
        for record in self._records(run_ids):
            if not record.metrics:
                continue
            interval = self._eval_interval(record.run_id)
            overlay = overlay_frame(record, interval)
            save(overlay, f"overlay_{record.run_id}")
            save(overlay[["step", "test_acc"] + [f"test_acc_smooth_{w}" for w in SMOOTHING_WINDOWS]],
                 f"instability_{record.run_id}")
            summaries.append(instability_summary(record, interval, threshold))
            self._export_analysis(record.run_id, save)
        if summaries:
            save(pd.DataFrame(summaries), "instability_summary")

        if run_table is not None and fit is not None:
            scatter, line = scaling_frames(run_table, fit)
            save(scatter, "scaling_scatter")
            save(line, "scaling_fit_line")
        if dose_table is not None and not dose_table.empty:
            save(dose_curve(dose_table), "dose_response_curve")

        if not written:
            raise AnalysisPreconditionError("書き出せるランや表がありません")
        logger.info(f"{len(written)} ファイルを {out} に書き出しました")
        return written

    def _export_analysis(self, run_id: str, save) -> None:
        """解析済みの表（pc1_*, phase_ratios）をプロット用の形に整えて保存"""
        run_dir = self.repository.run_dir(run_id)
        curves = []
        for path in sorted(run_dir.glob("pc1_*.csv")):
            frame = pd.read_csv(path)
            frame.insert(0, "matrix", path.stem[len("pc1_"):])
            curves.append(frame)
        if curves:
            save(pd.concat(curves, ignore_index=True), f"pc1_curves_{run_id}")
        ratios = self.repository.load_table(run_id, "phase_ratios")
        if ratios is not None:
            save(ratios.pivot(index="phase", columns="basis", values="ratio").reset_index(),
                 f"phase_ratios_{run_id}")
