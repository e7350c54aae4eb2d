from abc import ABC, abstractmethod
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd

from src.interfaces.snapshot_store import ISnapshotStore
from src.models.run_record import MetricRecord, RunRecord


class IRunRepository(ABC):
    """学習ランの成果物を永続化する抽象インターフェース"""

    @abstractmethod
    def run_dir(self, run_id: str) -> Path:
        """ランの出力ディレクトリ（無ければ作成）"""
        pass

    @abstractmethod
    def save_config(self, run_id: str, flat_config: Dict[str, str]) -> None:
        """ランの設定を保存

        Args:
            run_id: ラン識別子
            flat_config: フラットな設定辞書
        """
        pass

    @abstractmethod
    def load_config(self, run_id: str) -> Optional[Dict[str, str]]:
        """ランの設定を読み込み（存在しない場合None）"""
        pass

    @abstractmethod
    def append_metric(self, run_id: str, record: MetricRecord) -> None:
        """メトリクスストリームに1行追記"""
        pass

    @abstractmethod
    def load_metrics(self, run_id: str) -> List[MetricRecord]:
        """メトリクスストリームを読み込み"""
        pass

    @abstractmethod
    def truncate_metrics(self, run_id: str, through_step: int) -> None:
        """指定ステップより後の記録を削除（再開用）"""
        pass

    @abstractmethod
    def save_record(self, run_id: str, record: RunRecord) -> None:
        """ランの要約を保存"""
        pass

    @abstractmethod
    def load_record(self, run_id: str) -> Optional[RunRecord]:
        """ランの要約をメトリクス付きで読み込み（存在しない場合None）"""
        pass

    @abstractmethod
    def save_checkpoint(self, run_id: str, arrays: Dict[str, np.ndarray],
                        meta: Dict[str, Any]) -> None:
        """チェックポイントを保存"""
        pass

    @abstractmethod
    def load_checkpoint(self, run_id: str) -> Optional[Dict[str, Any]]:
        """チェックポイントを読み込み（{"arrays": ..., "meta": ...}、無ければNone）"""
        pass

    @abstractmethod
    def save_delta(self, run_id: str, step: int, deltas: np.ndarray) -> None:
        """保持する交換子ベクトルを保存"""
        pass

    @abstractmethod
    def load_deltas(self, run_id: str) -> Dict[int, np.ndarray]:
        """保持された交換子ベクトルをステップ→配列で読み込み"""
        pass

    @abstractmethod
    def save_table(self, run_id: str, name: str, df: pd.DataFrame) -> Path:
        """解析結果の表を CSV で保存"""
        pass

    @abstractmethod
    def list_runs(self) -> List[str]:
        """保存済みラン識別子の一覧"""
        pass

    @abstractmethod
    def clear_run(self, run_id: str) -> None:
        """ランの成果物を全て削除（最初からやり直す場合）"""
        pass

    @abstractmethod
    def truncate_deltas(self, run_id: str, through_step: int) -> None:
        """指定ステップより後の交換子ベクトルを削除（再開用）"""
        pass

    @abstractmethod
    def load_table(self, run_id: str, name: str) -> Optional[pd.DataFrame]:
        """保存済みの解析表を読み込み（無ければNone）"""
        pass

    @abstractmethod
    def archive(self, run_id: str, name: str = "snapshots",
                interval: Optional[int] = None) -> ISnapshotStore:
        """ランのスナップショットアーカイブ

        Args:
            run_id: ラン識別子
            name: アーカイブ名（"snapshots" または "grad_accum"）
            interval: 記録間隔（新規作成時のみ使用）
        """
        pass
