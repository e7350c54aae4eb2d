from abc import ABC, abstractmethod
from typing import Dict, List, Mapping, Optional, Tuple

import numpy as np


class ISnapshotStore(ABC):
    """重みスナップショット保存の抽象インターフェース"""

    @abstractmethod
    def record(self, step: int, arrays: Mapping[str, np.ndarray]) -> None:
        """スナップショットを追記

        Args:
            step: 学習ステップ（直前の記録より大きいこと）
            arrays: 行列名→配列（マニフェストの全行列）
        """
        pass

    @abstractmethod
    def read(self, step: int) -> Dict[str, np.ndarray]:
        """指定ステップの全行列を読み込み

        Args:
            step: 学習ステップ

        Returns:
            Dict[str, np.ndarray]: 行列名→配列
        """
        pass

    @abstractmethod
    def read_matrix(self, name: str, through_step: Optional[int] = None
                    ) -> Tuple[List[int], np.ndarray]:
        """1行列の全スナップショットを時系列で読み込み

        Args:
            name: 行列名
            through_step: このステップ以下のみ（None なら全て）

        Returns:
            Tuple[List[int], np.ndarray]: (ステップ列, (スナップショット数, 要素数))
        """
        pass

    @abstractmethod
    def steps(self) -> List[int]:
        """記録済みステップ（昇順）"""
        pass

    @abstractmethod
    def matrix_names(self) -> List[str]:
        """マニフェストの行列名（順序付き）"""
        pass

    @abstractmethod
    def truncate_after(self, step: int) -> None:
        """指定ステップより後の記録を削除（再開用）"""
        pass
