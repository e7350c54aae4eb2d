from abc import ABC, abstractmethod
from typing import Dict, Tuple, Union

import numpy as np

from src.models.experiment_config import ModelConfig
from src.models.task_data import DyckDataset, ScanDataset, TaskBatch
from src.tensorcore import NamedParams, Tensor

TaskDataset = Union[DyckDataset, ScanDataset]


class ITaskModel(ABC):
    """タスクモデルの抽象インターフェース"""

    config: ModelConfig

    @abstractmethod
    def init_params(self, seed: int) -> NamedParams:
        """シードから決定的にパラメータを初期化

        Args:
            seed: 初期化シード

        Returns:
            NamedParams: 名前付きパラメータ
        """
        pass

    @abstractmethod
    def forward_loss(self, leaves: Dict[str, Tensor], batch: TaskBatch) -> Tuple[Tensor, Tensor]:
        """順伝播して損失とロジットを返す

        Args:
            leaves: パラメータ名→葉テンソル
            batch: ミニバッチ

        Returns:
            Tuple[Tensor, Tensor]: (スカラー損失, 位置ごとのロジット)
        """
        pass

    @abstractmethod
    def loss_and_grads(self, params: NamedParams, batch: TaskBatch
                       ) -> Tuple[float, Dict[str, np.ndarray]]:
        """損失と全パラメータの勾配

        Args:
            params: パラメータ
            batch: ミニバッチ

        Returns:
            Tuple[float, Dict[str, np.ndarray]]: (損失, 勾配)
        """
        pass

    @abstractmethod
    def evaluate_accuracy(self, params: NamedParams, dataset: TaskDataset) -> float:
        """データセット上の精度（Dyck はトークン単位、SCAN は系列単位の完全一致）

        Args:
            params: パラメータ
            dataset: 空でないデータセット

        Returns:
            float: 精度
        """
        pass
