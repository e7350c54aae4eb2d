from typing import Dict, Tuple

import numpy as np

from src.interfaces.task_model import ITaskModel
from src.models.experiment_config import ModelConfig
from src.models.task_data import TaskBatch
from src.tensorcore import ComputationTape, NamedParams, backward, recording
from src.utils.error_handler import SequenceTooLongError


class TransformerBase(ITaskModel):
    """2つの構成に共通する勾配計算と検証"""

    # 評価時に一度に処理する例数
    eval_chunk = 512

    def __init__(self, config: ModelConfig):
        config.validate()
        self.config = config

    def loss_and_grads(self, params: NamedParams, batch: TaskBatch
                       ) -> Tuple[float, Dict[str, np.ndarray]]:
        """
        1バッチの損失と全パラメータの勾配を計算

        Args:
            params: パラメータ
            batch: ミニバッチ

        Returns:
            Tuple[float, Dict[str, np.ndarray]]: (損失, パラメータ名→勾配)
        """
        tape = ComputationTape()
        leaves = params.to_leaves()
        with recording(tape):
            loss, _ = self.forward_loss(leaves, batch)
        backward(tape, loss)
        grads = {
            name: leaf.grad if leaf.grad is not None else np.zeros_like(leaf.values)
            for name, leaf in leaves.items()
        }
        return loss.item(), grads

    def loss(self, params: NamedParams, batch: TaskBatch) -> float:
        """勾配を追跡しない損失評価"""
        loss, _ = self.forward_loss(params.to_constants(), batch)
        return loss.item()

    def _check_length(self, length: int, limit: int, what: str) -> None:
        if length > limit:
            raise SequenceTooLongError(f"{what} の長さ {length} が上限 {limit} を超えています")
