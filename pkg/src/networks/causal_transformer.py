from typing import Dict, Tuple

import numpy as np

from src.models.task_data import DyckDataset, TaskBatch
from src.networks import layers
from src.networks.base import TransformerBase
from src.tensorcore import NamedParams, Tensor, ops
from src.utils.helpers import rng_stream


def token_accuracy(predictions: np.ndarray, batch: TaskBatch) -> Tuple[int, int]:
    """
    パディング以外の位置でのトークン正解数

    Returns:
        Tuple[int, int]: (正解数, 有効位置数)
    """
    mask = batch.padding_mask
    correct = int(((predictions == batch.targets) & mask).sum())
    return correct, int(mask.sum())


class CausalTransformer(TransformerBase):
    """Dyck 用のデコーダのみ（因果マスク付き）トランスフォーマー"""

    def init_params(self, seed: int) -> NamedParams:
        cfg = self.config
        rng = rng_stream(seed, "init")
        params: Dict[str, np.ndarray] = {}
        params["tok_embed"] = layers.uniform_init(rng, (cfg.input_vocab, cfg.d_model), cfg.d_model)
        params["pos_embed"] = layers.uniform_init(rng, (cfg.max_input_len, cfg.d_model), cfg.d_model)
        for i in range(cfg.n_layers):
            layers.init_layer_norm(params, f"layer{i}.ln1", cfg.d_model)
            layers.init_attention(params, f"layer{i}.attn", cfg.d_model, rng)
            layers.init_layer_norm(params, f"layer{i}.ln2", cfg.d_model)
            layers.init_mlp(params, f"layer{i}.mlp", cfg.d_model, cfg.d_ff, rng)
        layers.init_layer_norm(params, "ln_f", cfg.d_model)
        params["head.W_out"] = layers.uniform_init(rng, (cfg.d_model, cfg.output_vocab), cfg.d_model)
        params["head.b_out"] = np.zeros(cfg.output_vocab, dtype=np.float32)
        return NamedParams(params)

    def logits(self, leaves: Dict[str, Tensor], inputs: np.ndarray) -> Tensor:
        """(B, T) のトークン列から (B, T, クラス数) のロジット"""
        cfg = self.config
        self._check_length(inputs.shape[1], cfg.max_input_len, "入力系列")
        x = layers.embed(leaves, "", inputs)
        mask = layers.causal_mask(inputs.shape[1])
        for i in range(cfg.n_layers):
            h = layers.layer_norm(leaves, f"layer{i}.ln1", x)
            x = ops.add(x, layers.attention(leaves, f"layer{i}.attn", h, h, cfg.n_heads, mask))
            h = layers.layer_norm(leaves, f"layer{i}.ln2", x)
            x = ops.add(x, layers.mlp(leaves, f"layer{i}.mlp", h))
        x = layers.layer_norm(leaves, "ln_f", x)
        return ops.add(ops.matmul(x, leaves["head.W_out"]), leaves["head.b_out"])

    def forward_loss(self, leaves: Dict[str, Tensor], batch: TaskBatch) -> Tuple[Tensor, Tensor]:
        logits = self.logits(leaves, batch.inputs)
        return ops.cross_entropy(logits, batch.targets), logits

    def predict(self, params: NamedParams, batch: TaskBatch) -> np.ndarray:
        """位置ごとの argmax 深さクラス"""
        return self.logits(params.to_constants(), batch.inputs).values.argmax(axis=-1)

    def evaluate_accuracy(self, params: NamedParams, dataset: DyckDataset) -> float:
        if len(dataset) == 0:
            raise ValueError("空のデータセットは評価できません")
        correct = total = 0
        for start in range(0, len(dataset), self.eval_chunk):
            batch = dataset.batch(range(start, min(start + self.eval_chunk, len(dataset))))
            c, n = token_accuracy(self.predict(params, batch), batch)
            correct += c
            total += n
        return correct / total if total else 0.0
