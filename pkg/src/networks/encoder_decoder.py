from typing import Dict, Tuple

import numpy as np

from src.models.task_data import ScanDataset, TaskBatch
from src.networks import layers
from src.networks.base import TransformerBase
from src.tensorcore import NamedParams, Tensor, ops
from src.utils.helpers import rng_stream


class EncoderDecoderTransformer(TransformerBase):
    """SCAN 用のエンコーダ・デコーダトランスフォーマー（n_layers は片側の層数）"""

    bos_id = 1
    eos_id = 2
    pad_id = 0

    def init_params(self, seed: int) -> NamedParams:
        cfg = self.config
        d = cfg.d_model
        rng = rng_stream(seed, "init")
        params: Dict[str, np.ndarray] = {}

        params["enc.tok_embed"] = layers.uniform_init(rng, (cfg.input_vocab, d), d)
        params["enc.pos_embed"] = layers.uniform_init(rng, (cfg.max_input_len, d), d)
        for i in range(cfg.n_layers):
            prefix = f"enc.layer{i}"
            layers.init_layer_norm(params, f"{prefix}.ln1", d)
            layers.init_attention(params, f"{prefix}.attn", d, rng)
            layers.init_layer_norm(params, f"{prefix}.ln2", d)
            layers.init_mlp(params, f"{prefix}.mlp", d, cfg.d_ff, rng)
        layers.init_layer_norm(params, "enc.ln_f", d)

        params["dec.tok_embed"] = layers.uniform_init(rng, (cfg.output_vocab, d), d)
        params["dec.pos_embed"] = layers.uniform_init(rng, (cfg.max_output_len, d), d)
        for i in range(cfg.n_layers):
            prefix = f"dec.layer{i}"
            layers.init_layer_norm(params, f"{prefix}.ln1", d)
            layers.init_attention(params, f"{prefix}.self_attn", d, rng)
            layers.init_layer_norm(params, f"{prefix}.ln2", d)
            layers.init_attention(params, f"{prefix}.cross_attn", d, rng)
            layers.init_layer_norm(params, f"{prefix}.ln3", d)
            layers.init_mlp(params, f"{prefix}.mlp", d, cfg.d_ff, rng)
        layers.init_layer_norm(params, "dec.ln_f", d)

        # 出力層は埋め込みと共有しない
        params["head.W_out"] = layers.uniform_init(rng, (d, cfg.output_vocab), d)
        params["head.b_out"] = np.zeros(cfg.output_vocab, dtype=np.float32)
        return NamedParams(params)

    def encode(self, leaves: Dict[str, Tensor], sources: np.ndarray,
               source_mask: np.ndarray) -> Tensor:
        cfg = self.config
        self._check_length(sources.shape[1], cfg.max_input_len, "コマンド系列")
        x = layers.embed(leaves, "enc.", sources)
        mask = layers.key_mask(source_mask)
        for i in range(cfg.n_layers):
            prefix = f"enc.layer{i}"
            h = layers.layer_norm(leaves, f"{prefix}.ln1", x)
            x = ops.add(x, layers.attention(leaves, f"{prefix}.attn", h, h, cfg.n_heads, mask))
            h = layers.layer_norm(leaves, f"{prefix}.ln2", x)
            x = ops.add(x, layers.mlp(leaves, f"{prefix}.mlp", h))
        return layers.layer_norm(leaves, "enc.ln_f", x)

    def decode(self, leaves: Dict[str, Tensor], memory: Tensor, source_mask: np.ndarray,
               decoder_inputs: np.ndarray) -> Tensor:
        cfg = self.config
        length = decoder_inputs.shape[1]
        self._check_length(length, cfg.max_output_len, "行動系列")
        y = layers.embed(leaves, "dec.", decoder_inputs)
        self_mask = layers.causal_mask(length)
        cross_mask = layers.key_mask(source_mask)
        for i in range(cfg.n_layers):
            prefix = f"dec.layer{i}"
            h = layers.layer_norm(leaves, f"{prefix}.ln1", y)
            y = ops.add(y, layers.attention(leaves, f"{prefix}.self_attn", h, h, cfg.n_heads, self_mask))
            h = layers.layer_norm(leaves, f"{prefix}.ln2", y)
            y = ops.add(y, layers.attention(leaves, f"{prefix}.cross_attn", h, memory,
                                            cfg.n_heads, cross_mask))
            h = layers.layer_norm(leaves, f"{prefix}.ln3", y)
            y = ops.add(y, layers.mlp(leaves, f"{prefix}.mlp", h))
        y = layers.layer_norm(leaves, "dec.ln_f", y)
        return ops.add(ops.matmul(y, leaves["head.W_out"]), leaves["head.b_out"])

    def forward_loss(self, leaves: Dict[str, Tensor], batch: TaskBatch) -> Tuple[Tensor, Tensor]:
        memory = self.encode(leaves, batch.inputs, batch.source_mask)
        logits = self.decode(leaves, memory, batch.source_mask, batch.decoder_inputs)
        return ops.cross_entropy(logits, batch.targets), logits

    def greedy_decode(self, params: NamedParams, sources: np.ndarray,
                      source_mask: np.ndarray) -> np.ndarray:
        """
        貪欲デコード（最大長は max_output_len）

        Args:
            params: パラメータ
            sources: (B, S) コマンド ID
            source_mask: (B, S) 有効位置

        Returns:
            np.ndarray: (B, max_output_len) 予測 ID（全行が <eos> を出した後は <pad>）
        """
        leaves = params.to_constants()
        memory = self.encode(leaves, sources, source_mask)
        batch = sources.shape[0]
        out = np.full((batch, 1), self.bos_id, dtype=np.int64)
        finished = np.zeros(batch, dtype=bool)
        for _ in range(self.config.max_output_len):
            logits = self.decode(leaves, memory, source_mask, out)
            next_ids = logits.values[:, -1, :].argmax(axis=-1)
            next_ids = np.where(finished, self.pad_id, next_ids)
            out = np.concatenate([out, next_ids[:, None]], axis=1)
            finished |= next_ids == self.eos_id
            if finished.all() or out.shape[1] > self.config.max_output_len:
                break
        predictions = np.full((batch, self.config.max_output_len), self.pad_id, dtype=np.int64)
        generated = out[:, 1:self.config.max_output_len + 1]
        predictions[:, :generated.shape[1]] = generated
        return predictions

    def evaluate_accuracy(self, params: NamedParams, dataset: ScanDataset) -> float:
        """系列単位の完全一致率（<eos> までの全トークン一致で正解）"""
        if len(dataset) == 0:
            raise ValueError("空のデータセットは評価できません")
        correct = 0
        for start in range(0, len(dataset), self.eval_chunk):
            indices = range(start, min(start + self.eval_chunk, len(dataset)))
            batch = dataset.batch(indices)
            predictions = self.greedy_decode(params, batch.inputs, batch.source_mask)
            for row, i in enumerate(indices):
                target = dataset.target_ids(i)
                correct += int(list(predictions[row, :len(target)]) == target)
        return correct / len(dataset)
