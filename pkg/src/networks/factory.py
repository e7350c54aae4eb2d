from typing import List, Optional, Union

from src.interfaces.task_model import ITaskModel
from src.models.experiment_config import Architecture, ExperimentConfig, ModelConfig, Task
from src.models.task_data import DYCK_VOCAB_SIZE, DyckDataset, ScanDataset
from src.networks import layers
from src.networks.causal_transformer import CausalTransformer
from src.networks.encoder_decoder import EncoderDecoderTransformer
from src.tensorcore import NamedParams


def create_network(config: ModelConfig) -> ITaskModel:
    """
    構成タグに応じたモデルを作成

    Args:
        config: モデル構成

    Returns:
        ITaskModel: モデル
    """
    if config.architecture == Architecture.CAUSAL:
        return CausalTransformer(config)
    return EncoderDecoderTransformer(config)


def build_model(config: ModelConfig, seed: int) -> NamedParams:
    """構成とシードから初期パラメータを作成"""
    return create_network(config).init_params(seed)


def dyck_model_config(d_model: int = 128, n_layers: int = 2, n_heads: int = 4, d_ff: int = 256,
                      n_classes: int = 13, max_len: int = 24) -> ModelConfig:
    return ModelConfig(Architecture.CAUSAL, d_model, n_layers, n_heads, d_ff,
                       input_vocab=DYCK_VOCAB_SIZE, output_vocab=n_classes,
                       max_input_len=max_len, max_output_len=max_len)


def scan_model_config(source_vocab: int, target_vocab: int, max_source_len: int,
                      max_target_len: int, d_model: int = 256, n_layers: int = 3,
                      n_heads: int = 4, d_ff: int = 512) -> ModelConfig:
    return ModelConfig(Architecture.ENC_DEC, d_model, n_layers, n_heads, d_ff,
                       input_vocab=source_vocab, output_vocab=target_vocab,
                       max_input_len=max_source_len, max_output_len=max_target_len)


def model_config_for(config: ExperimentConfig,
                     train: Union[DyckDataset, ScanDataset],
                     test: Optional[Union[DyckDataset, ScanDataset]] = None) -> ModelConfig:
    """
    実験設定とデータセットからモデル構成を決める

    SCAN の最大長は長さフィルタ（+ 境界トークン）から、フィルタ無しならデータから決める。
    """
    d_model, n_layers, n_heads, d_ff = config.model_dims()
    if config.task == Task.DYCK:
        return dyck_model_config(d_model, n_layers, n_heads, d_ff,
                                 n_classes=config.max_depth + 1, max_len=config.seq_len)

    datasets = [d for d in (train, test) if d is not None]
    if config.max_command_len is not None:
        max_source = config.max_command_len + 1
    else:
        max_source = max(len(c) for d in datasets for c in d.commands) + 1
    if config.max_action_len is not None:
        max_target = config.max_action_len + 1
    else:
        max_target = max(len(a) for d in datasets for a in d.actions) + 1
    return scan_model_config(len(train.source_vocab), len(train.target_vocab),
                             max_source, max_target, d_model, n_layers, n_heads, d_ff)


def default_snapshot_matrices(model_config: ModelConfig) -> List[str]:
    """
    既定のスナップショット対象行列

    Dyck は全層の注意射影と MLP 重み、SCAN は最深デコーダ層のみ。
    """
    roles_attn = layers.ATTENTION_ROLES
    names: List[str] = []
    if model_config.architecture == Architecture.CAUSAL:
        for i in range(model_config.n_layers):
            names += [f"layer{i}.attn.{r}" for r in roles_attn]
            names += [f"layer{i}.mlp.{r}" for r in layers.MLP_ROLES]
        return names
    deepest = f"dec.layer{model_config.n_layers - 1}"
    names += [f"{deepest}.self_attn.{r}" for r in roles_attn]
    names += [f"{deepest}.cross_attn.{r}" for r in roles_attn]
    names += [f"{deepest}.mlp.{r}" for r in layers.MLP_ROLES]
    return names
