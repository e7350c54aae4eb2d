from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.tensorcore.ops import IGNORE_INDEX
from src.utils.error_handler import ConfigValidationError

PAD = "<pad>"
BOS = "<bos>"
EOS = "<eos>"
SPECIALS = (PAD, BOS, EOS)

# Dyck 入力トークン
OPEN_ID = 0
CLOSE_ID = 1
DYCK_PAD_ID = 2
DYCK_VOCAB_SIZE = 3


@dataclass
class DyckConfig:
    """Dyck-1 データ生成設定"""
    seq_len: int = 24
    max_depth: int = 12
    n_train: int = 50
    n_test: int = 5000
    seed: int = 0

    def validate(self) -> None:
        """設定値を検証"""
        if self.seq_len <= 0 or self.seq_len % 2:
            raise ConfigValidationError(f"seq_len は正の偶数である必要があります: {self.seq_len}")
        if not 1 <= self.max_depth <= self.seq_len // 2:
            raise ConfigValidationError(
                f"max_depth は 1..{self.seq_len // 2} の範囲である必要があります: {self.max_depth}"
            )
        if self.n_train < 1 or self.n_test < 0:
            raise ConfigValidationError("n_train は1以上、n_test は0以上である必要があります")

    @property
    def n_classes(self) -> int:
        """深さラベルのクラス数（0..max_depth）"""
        return self.max_depth + 1


@dataclass
class ScanConfig:
    """SCAN 読み込み設定"""
    path: str = "data/scan/tasks.txt"
    n_train: int = 2048
    data_seed: int = 0
    max_command_len: Optional[int] = 8
    max_action_len: Optional[int] = 13

    def validate(self) -> None:
        """設定値を検証"""
        if self.n_train < 1:
            raise ConfigValidationError(f"n_train は1以上である必要があります: {self.n_train}")
        for name in ("max_command_len", "max_action_len"):
            value = getattr(self, name)
            if value is not None and value < 1:
                raise ConfigValidationError(f"{name} は1以上である必要があります: {value}")


@dataclass
class Vocab:
    """トークン語彙（特殊トークン + ソート済み単語）"""
    tokens: List[str]
    index: Dict[str, int] = field(init=False)

    def __post_init__(self):
        self.index = {token: i for i, token in enumerate(self.tokens)}

    @classmethod
    def build(cls, sequences: Sequence[Sequence[str]]) -> "Vocab":
        words = sorted({token for seq in sequences for token in seq})
        return cls(list(SPECIALS) + words)

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def pad_id(self) -> int:
        return self.index[PAD]

    @property
    def bos_id(self) -> int:
        return self.index[BOS]

    @property
    def eos_id(self) -> int:
        return self.index[EOS]

    @property
    def word_count(self) -> int:
        """特殊トークンを除いた単語種類数"""
        return len(self.tokens) - len(SPECIALS)

    def encode(self, tokens: Sequence[str]) -> List[int]:
        return [self.index[token] for token in tokens]

    def decode(self, ids: Sequence[int]) -> List[str]:
        return [self.tokens[i] for i in ids]


@dataclass
class TaskBatch:
    """1ミニバッチ

    Dyck では inputs が括弧列、targets が位置ごとの深さクラス。
    SCAN では inputs がコマンド列、decoder_inputs が <bos> 付き行動列、
    targets が <eos> 付き行動列。損失から除外する位置の targets は IGNORE_INDEX。
    """
    inputs: np.ndarray
    targets: np.ndarray
    padding_mask: np.ndarray
    decoder_inputs: Optional[np.ndarray] = None
    source_mask: Optional[np.ndarray] = None
    indices: Optional[np.ndarray] = None

    @property
    def size(self) -> int:
        return int(self.inputs.shape[0])


def dyck_depths(sequence: str) -> List[int]:
    """各位置のトークンを読んだ後のスタック深さ"""
    depth = 0
    labels = []
    for char in sequence:
        depth += 1 if char == "(" else -1
        labels.append(depth)
    return labels


def is_balanced(sequence: str) -> bool:
    """スタックシミュレーションによる平衡判定"""
    depth = 0
    for char in sequence:
        if char == "(":
            depth += 1
        elif char == ")":
            depth -= 1
        else:
            return False
        if depth < 0:
            return False
    return depth == 0


@dataclass
class DyckDataset:
    """Dyck-1 系列と深さラベル"""
    sequences: List[str]
    labels: List[List[int]]
    n_classes: int = 13

    def __len__(self) -> int:
        return len(self.sequences)

    @property
    def max_len(self) -> int:
        return max((len(s) for s in self.sequences), default=0)

    def head(self, n: int) -> "DyckDataset":
        """先頭 n 例"""
        return DyckDataset(self.sequences[:n], self.labels[:n], self.n_classes)

    def batch(self, indices: Sequence[int]) -> TaskBatch:
        """指定インデックスの例をバッチ最大長までパディングしてまとめる"""
        idx = np.asarray(indices, dtype=np.int64)
        length = max(len(self.sequences[i]) for i in idx)
        inputs = np.full((len(idx), length), DYCK_PAD_ID, dtype=np.int64)
        targets = np.full((len(idx), length), IGNORE_INDEX, dtype=np.int64)
        for row, i in enumerate(idx):
            seq = self.sequences[i]
            inputs[row, :len(seq)] = [OPEN_ID if c == "(" else CLOSE_ID for c in seq]
            targets[row, :len(seq)] = self.labels[i]
        return TaskBatch(inputs=inputs, targets=targets, padding_mask=targets != IGNORE_INDEX,
                         indices=idx)


@dataclass
class ScanDataset:
    """SCAN のコマンド・行動ペア"""
    commands: List[Tuple[str, ...]]
    actions: List[Tuple[str, ...]]
    source_vocab: Vocab
    target_vocab: Vocab

    def __len__(self) -> int:
        return len(self.commands)

    def source_ids(self, i: int) -> List[int]:
        """コマンド単語列 + <eos>"""
        return self.source_vocab.encode(self.commands[i]) + [self.source_vocab.eos_id]

    def target_ids(self, i: int) -> List[int]:
        """行動列 + <eos>"""
        return self.target_vocab.encode(self.actions[i]) + [self.target_vocab.eos_id]

    def head(self, n: int) -> "ScanDataset":
        """先頭 n 例（語彙は共有）"""
        return ScanDataset(self.commands[:n], self.actions[:n], self.source_vocab,
                           self.target_vocab)

    def batch(self, indices: Sequence[int]) -> TaskBatch:
        """指定インデックスの例を教師強制用のバッチにまとめる"""
        idx = np.asarray(indices, dtype=np.int64)
        sources = [self.source_ids(i) for i in idx]
        targets = [self.target_ids(i) for i in idx]
        src_len = max(len(s) for s in sources)
        tgt_len = max(len(t) for t in targets)

        src_pad = self.source_vocab.pad_id
        tgt_pad = self.target_vocab.pad_id
        inputs = np.full((len(idx), src_len), src_pad, dtype=np.int64)
        dec_in = np.full((len(idx), tgt_len), tgt_pad, dtype=np.int64)
        out = np.full((len(idx), tgt_len), IGNORE_INDEX, dtype=np.int64)
        for row, (src, tgt) in enumerate(zip(sources, targets)):
            inputs[row, :len(src)] = src
            dec_in[row, 0] = self.target_vocab.bos_id
            dec_in[row, 1:len(tgt)] = tgt[:-1]
            out[row, :len(tgt)] = tgt
        return TaskBatch(inputs=inputs, targets=out, padding_mask=out != IGNORE_INDEX,
                         decoder_inputs=dec_in, source_mask=inputs != src_pad, indices=idx)

    def command_strings(self) -> List[str]:
        return [" ".join(c) for c in self.commands]
